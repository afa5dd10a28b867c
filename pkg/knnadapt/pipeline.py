"""
Experiment orchestration: a fixed on-disk workspace layout and the stages
that fill it, from data generation to the results tables.

Every stage derives its seed from the root seed and its stage name, so a run
is reproducible stage by stage and can resume from the artifacts on disk.
"""

import contextlib
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

from pydantic import ValidationError

from .checkpoint import load_model, load_model_config, save_model
from .config import derive_seed, save_experiment_config, seed_everything, settings
from .corpus import (
    Vocabulary,
    build_vocabulary,
    generate_domain_corpus,
    load_corpus,
    load_domain_specs,
    make_domain_specs,
    save_domain_specs,
    write_corpus,
)
from .datastore import build_datastore, load_datastore, save_datastore, synthesize_pairs
from .decode import translate_corpus
from .errors import ConfigError, KnnAdaptError, StageError
from .evaluate import best_lambda, corpus_bleu, measure_similarity, score_lambda_grid
from .ivf import Retriever, build_ivf, load_index, save_index
from .log import get_logger
from .models import (
    AdapterSites,
    Baseline,
    ExperimentConfig,
    KnnConfig,
    SentencePair,
    SimilarityReport,
    SourceMode,
    SystemScore,
    TrainConfig,
)
from .network import TranslationModel
from .renderer import SIMILARITY_HEADER, results_rows, similarity_rows, write_tsv
from .training import fine_tune_full, train_adapters, train_base, train_reverse

logger = get_logger()

# Datastore source construction and adapter use per retrieval baseline.
STORE_BASELINES: dict[Baseline, tuple[SourceMode, bool]] = {
    Baseline.EMPTY: (SourceMode.EMPTY, False),
    Baseline.COPY: (SourceMode.COPY, False),
    Baseline.BT: (SourceMode.BACKTRANSLATE, False),
    Baseline.UDA: (SourceMode.COPY, True),
    Baseline.UDA_ENCDEC: (SourceMode.COPY, True),
    Baseline.PARALLEL: (SourceMode.PARALLEL, False),
}

# Base-only store built when a source mode is asked for directly.
MODE_BASELINES: dict[SourceMode, Baseline] = {
    SourceMode.PARALLEL: Baseline.PARALLEL,
    SourceMode.COPY: Baseline.COPY,
    SourceMode.EMPTY: Baseline.EMPTY,
    SourceMode.BACKTRANSLATE: Baseline.BT,
}


class Workspace:
    """Artifact layout under one root: data/, models/, stores/, reports/."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.data = self.root / "data"
        self.models = self.root / "models"
        self.stores = self.root / "stores"
        self.reports = self.root / "reports"

    def create(self) -> "Workspace":
        for d in (self.data, self.models, self.stores, self.reports):
            d.mkdir(parents=True, exist_ok=True)
        return self

    # data
    @property
    def domain_specs(self) -> Path:
        return self.data / "domains.toml"

    @property
    def vocab(self) -> Path:
        return self.data / "vocab.txt"

    def corpus(self, domain: str, split: str) -> Path:
        suffix = "txt" if split == "mono" else "tsv"
        return self.data / f"{domain}.{split}.{suffix}"

    # models
    @property
    def base_model(self) -> Path:
        return self.models / "base.udak"

    @property
    def reverse_model(self) -> Path:
        return self.models / "reverse.udak"

    def adapters(self, sites: AdapterSites) -> Path:
        name = "adapters" if sites == AdapterSites.ENCODER else "adapters-encdec"
        return self.models / f"{name}.udak"

    def finetuned(self, domain: str) -> Path:
        return self.models / f"finetune-{domain}.udak"

    # stores
    def store(self, domain: str, name: str) -> Path:
        return self.stores / domain / f"{name}.udkd"

    def index(self, domain: str, name: str) -> Path:
        return self.stores / domain / f"{name}.udki"

    # reports
    def metrics(self, stage: str) -> Path:
        return self.reports / "metrics" / f"{stage.replace('/', '-')}.tsv"

    def hypotheses(self, domain: str, system: str) -> Path:
        return self.reports / domain / f"{system}.hyp.txt"

    @property
    def results(self) -> Path:
        return self.reports / "results.tsv"

    @property
    def similarity(self) -> Path:
        return self.reports / "similarity.tsv"

    @property
    def lambdas(self) -> Path:
        return self.reports / "lambda.tsv"

    @property
    def effective_config(self) -> Path:
        return self.root / "effective_config.toml"


def resolve_workspace(cfg: ExperimentConfig, out: str | Path | None = None) -> Workspace:
    return Workspace(out or cfg.paths.workdir or settings.workdir)


@contextlib.contextmanager
def stage(name: str):
    logger.info("Stage started", extra={"stage": name})
    try:
        yield
    except StageError:
        raise
    except (KnnAdaptError, ValueError, RuntimeError, OSError, ValidationError) as e:
        logger.error("Stage failed", extra={"stage": name, "error": str(e)})
        raise StageError(name, e) from e
    logger.info("Stage finished", extra={"stage": name})


def _reuse(path: Path, resume: bool) -> bool:
    if resume and path.exists():
        logger.info("Reusing artifact", extra={"path": str(path)})
        return True
    return False


def _seeded(train_cfg: TrainConfig, root_seed: int, stage_name: str) -> TrainConfig:
    return train_cfg.model_copy(update={"seed": derive_seed(root_seed, stage_name)})


# -- data ------------------------------------------------------------------


@dataclass
class DomainData:
    train: list[SentencePair]
    dev: list[SentencePair]
    test: list[SentencePair]

    @property
    def mono(self) -> list[list[int]]:
        """In-domain target-side text, the only in-domain data the unsupervised systems see."""
        return [list(p.target) for p in self.train]


@dataclass
class ExperimentData:
    vocab: Vocabulary
    general_train: list[SentencePair]
    general_dev: list[SentencePair]
    domains: dict[str, DomainData] = field(default_factory=dict)

    def domain(self, name: str) -> DomainData:
        if name not in self.domains:
            raise ConfigError(
                f"unknown domain '{name}' (configured: {', '.join(self.domains)})"
            )
        return self.domains[name]


def generate_data(cfg: ExperimentConfig, ws: Workspace) -> ExperimentData:
    """Write domain specs, vocabulary and every corpus split into ``ws.data``."""
    root = cfg.experiment.seed
    d = cfg.data
    if cfg.paths.domain_specs is not None:
        specs = load_domain_specs(cfg.paths.domain_specs)
    else:
        specs = make_domain_specs(
            cfg.experiment.domains,
            n_shared=d.n_shared,
            n_content=d.n_content,
            n_ambiguous=d.n_ambiguous,
            reorder_window=d.reorder_window,
            seed=derive_seed(root, "domains"),
            ambiguous_rate=d.ambiguous_rate,
            shared_rate=d.shared_rate,
        )
    missing = [name for name in ["general", *cfg.experiment.domains] if name not in specs]
    if missing:
        raise ConfigError(f"domain specs lack: {', '.join(missing)}")

    lengths = (d.min_len, d.max_len)
    general = generate_domain_corpus(
        specs["general"], d.general_pairs + d.dev, lengths, derive_seed(root, "data/general")
    )
    general_train, general_dev = general[: d.general_pairs], general[d.general_pairs :]

    text_domains = {}
    for name in cfg.experiment.domains:
        splits = {
            split: generate_domain_corpus(
                specs[name], n, lengths, derive_seed(root, f"data/{name}/{split}")
            )
            for split, n in (("train", d.in_domain_train), ("dev", d.dev), ("test", d.test))
        }
        n_leak = round(d.in_domain_leak * d.general_pairs)
        if n_leak > 0:
            held = {p.source for pairs in splits.values() for p in pairs}
            leak = generate_domain_corpus(
                specs[name], n_leak, lengths, derive_seed(root, f"data/{name}/leak")
            )
            general_train.extend(p for p in leak if p.source not in held)
        text_domains[name] = splits

    corpora = [
        [side for p in pairs for side in p]
        for pairs in [general_train, general_dev]
        + [pairs for splits in text_domains.values() for pairs in splits.values()]
    ]
    vocab = build_vocabulary(corpora, d.min_count)

    ws.create()
    save_domain_specs(specs, ws.domain_specs)
    vocab.save(ws.vocab)
    write_corpus(ws.corpus("general", "train"), general_train)
    write_corpus(ws.corpus("general", "dev"), general_dev)
    for name, splits in text_domains.items():
        for split, pairs in splits.items():
            write_corpus(ws.corpus(name, split), pairs)
        write_corpus(ws.corpus(name, "mono"), [p.target for p in splits["train"]])

    logger.info(
        "Generated data",
        extra={
            "vocab_size": len(vocab),
            "general_pairs": len(general_train),
            "domains": cfg.experiment.domains,
        },
    )
    return load_data(cfg, ws)


def load_data(cfg: ExperimentConfig, ws: Workspace) -> ExperimentData:
    if not ws.vocab.exists():
        raise ConfigError(f"no vocabulary at {ws.vocab}; run gen-data first")
    vocab = Vocabulary.load(ws.vocab)
    data = ExperimentData(
        vocab=vocab,
        general_train=load_corpus(ws.corpus("general", "train"), vocab),
        general_dev=load_corpus(ws.corpus("general", "dev"), vocab),
    )
    for name in cfg.experiment.domains:
        data.domains[name] = DomainData(
            train=load_corpus(ws.corpus(name, "train"), vocab),
            dev=load_corpus(ws.corpus(name, "dev"), vocab),
            test=load_corpus(ws.corpus(name, "test"), vocab),
        )
    return data


# -- models ----------------------------------------------------------------


def run_train_base(
    cfg: ExperimentConfig, ws: Workspace, data: ExperimentData, resume: bool = False
) -> TranslationModel:
    if not _reuse(ws.base_model, resume):
        model_cfg = cfg.model.model_copy(update={"vocab_size": len(data.vocab)})
        train_cfg = _seeded(cfg.train.base, cfg.experiment.seed, "train/base")
        result = train_base(
            data.general_train, model_cfg, train_cfg, ws.metrics("train/base")
        )
        save_model(result.model, ws.base_model, part="base")
    return load_model(ws.base_model)


def run_train_reverse(
    cfg: ExperimentConfig, ws: Workspace, data: ExperimentData, resume: bool = False
) -> TranslationModel:
    if not _reuse(ws.reverse_model, resume):
        model_cfg = cfg.model.model_copy(
            update={"vocab_size": len(data.vocab), "adapter_sites": AdapterSites.NONE}
        )
        train_cfg = _seeded(cfg.train.reverse, cfg.experiment.seed, "train/reverse")
        result = train_reverse(
            data.general_train, model_cfg, train_cfg, ws.metrics("train/reverse")
        )
        save_model(result.model, ws.reverse_model, part="base")
    return load_model(ws.reverse_model)


def run_train_adapters(
    cfg: ExperimentConfig,
    ws: Workspace,
    data: ExperimentData,
    sites: AdapterSites = AdapterSites.ENCODER,
    resume: bool = False,
) -> TranslationModel:
    """Base model carrying adapters trained by representation matching."""
    if sites == AdapterSites.NONE:
        raise ConfigError("adapter training needs adapter sites")
    path = ws.adapters(sites)
    if not _reuse(path, resume):
        stage_name = "train/adapters" if sites == AdapterSites.ENCODER else "train/adapters-encdec"
        train_cfg = _seeded(cfg.train.adapters, cfg.experiment.seed, stage_name)
        model_cfg = load_model_config(ws.base_model).model_copy(update={"adapter_sites": sites})
        # Fresh adapter weights are drawn while the model is built.
        seed_everything(train_cfg.seed)
        model = load_model(ws.base_model, cfg=model_cfg)
        train_adapters(data.general_train, model, train_cfg, ws.metrics(stage_name))
        save_model(model, path, part="adapters")
    return load_model(ws.base_model, adapters_path=path)


def back_translate(
    ws: Workspace,
    data: ExperimentData,
    domain: str,
    reverse: TranslationModel,
    strategy: str = "greedy",
    resume: bool = False,
) -> list[SentencePair]:
    """Back-translated in-domain targets, cached as data/<domain>.bt.tsv."""
    path = ws.corpus(domain, "bt")
    if _reuse(path, resume):
        return load_corpus(path, data.vocab)
    pairs = synthesize_pairs(
        data.domain(domain).mono, SourceMode.BACKTRANSLATE, reverse, strategy
    )
    write_corpus(path, pairs, data.vocab)
    return pairs


def run_fine_tune(
    cfg: ExperimentConfig,
    ws: Workspace,
    domain: str,
    base: TranslationModel,
    synthetic: Sequence[SentencePair],
    resume: bool = False,
) -> TranslationModel:
    path = ws.finetuned(domain)
    if not _reuse(path, resume):
        stage_name = f"train/finetune/{domain}"
        train_cfg = _seeded(cfg.train.finetune, cfg.experiment.seed, stage_name)
        result = fine_tune_full(synthetic, base, train_cfg, ws.metrics(stage_name))
        save_model(result.model, path, part="base")
    return load_model(path)


# -- retrieval -------------------------------------------------------------


def store_corpus(data: ExperimentData, domain: str, mode: SourceMode) -> list:
    """Parallel mode sees gold in-domain pairs; every other mode sees targets only."""
    if mode == SourceMode.PARALLEL:
        return data.domain(domain).train
    return data.domain(domain).mono


def run_build_store(
    cfg: ExperimentConfig,
    ws: Workspace,
    domain: str,
    name: str,
    corpus: Sequence,
    model: TranslationModel,
    mode: SourceMode,
    use_adapters: bool,
    reverse: TranslationModel | None = None,
    resume: bool = False,
) -> Retriever:
    """Build (or reuse) the datastore and its IVF index for one baseline."""
    store_path, index_path = ws.store(domain, name), ws.index(domain, name)
    if _reuse(store_path, resume):
        ds = load_datastore(store_path)
    else:
        ds = build_datastore(
            corpus, model, mode, reverse, use_adapters, strategy=cfg.experiment.strategy
        )
        save_datastore(ds, store_path)

    if len(ds) == 0:
        return Retriever(ds)
    if _reuse(index_path, resume):
        index = load_index(index_path)
    else:
        nlist = min(cfg.index.nlist, len(ds))
        index = build_ivf(
            ds, nlist, cfg.index.kmeans_iters, derive_seed(cfg.experiment.seed, f"index/{domain}/{name}")
        )
        save_index(index, index_path)
    return Retriever(ds, index)


def tuned_translate(
    knn: KnnConfig,
    model: TranslationModel,
    retriever: Retriever,
    dev: Sequence[SentencePair],
    strategy: str,
) -> tuple[float, dict[float, float]]:
    """Best lambda on ``dev`` and the full grid of dev BLEU scores."""
    sources = [p.source for p in dev]

    def system(lam: float):
        return translate_corpus(
            sources, model, retriever, knn.model_copy(update={"lam": lam}), strategy
        )

    scores = score_lambda_grid(dev, system, knn.lambda_grid)
    return best_lambda(scores), scores


# -- experiment ------------------------------------------------------------


@dataclass
class ExperimentResult:
    scores: list[SystemScore] = field(default_factory=list)
    similarity: dict[str, list[SimilarityReport]] = field(default_factory=dict)
    lambda_scores: dict[tuple[str, str], dict[float, float]] = field(default_factory=dict)


def _score(
    ws: Workspace,
    data: ExperimentData,
    domain: str,
    system: str,
    hypotheses: list[list[int]],
    lam: float | None,
) -> SystemScore:
    references = [list(p.target) for p in data.domains[domain].test]
    write_corpus(ws.hypotheses(domain, system), hypotheses, data.vocab)
    bleu = corpus_bleu(hypotheses, references)
    logger.info("Scored system", extra={"domain": domain, "system": system, "bleu": round(bleu, 3)})
    return SystemScore(system=system, domain=domain, bleu=bleu, lam=lam)


def write_reports(ws: Workspace, result: ExperimentResult) -> None:
    header, rows = results_rows(result.scores)
    write_tsv(ws.results, header, rows)
    write_tsv(ws.similarity, SIMILARITY_HEADER, similarity_rows(result.similarity))
    write_tsv(
        ws.lambdas,
        ["domain", "system", "lambda", "dev_bleu"],
        (
            [domain, system, f"{lam:.2f}", f"{bleu:.4f}"]
            for (domain, system), grid in result.lambda_scores.items()
            for lam, bleu in grid.items()
        ),
    )


def run_experiment(
    cfg: ExperimentConfig, ws: Workspace, resume: bool = False
) -> ExperimentResult:
    """Data, models, per-domain stores and test BLEU for every configured baseline."""
    baselines = list(dict.fromkeys(cfg.experiment.baselines))
    strategy = cfg.experiment.strategy
    ws.create()
    save_experiment_config(cfg, ws.effective_config)
    logger.info(
        "Experiment started",
        extra={"workspace": str(ws.root), "seed": cfg.experiment.seed, "baselines": baselines},
    )

    with stage("data"):
        data = load_data(cfg, ws) if resume and ws.vocab.exists() else generate_data(cfg, ws)
    with stage("train/base"):
        base = run_train_base(cfg, ws, data, resume)

    reverse = None
    if Baseline.BT in baselines or Baseline.BT_FT in baselines:
        with stage("train/reverse"):
            reverse = run_train_reverse(cfg, ws, data, resume)

    adapted: dict[Baseline, TranslationModel] = {}
    if Baseline.UDA in baselines:
        with stage("train/adapters"):
            adapted[Baseline.UDA] = run_train_adapters(
                cfg, ws, data, AdapterSites.ENCODER, resume
            )
    if Baseline.UDA_ENCDEC in baselines:
        with stage("train/adapters-encdec"):
            adapted[Baseline.UDA_ENCDEC] = run_train_adapters(
                cfg, ws, data, AdapterSites.ENCODER_DECODER, resume
            )

    result = ExperimentResult()
    for domain in cfg.experiment.domains:
        knn = cfg.knn.for_domain(domain)
        plain = knn.model_copy(update={"lam": 0.0})
        domain_data = data.domain(domain)
        sources = [p.source for p in domain_data.test]

        bt_pairs = None
        if reverse is not None:
            with stage(f"backtranslate/{domain}"):
                bt_pairs = back_translate(ws, data, domain, reverse, strategy, resume)

        for baseline in baselines:
            name = str(baseline)
            with stage(f"evaluate/{domain}/{name}"):
                if baseline == Baseline.BASIC:
                    hyps = translate_corpus(sources, base, None, plain, strategy)
                    result.scores.append(_score(ws, data, domain, name, hyps, None))
                    continue
                if baseline == Baseline.BT_FT:
                    tuned = run_fine_tune(cfg, ws, domain, base, bt_pairs, resume)
                    hyps = translate_corpus(sources, tuned, None, plain, strategy)
                    result.scores.append(_score(ws, data, domain, name, hyps, None))
                    continue

                mode, use_adapters = STORE_BASELINES[baseline]
                if mode == SourceMode.BACKTRANSLATE:
                    # The cached back-translations are real pairs for the frozen base.
                    corpus, mode = bt_pairs, SourceMode.PARALLEL
                else:
                    corpus = store_corpus(data, domain, mode)
                store_model = adapted.get(baseline, base)
                retriever = run_build_store(
                    cfg, ws, domain, name, corpus, store_model, mode, use_adapters, resume=resume
                )
                lam, grid = tuned_translate(knn, base, retriever, domain_data.dev, strategy)
                result.lambda_scores[(domain, name)] = grid
                hyps = translate_corpus(
                    sources, base, retriever, knn.model_copy(update={"lam": lam}), strategy
                )
                result.scores.append(_score(ws, data, domain, name, hyps, lam))

        if Baseline.UDA in adapted:
            with stage(f"similarity/{domain}"):
                reports = [
                    measure_similarity(domain_data.dev, adapted[Baseline.UDA], "copy"),
                    measure_similarity(domain_data.dev, adapted[Baseline.UDA], "copy+adapters"),
                ]
                if reverse is not None:
                    reports.append(
                        measure_similarity(domain_data.dev, base, "backtranslate", reverse)
                    )
                result.similarity[domain] = reports

    with stage("reports"):
        write_reports(ws, result)
    logger.info("Experiment finished", extra={"workspace": str(ws.root)})
    return result
