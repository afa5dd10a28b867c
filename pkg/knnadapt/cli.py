from pathlib import Path

import typer
from rich.console import Console
from rich.syntax import Syntax

from .checkpoint import load_model
from .config import (
    derive_seed,
    dump_experiment_config,
    load_experiment_config,
    save_experiment_config,
    settings,
)
from .corpus import Vocabulary, load_corpus, tokenize, write_corpus
from .datastore import load_datastore
from .decode import StepTrace, translate
from .errors import ConfigError, UsageError, exit_code_for
from .evaluate import (
    compare_systems,
    corpus_bleu,
    dump_representations,
    measure_similarity,
)
from .ivf import Retriever, build_ivf, load_index, recall_at_k, save_index
from .log import set_level
from .models import AdapterSites, Baseline, ExperimentConfig, SourceMode
from .pipeline import (
    MODE_BASELINES,
    STORE_BASELINES,
    Workspace,
    generate_data,
    load_data,
    resolve_workspace,
    run_build_store,
    run_experiment,
    run_train_adapters,
    run_train_base,
    run_train_reverse,
    store_corpus,
    tuned_translate,
)
from .renderer import (
    render_comparison,
    render_error,
    render_key_values,
    render_recall,
    render_results,
    render_similarity,
    render_success,
    trace_lines,
    write_tsv,
)

console = Console()

app = typer.Typer(help="Unsupervised domain adaptation for kNN-augmented translation.")

SEED_HELP = "Root seed (overrides [experiment].seed)"
CONFIG_HELP = "Experiment config TOML (default: packaged default.toml)"
OUT_HELP = "Workspace directory (default: [paths].workdir or KNNADAPT_WORKDIR)"


def _setup(
    config: Path | None, seed: int | None, out: Path | None, debug: bool
) -> tuple[ExperimentConfig, Workspace]:
    if debug:
        set_level("DEBUG")
    cfg = load_experiment_config(config)
    if seed is not None:
        cfg = cfg.model_copy(
            update={"experiment": cfg.experiment.model_copy(update={"seed": seed})}
        )
    return cfg, resolve_workspace(cfg, out)


def _fail(e: Exception) -> typer.Exit:
    """Render ``e`` and return the Exit carrying its exit code."""
    code = exit_code_for(e)
    if isinstance(e, FileNotFoundError):
        e = ConfigError(f"missing artifact {e.filename}; run the producing stage first")
    render_error(str(e))
    return typer.Exit(code)


def _store_name(baseline: str) -> Baseline:
    try:
        return Baseline(baseline)
    except ValueError:
        raise UsageError(
            f"unknown baseline '{baseline}' (one of {', '.join(b.value for b in Baseline)})"
        )


def _vocab(ws: Workspace) -> Vocabulary:
    if not ws.vocab.exists():
        raise ConfigError(f"no vocabulary at {ws.vocab}; run gen-data first")
    return Vocabulary.load(ws.vocab)


def _retriever(ws: Workspace, domain: str, name: str) -> Retriever:
    ds = load_datastore(ws.store(domain, name))
    index_path = ws.index(domain, name)
    return Retriever(ds, load_index(index_path) if index_path.exists() else None)


@app.command()
def gen_data(
    seed: int | None = typer.Option(None, help=SEED_HELP),
    config: Path | None = typer.Option(None, help=CONFIG_HELP),
    out: Path | None = typer.Option(None, help=OUT_HELP),
    debug: bool = typer.Option(False, "--debug", help="Show debug logs"),
):
    """Generate the synthetic multi-domain corpora and the vocabulary."""
    try:
        cfg, ws = _setup(config, seed, out, debug)
        data = generate_data(cfg, ws)
        save_experiment_config(cfg, ws.effective_config)
    except Exception as e:
        raise _fail(e)
    render_success(
        f"Wrote {len(data.general_train)} general pairs and {len(data.domains)} in-domain "
        f"splits to {ws.data} (vocabulary: {len(data.vocab)} tokens)"
    )


@app.command()
def train_base(
    resume: bool = typer.Option(False, "--resume", help="Reuse an existing checkpoint"),
    seed: int | None = typer.Option(None, help=SEED_HELP),
    config: Path | None = typer.Option(None, help=CONFIG_HELP),
    out: Path | None = typer.Option(None, help=OUT_HELP),
    debug: bool = typer.Option(False, "--debug", help="Show debug logs"),
):
    """Train the general-domain translation model."""
    try:
        cfg, ws = _setup(config, seed, out, debug)
        run_train_base(cfg, ws, load_data(cfg, ws), resume)
    except Exception as e:
        raise _fail(e)
    render_success(f"Base model saved to {ws.base_model}")


@app.command()
def train_reverse(
    resume: bool = typer.Option(False, "--resume", help="Reuse an existing checkpoint"),
    seed: int | None = typer.Option(None, help=SEED_HELP),
    config: Path | None = typer.Option(None, help=CONFIG_HELP),
    out: Path | None = typer.Option(None, help=OUT_HELP),
    debug: bool = typer.Option(False, "--debug", help="Show debug logs"),
):
    """Train the target-to-source model used for back-translation."""
    try:
        cfg, ws = _setup(config, seed, out, debug)
        run_train_reverse(cfg, ws, load_data(cfg, ws), resume)
    except Exception as e:
        raise _fail(e)
    render_success(f"Reverse model saved to {ws.reverse_model}")


@app.command()
def train_adapters(
    sites: AdapterSites = typer.Option(
        AdapterSites.ENCODER, help="Adapter placement: encoder or encoder+decoder"
    ),
    resume: bool = typer.Option(False, "--resume", help="Reuse an existing checkpoint"),
    seed: int | None = typer.Option(None, help=SEED_HELP),
    config: Path | None = typer.Option(None, help=CONFIG_HELP),
    out: Path | None = typer.Option(None, help=OUT_HELP),
    debug: bool = typer.Option(False, "--debug", help="Show debug logs"),
):
    """Train adapters by representation matching with the base frozen."""
    try:
        cfg, ws = _setup(config, seed, out, debug)
        run_train_adapters(cfg, ws, load_data(cfg, ws), sites, resume)
    except Exception as e:
        raise _fail(e)
    render_success(f"Adapters saved to {ws.adapters(sites)}")


@app.command()
def build_datastore(
    domain: str = typer.Option(..., help="In-domain name"),
    baseline: str = typer.Option(
        "uda", help="Store to build: empty, copy, bt, uda, uda-encdec or parallel"
    ),
    mode: SourceMode | None = typer.Option(
        None,
        help="Source construction; a mode other than the baseline's "
        "builds that mode's base-only store",
    ),
    seed: int | None = typer.Option(None, help=SEED_HELP),
    config: Path | None = typer.Option(None, help=CONFIG_HELP),
    out: Path | None = typer.Option(None, help=OUT_HELP),
    debug: bool = typer.Option(False, "--debug", help="Show debug logs"),
):
    """Build the datastore and IVF index of one baseline for one domain."""
    try:
        name = _store_name(baseline)
        if name not in STORE_BASELINES:
            raise UsageError(f"baseline '{baseline}' has no datastore")
        cfg, ws = _setup(config, seed, out, debug)
        data = load_data(cfg, ws)
        if mode is not None and mode != STORE_BASELINES[name][0]:
            # Only copy mode runs adapters; any other mode gets its own base-only store.
            name = MODE_BASELINES[mode]
        mode, use_adapters = STORE_BASELINES[name]
        reverse = load_model(ws.reverse_model) if mode == SourceMode.BACKTRANSLATE else None
        if name == Baseline.UDA:
            model = load_model(ws.base_model, ws.adapters(AdapterSites.ENCODER))
        elif name == Baseline.UDA_ENCDEC:
            model = load_model(ws.base_model, ws.adapters(AdapterSites.ENCODER_DECODER))
        else:
            model = load_model(ws.base_model)
        retriever = run_build_store(
            cfg,
            ws,
            domain,
            str(name),
            store_corpus(data, domain, mode),
            model,
            mode,
            use_adapters,
            reverse,
        )
    except Exception as e:
        raise _fail(e)
    render_success(
        f"Datastore '{name}' for {domain}: {len(retriever)} entries ({mode} sources) "
        f"at {ws.store(domain, str(name))}"
    )


@app.command()
def build_index(
    domain: str = typer.Option(..., help="In-domain name"),
    baseline: str = typer.Option("uda", help="Datastore to index"),
    nlist: int | None = typer.Option(None, help="Number of centroids (default: [index].nlist)"),
    report_recall: bool = typer.Option(
        False, "--report-recall", help="Measure recall@k against exact search on dev queries"
    ),
    seed: int | None = typer.Option(None, help=SEED_HELP),
    config: Path | None = typer.Option(None, help=CONFIG_HELP),
    out: Path | None = typer.Option(None, help=OUT_HELP),
    debug: bool = typer.Option(False, "--debug", help="Show debug logs"),
):
    """(Re)build the IVF index over an existing datastore."""
    try:
        cfg, ws = _setup(config, seed, out, debug)
        name = str(_store_name(baseline))
        ds = load_datastore(ws.store(domain, name))
        index = build_ivf(
            ds,
            min(nlist or cfg.index.nlist, len(ds)),
            cfg.index.kmeans_iters,
            derive_seed(cfg.experiment.seed, f"index/{domain}/{name}"),
        )
        save_index(index, ws.index(domain, name))
        recalls = {}
        if report_recall:
            queries = ds.keys[:: max(1, len(ds) // 200)][:200]
            probe = 1
            while probe <= index.nlist:
                recalls[probe] = recall_at_k(index, ds, queries, cfg.knn.k, probe)
                probe *= 2
    except Exception as e:
        raise _fail(e)
    if recalls:
        render_recall(recalls, cfg.knn.k)
    render_success(f"Index with {index.nlist} lists saved to {ws.index(domain, name)}")


@app.command(name="translate")
def translate_cmd(
    input_path: Path = typer.Option(..., "--input", help="Source sentences, one per line"),
    output: Path = typer.Option(..., "--output", help="Hypotheses, line-aligned with --input"),
    domain: str | None = typer.Option(None, help="In-domain name (selects store and temperature)"),
    baseline: str | None = typer.Option(None, help="Datastore to retrieve from"),
    lam: float | None = typer.Option(None, "--lambda", help="Interpolation weight (0 = plain model)"),
    strategy: str | None = typer.Option(None, help="greedy or beam:N"),
    trace: Path | None = typer.Option(None, help="Write per-step traces (greedy only)"),
    seed: int | None = typer.Option(None, help=SEED_HELP),
    config: Path | None = typer.Option(None, help=CONFIG_HELP),
    out: Path | None = typer.Option(None, help=OUT_HELP),
    debug: bool = typer.Option(False, "--debug", help="Show debug logs"),
):
    """Translate a file with the base model, optionally interpolated with kNN retrieval."""
    try:
        cfg, ws = _setup(config, seed, out, debug)
        vocab = _vocab(ws)
        knn = cfg.knn.for_domain(domain) if domain else cfg.knn
        if lam is not None:
            knn = knn.model_copy(update={"lam": lam})
        retriever = None
        if knn.lam > 0:
            if domain is None or baseline is None:
                raise UsageError("--domain and --baseline are required when lambda > 0")
            retriever = _retriever(ws, domain, str(_store_name(baseline)))
        model = load_model(ws.base_model)
        sources = load_corpus(input_path, vocab, mode="monolingual")
        strategy = strategy or cfg.experiment.strategy

        lines = []
        hypotheses = []
        for i, x in enumerate(sources):
            steps: list[StepTrace] | None = [] if trace is not None else None
            hypotheses.append(translate(x, model, retriever, knn, strategy, steps))
            if steps is not None:
                lines.extend(f"{i}\t{line}" for line in trace_lines(steps, vocab))
        write_corpus(output, hypotheses, vocab)
        if trace is not None:
            trace.parent.mkdir(parents=True, exist_ok=True)
            trace.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    except Exception as e:
        raise _fail(e)
    render_success(f"Translated {len(hypotheses)} sentences (lambda={knn.lam}) to {output}")


@app.command()
def evaluate(
    hyp: list[Path] = typer.Option(..., "--hyp", help="Hypothesis file(s)"),
    ref: Path = typer.Option(..., "--ref", help="Reference file, or a parallel .tsv (target side)"),
    source: Path | None = typer.Option(None, help="Source file shown by --compare"),
    compare: bool = typer.Option(False, "--compare", help="Show translations side by side"),
    report: Path | None = typer.Option(None, help="Write the comparison as TSV"),
    seed: int | None = typer.Option(None, help=SEED_HELP),
    config: Path | None = typer.Option(None, help=CONFIG_HELP),
    out: Path | None = typer.Option(None, help=OUT_HELP),
    debug: bool = typer.Option(False, "--debug", help="Show debug logs"),
):
    """Corpus BLEU of one or more hypothesis files."""
    try:
        cfg, ws = _setup(config, seed, out, debug)
        vocab = _vocab(ws)
        if ref.suffix == ".tsv":
            pairs = load_corpus(ref, vocab)
            references = [list(p.target) for p in pairs]
            sources = [list(p.source) for p in pairs]
        else:
            references = load_corpus(ref, vocab, mode="monolingual")
            sources = load_corpus(source, vocab, mode="monolingual") if source else references
        outputs = {
            path.stem: [vocab.encode(line) for line in path.read_text(encoding="utf-8").splitlines()]
            for path in hyp
        }
        scores = {name: corpus_bleu(h, references) for name, h in outputs.items()}
        rows = compare_systems(sources, references, outputs, vocab) if compare or report else []
        if report is not None:
            write_tsv(report, list(rows[0]) if rows else [], (r.values() for r in rows))
    except Exception as e:
        raise _fail(e)
    render_key_values("BLEU", {name: f"{s:.2f}" for name, s in scores.items()})
    if compare:
        render_comparison(rows)


@app.command()
def tune_lambda(
    domain: str = typer.Option(..., help="In-domain name"),
    baseline: str = typer.Option("uda", help="Datastore to retrieve from"),
    seed: int | None = typer.Option(None, help=SEED_HELP),
    config: Path | None = typer.Option(None, help=CONFIG_HELP),
    out: Path | None = typer.Option(None, help=OUT_HELP),
    debug: bool = typer.Option(False, "--debug", help="Show debug logs"),
):
    """Pick lambda on the in-domain dev set (ties go to the smaller value)."""
    try:
        cfg, ws = _setup(config, seed, out, debug)
        data = load_data(cfg, ws)
        retriever = _retriever(ws, domain, str(_store_name(baseline)))
        lam, grid = tuned_translate(
            cfg.knn.for_domain(domain),
            load_model(ws.base_model),
            retriever,
            data.domain(domain).dev,
            cfg.experiment.strategy,
        )
    except Exception as e:
        raise _fail(e)
    render_key_values(
        f"Dev BLEU by lambda ({domain}/{baseline})", {f"{k:.2f}": f"{v:.2f}" for k, v in grid.items()}
    )
    render_success(f"Best lambda: {lam}")


@app.command()
def measure_sim(
    domain: str = typer.Option(..., help="In-domain name"),
    mode: list[str] = typer.Option(
        ["copy", "copy+adapters"], help="parallel, copy, copy+adapters, empty or backtranslate"
    ),
    seed: int | None = typer.Option(None, help=SEED_HELP),
    config: Path | None = typer.Option(None, help=CONFIG_HELP),
    out: Path | None = typer.Option(None, help=OUT_HELP),
    debug: bool = typer.Option(False, "--debug", help="Show debug logs"),
):
    """Compare synthetic datastore keys with the keys gold sources would give."""
    try:
        cfg, ws = _setup(config, seed, out, debug)
        data = load_data(cfg, ws)
        adapters = ws.adapters(AdapterSites.ENCODER)
        model = load_model(ws.base_model, adapters if adapters.exists() else None)
        reverse = load_model(ws.reverse_model) if "backtranslate" in mode else None
        reports = {
            domain: [
                measure_similarity(data.domain(domain).dev, model, m, reverse) for m in mode
            ]
        }
    except Exception as e:
        raise _fail(e)
    render_similarity(reports)


@app.command()
def dump_reps(
    domain: str = typer.Option(..., help="In-domain name"),
    tokens: str = typer.Option(..., help="Comma-separated target words"),
    output: Path = typer.Option(..., "--output", help="TSV destination"),
    baseline: str = typer.Option("uda", help="Datastore to dump from"),
    seed: int | None = typer.Option(None, help=SEED_HELP),
    config: Path | None = typer.Option(None, help=CONFIG_HELP),
    out: Path | None = typer.Option(None, help=OUT_HELP),
    debug: bool = typer.Option(False, "--debug", help="Show debug logs"),
):
    """Dump datastore keys of selected tokens for external 2-D projection."""
    try:
        cfg, ws = _setup(config, seed, out, debug)
        vocab = _vocab(ws)
        ds = load_datastore(ws.store(domain, str(_store_name(baseline))))
        token_ids = vocab.encode(tokenize(tokens.replace(",", " ")))
        rows = dump_representations(ds, token_ids, vocab, output)
    except Exception as e:
        raise _fail(e)
    render_success(f"Wrote {rows} rows to {output}")


@app.command()
def run_all(
    baselines: str | None = typer.Option(
        None, help="Comma-separated baselines (default: [experiment].baselines)"
    ),
    resume: bool = typer.Option(False, "--resume", help="Reuse artifacts already on disk"),
    seed: int | None = typer.Option(None, help=SEED_HELP),
    config: Path | None = typer.Option(None, help=CONFIG_HELP),
    out: Path | None = typer.Option(None, help=OUT_HELP),
    debug: bool = typer.Option(False, "--debug", help="Show debug logs"),
):
    """Run the whole experiment and write the results tables."""
    try:
        cfg, ws = _setup(config, seed, out, debug)
        if baselines:
            chosen = [_store_name(b.strip()) for b in baselines.split(",") if b.strip()]
            cfg = cfg.model_copy(
                update={"experiment": cfg.experiment.model_copy(update={"baselines": chosen})}
            )
        result = run_experiment(cfg, ws, resume)
    except Exception as e:
        raise _fail(e)
    render_results(result.scores)
    if result.similarity:
        render_similarity(result.similarity)
    render_success(f"Results written to {ws.results}")


@app.command()
def config_show(
    config: Path | None = typer.Option(None, help=CONFIG_HELP),
):
    """Show environment settings and the effective experiment config."""
    try:
        cfg = load_experiment_config(config)
    except Exception as e:
        raise _fail(e)
    render_key_values(
        "🔧 knnadapt settings",
        {
            "workdir": settings.workdir,
            "config": config or settings.config_path or "default.toml (packaged)",
            "log level": settings.log_level,
            "debug": settings.debug,
            "threads": settings.threads,
        },
    )
    console.print(Syntax(dump_experiment_config(cfg), "toml"))


@app.command()
def config_init():
    """Create example .env file with configuration."""
    try:
        env_file = settings.create_env_file()
    except Exception as e:
        raise _fail(e)
    console.print(f"[green]✅ Created example configuration file: {env_file}[/green]")
    console.print("[blue]💡 Edit this file with your settings and rename to .env[/blue]")


def main():
    app()


if __name__ == "__main__":
    main()
