"""
Evaluation: corpus BLEU, lambda tuning, representation similarity and
representation dumps.
"""

import math
from collections import Counter
from collections.abc import Callable, Sequence
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .corpus import Vocabulary
from .datastore import Datastore, synthesize_pairs
from .errors import ConfigError, ContractError
from .log import get_logger
from .models import SentencePair, SimilarityReport, SourceMode
from .network import TranslationModel

logger = get_logger()

MAX_ORDER = 4
SMOOTHING_EPS = 0.1
SIMILARITY_MODES = ("parallel", "copy", "copy+adapters", "empty", "backtranslate")


def _ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(hypotheses: Sequence[Sequence], references: Sequence[Sequence]) -> float:
    """Corpus BLEU-4 on token sequences, scaled to [0, 100].

    Clipped n-gram counts are pooled over the corpus. An order with zero
    matches scores eps / total; orders with no hypothesis n-grams at all are
    left out of the geometric mean.
    """
    if len(hypotheses) != len(references):
        raise ContractError(
            f"{len(hypotheses)} hypotheses but {len(references)} references"
        )
    hyp_len = sum(len(h) for h in hypotheses)
    ref_len = sum(len(r) for r in references)
    if hyp_len == 0:
        return 0.0

    matches = [0] * MAX_ORDER
    totals = [0] * MAX_ORDER
    for hyp, ref in zip(hypotheses, references, strict=True):
        for n in range(1, MAX_ORDER + 1):
            hyp_counts = _ngrams(list(hyp), n)
            ref_counts = _ngrams(list(ref), n)
            matches[n - 1] += sum((hyp_counts & ref_counts).values())
            totals[n - 1] += sum(hyp_counts.values())

    log_precisions = []
    for match, total in zip(matches, totals, strict=True):
        if total == 0:
            continue
        precision = match / total if match > 0 else SMOOTHING_EPS / total
        log_precisions.append(math.log(precision))

    brevity = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    score = 100.0 * brevity * math.exp(sum(log_precisions) / len(log_precisions))
    return min(max(score, 0.0), 100.0)


def score_lambda_grid(
    dev: Sequence[SentencePair],
    system: Callable[[float], Sequence[Sequence[int]]],
    grid: Sequence[float],
) -> dict[float, float]:
    """Dev BLEU for every grid value; ``system(lam)`` translates the dev sources."""
    if not grid:
        raise ContractError("lambda grid must not be empty")
    if any(not 0.0 <= lam <= 1.0 for lam in grid):
        raise ContractError("lambda grid values must lie in [0, 1]")
    references = [list(p.target) for p in dev]
    scores = {}
    for lam in grid:
        scores[lam] = corpus_bleu(system(lam), references)
        logger.debug("Scored lambda", extra={"lambda": lam, "bleu": round(scores[lam], 3)})
    return scores


def best_lambda(scores: dict[float, float]) -> float:
    """Highest BLEU; ties go to the smaller lambda."""
    return min(scores, key=lambda lam: (-scores[lam], lam))


def tune_lambda(
    dev: Sequence[SentencePair],
    system: Callable[[float], Sequence[Sequence[int]]],
    grid: Sequence[float],
) -> float:
    scores = score_lambda_grid(dev, system, grid)
    lam = best_lambda(scores)
    logger.info("Tuned lambda", extra={"lambda": lam, "bleu": round(scores[lam], 3)})
    return lam


@torch.no_grad()
def measure_similarity(
    parallel_dev: Sequence[SentencePair],
    model: TranslationModel,
    candidate_mode: str,
    reverse_model: TranslationModel | None = None,
    batch_size: int = 64,
) -> SimilarityReport:
    """Compare candidate keys built from the target side with the ideal keys h(x, y<t).

    Means are taken per target position over the whole corpus.
    """
    if candidate_mode not in SIMILARITY_MODES:
        raise ConfigError(
            f"unknown similarity mode '{candidate_mode}' (one of {', '.join(SIMILARITY_MODES)})"
        )
    use_adapters = candidate_mode == "copy+adapters"
    if use_adapters and model.adapters is None:
        raise ConfigError("copy+adapters needs a model with adapters")
    source_mode = SourceMode("copy" if use_adapters else candidate_mode)
    candidates = synthesize_pairs(parallel_dev, source_mode, reverse_model)

    model.eval()
    cosine_sum = 0.0
    distance_sum = 0.0
    n_positions = 0
    for start in range(0, len(parallel_dev), batch_size):
        gold = parallel_dev[start : start + batch_size]
        synthetic = candidates[start : start + batch_size]
        targets = [p.target for p in gold]
        ideal, valid = model.forced_reps_batch([p.source for p in gold], targets)
        candidate, _ = model.forced_reps_batch(
            [p.source for p in synthetic], targets, use_adapters=use_adapters
        )
        a = candidate[valid].double()
        b = ideal[valid].double()
        cosine_sum += float(F.cosine_similarity(a, b, dim=-1).sum())
        distance_sum += float((a - b).pow(2).sum())
        n_positions += a.shape[0]

    if n_positions == 0:
        raise ContractError("similarity needs at least one target position")
    report = SimilarityReport(
        mode=candidate_mode,
        mean_cosine=min(max(cosine_sum / n_positions, -1.0), 1.0),
        mean_sq_euclidean=max(distance_sum / n_positions, 0.0),
        n_positions=n_positions,
    )
    logger.info("Measured similarity", extra=report.model_dump())
    return report


def dump_representations(
    store: Datastore, token_ids: Sequence[int], vocab: Vocabulary, path: str | Path
) -> int:
    """Write every entry whose value is in ``token_ids`` as token, entry id, key values.

    Returns the number of rows written.
    """
    if not token_ids:
        raise ContractError("dump_representations needs at least one token")
    wanted = set(int(t) for t in token_ids)
    rows = np.flatnonzero(np.isin(store.values, list(wanted)))
    missing = wanted - set(int(v) for v in store.values[rows])
    if missing:
        logger.warning(
            "Tokens absent from datastore",
            extra={"missing": len(missing), "tokens": [vocab.detokenize(t) for t in sorted(missing)]},
        )

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for entry_id in rows:
            token = vocab.detokenize(int(store.values[entry_id]))
            values = "\t".join(str(v) for v in store.keys[entry_id])
            f.write(f"{token}\t{entry_id}\t{values}\n")
    logger.info("Dumped representations", extra={"path": str(path), "rows": len(rows)})
    return len(rows)


def compare_systems(
    sources: Sequence[Sequence[int]],
    references: Sequence[Sequence[int]],
    outputs_by_system: dict[str, Sequence[Sequence[int]]],
    vocab: Vocabulary,
) -> list[dict[str, str]]:
    """Side-by-side translations per sentence, one column per system."""
    n = len(sources)
    if len(references) != n or any(len(out) != n for out in outputs_by_system.values()):
        raise ContractError("sources, references and system outputs must be aligned")
    rows = []
    for i in range(n):
        row = {
            "id": str(i),
            "source": vocab.decode(sources[i]),
            "reference": vocab.decode(references[i]),
        }
        for name, outputs in outputs_by_system.items():
            row[name] = vocab.decode(outputs[i])
        rows.append(row)
    return rows
