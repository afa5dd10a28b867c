"""
kNN-interpolated decoding.

At every step the decoder state of the plain base model queries the datastore;
the retrieved neighbors form a vocabulary distribution that is mixed with the
model's own distribution in probability space.
"""

import math
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigError, ContractError, DimensionError
from .ivf import Neighbor, Retriever
from .log import get_logger
from .models import BOS, EOS, PAD, KnnConfig
from .network import TranslationModel

logger = get_logger()

MAX_BEAM = 4
DEFAULT_BEAM = 4
TRACE_TOP = 5


def knn_distribution(
    neighbors: Sequence[Neighbor], temperature: float, vocab_size: int
) -> np.ndarray:
    """p(v) proportional to the sum of exp(-d_i / T) over neighbors with value v.

    No neighbors gives the all-zero vector, meaning "no retrieval evidence".
    """
    if temperature <= 0:
        raise ContractError(f"temperature must be positive, got {temperature}")
    p = np.zeros(vocab_size, dtype=np.float64)
    if not neighbors:
        return p
    dist = np.array([n.distance for n in neighbors], dtype=np.float64)
    values = np.array([n.value for n in neighbors], dtype=np.int64)
    if values.min() < 0 or values.max() >= vocab_size:
        raise ContractError(f"neighbor value outside vocabulary of size {vocab_size}")
    # Shifting by the minimum distance leaves the softmax unchanged.
    weights = np.exp(-(dist - dist.min()) / temperature)
    np.add.at(p, values, weights / weights.sum())
    return p


def interpolate(p_knn: np.ndarray, p_nmt: np.ndarray, lam: float) -> np.ndarray:
    if not 0.0 <= lam <= 1.0:
        raise ContractError(f"lambda must lie in [0, 1], got {lam}")
    if p_knn.shape != p_nmt.shape:
        raise DimensionError(f"distribution shapes differ: {p_knn.shape} vs {p_nmt.shape}")
    return lam * p_knn + (1.0 - lam) * p_nmt


def parse_strategy(strategy: str) -> int | None:
    """None for greedy, otherwise the beam width."""
    if strategy == "greedy":
        return None
    if strategy == "beam":
        return DEFAULT_BEAM
    name, _, width = strategy.partition(":")
    if name == "beam" and width.isdigit() and 1 <= int(width) <= MAX_BEAM:
        return int(width)
    raise ConfigError(f"unknown decoding strategy '{strategy}' (greedy, beam or beam:1..{MAX_BEAM})")


def _top(p: np.ndarray, n: int = TRACE_TOP) -> list[tuple[int, float]]:
    order = np.argsort(-p, kind="stable")[:n]
    return [(int(i), float(p[i])) for i in order]


@dataclass
class StepTrace:
    position: int
    nmt_top: list[tuple[int, float]]
    neighbors: list[Neighbor]
    final_top: list[tuple[int, float]]
    chosen: int


@dataclass
class _Step:
    p: np.ndarray
    p_nmt: np.ndarray
    neighbors: list[Neighbor] = field(default_factory=list)


class _Scorer:
    def __init__(self, retriever: Retriever | None, cfg: KnnConfig):
        self.retriever = retriever if cfg.lam > 0 else None
        self.cfg = cfg

    def step(self, h: torch.Tensor, p_nmt_t: torch.Tensor) -> _Step:
        p_nmt = p_nmt_t.double().cpu().numpy()
        if self.retriever is None:
            return _Step(p_nmt, p_nmt)
        neighbors = self.retriever.search(h.float().cpu().numpy(), self.cfg.k, self.cfg.nprobe)
        if not neighbors:
            return _Step(p_nmt, p_nmt)
        p_knn = knn_distribution(neighbors, self.cfg.temperature, p_nmt.shape[0])
        return _Step(interpolate(p_knn, p_nmt, self.cfg.lam), p_nmt, neighbors)


def _selectable(p: np.ndarray) -> np.ndarray:
    p = p.copy()
    p[[PAD, BOS]] = 0.0
    return p


def _greedy(model, enc, scorer: _Scorer, max_len: int, trace: list | None) -> list[int]:
    prefix = [BOS]
    out: list[int] = []
    while len(out) < max_len:
        h, p_nmt = model.decode_step(enc, prefix)
        step = scorer.step(h, p_nmt)
        token = int(np.argmax(_selectable(step.p)))
        if trace is not None:
            trace.append(
                StepTrace(len(out), _top(step.p_nmt), step.neighbors, _top(step.p), token)
            )
        if token == EOS:
            break
        out.append(token)
        prefix.append(token)
    return out


def _beam(model, enc, scorer: _Scorer, max_len: int, width: int) -> list[int]:
    """Beam search ranked by length-normalized log-probability.

    Candidates that emit EOS leave the beam, which then shrinks; width 1 is greedy.
    """
    alive: list[tuple[list[int], float]] = [([], 0.0)]
    finished: list[tuple[float, list[int]]] = []
    while alive and len(alive[0][0]) < max_len:
        h, p_batch = model.decode_step_batch(enc, [[BOS, *tokens] for tokens, _ in alive])
        candidates = []
        for i, (tokens, score) in enumerate(alive):
            p = _selectable(scorer.step(h[i], p_batch[i]).p)
            for rank, v in enumerate(np.argsort(-p, kind="stable")[:width]):
                if p[v] <= 0.0:
                    break
                candidates.append((score + math.log(p[v]), i, rank, int(v)))
        candidates.sort(key=lambda c: (-c[0], c[1], c[2]))

        next_alive = []
        for score, i, _, v in candidates[:width]:
            tokens = alive[i][0]
            if v == EOS:
                finished.append((score / (len(tokens) + 1), tokens))
            else:
                next_alive.append(([*tokens, v], score))
        alive = next_alive
    for tokens, score in alive:
        finished.append((score / max(len(tokens), 1), tokens))
    if not finished:
        return []
    best = max(range(len(finished)), key=lambda j: (finished[j][0], -j))
    return finished[best][1]


@torch.no_grad()
def translate(
    x: Sequence[int],
    model: TranslationModel,
    retriever: Retriever | None,
    cfg: KnnConfig,
    strategy: str = "greedy",
    trace: list[StepTrace] | None = None,
) -> list[int]:
    """Translate one source sentence; the result excludes BOS and EOS.

    The base model always runs without adapters. ``trace`` collects one
    StepTrace per greedy step.
    """
    width = parse_strategy(strategy)
    if retriever is None and cfg.lam > 0:
        raise ConfigError("lambda > 0 needs a datastore")
    if retriever is not None:
        retriever.check_dim(model.cfg.d_model)
    if trace is not None and width is not None:
        raise ConfigError("step traces are only recorded for greedy decoding")

    model.eval()
    enc = model.encode(x, use_adapters=False)
    max_len = 2 * len(x) + 8
    scorer = _Scorer(retriever, cfg)
    if width is None:
        return _greedy(model, enc, scorer, max_len, trace)
    return _beam(model, enc, scorer, max_len, width)


def translate_corpus(
    sources: Sequence[Sequence[int]],
    model: TranslationModel,
    retriever: Retriever | None,
    cfg: KnnConfig,
    strategy: str = "greedy",
) -> list[list[int]]:
    outputs = [translate(x, model, retriever, cfg, strategy) for x in sources]
    logger.debug(
        "Translated corpus",
        extra={"sentences": len(outputs), "lambda": cfg.lam, "strategy": strategy},
    )
    return outputs
