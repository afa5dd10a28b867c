"""
Training regimes: base translation model, reverse model, adapters by
representation matching with the base frozen, and full fine-tuning.
"""

import copy
import math
import time
from collections.abc import Callable, Iterator, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor
from torch.optim.lr_scheduler import LambdaLR

from .config import seed_everything
from .corpus import swap_pairs
from .errors import ConfigError, ContractError, NumericError
from .log import get_logger
from .models import BOS, EOS, PAD, ModelConfig, SentencePair, TrainConfig
from .network import TranslationModel, pad_batch, source_ids

logger = get_logger()


@dataclass
class TrainResult:
    model: TranslationModel
    losses: list[float] = field(default_factory=list)
    steps: int = 0


@dataclass
class RepMatchBatch:
    """Per pair: decoder states of the translation pass (h) and of the adapter pass (h')."""

    pairs: list[SentencePair]
    base_reps: list[Tensor]
    adapter_reps: list[Tensor]


def inverse_sqrt_factor(step: int, warmup: int) -> float:
    step = max(step, 1)
    return min(step / warmup, math.sqrt(warmup / step))


def make_batches(
    pairs: Sequence[SentencePair], batch_tokens: int, seed: int
) -> list[list[int]]:
    """Seeded shuffle, then fill batches while padded tokens stay within budget."""
    order = np.random.default_rng(seed).permutation(len(pairs))
    batches: list[list[int]] = []
    current: list[int] = []
    width = 0
    for idx in order.tolist():
        pair = pairs[idx]
        size = max(len(pair.source), len(pair.target)) + 1
        if current and (len(current) + 1) * max(width, size) > batch_tokens:
            batches.append(current)
            current, width = [], 0
        current.append(idx)
        width = max(width, size)
    if current:
        batches.append(current)
    return batches


def batch_stream(
    pairs: Sequence[SentencePair], batch_tokens: int, seed: int
) -> Iterator[list[SentencePair]]:
    epoch = 0
    while True:
        for batch in make_batches(pairs, batch_tokens, seed + epoch):
            yield [pairs[i] for i in batch]
        epoch += 1


def _target_tensors(pairs: Sequence[SentencePair], device) -> tuple[Tensor, Tensor, Tensor]:
    tgt_in, tgt_pad = pad_batch([[BOS, *p.target] for p in pairs], device)
    tgt_out, _ = pad_batch([[*p.target, EOS] for p in pairs], device)
    return tgt_in, tgt_pad, tgt_out


def cross_entropy_loss(
    model: TranslationModel,
    pairs: Sequence[SentencePair],
    label_smoothing: float = 0.0,
    reduction: str = "mean",
) -> tuple[Tensor, int]:
    """Token-level (label-smoothed) cross-entropy; returns (loss, target token count)."""
    device = model.embed.weight.device
    src, src_pad = pad_batch([source_ids(p.source) for p in pairs], device)
    tgt_in, tgt_pad, tgt_out = _target_tensors(pairs, device)
    logits = model(src, src_pad, tgt_in, tgt_pad)
    n_tokens = int((~tgt_pad).sum())
    total = F.cross_entropy(
        logits.reshape(-1, logits.shape[-1]),
        tgt_out.reshape(-1),
        ignore_index=PAD,
        label_smoothing=label_smoothing,
        reduction="sum",
    )
    return (total / n_tokens if reduction == "mean" else total), n_tokens


def rep_match_objective(h_adapter: Tensor, h_base: Tensor, valid: Tensor) -> Tensor:
    """Sum of squared distances over valid positions, divided by their count."""
    if h_adapter.shape != h_base.shape:
        raise ContractError(
            f"representation shapes differ: {tuple(h_adapter.shape)} vs {tuple(h_base.shape)}"
        )
    diff = (h_adapter - h_base)[valid]
    return diff.pow(2).sum() / valid.sum()


def rep_match_loss(batch: RepMatchBatch) -> float:
    """Mean per target position of ||h' - h||^2 over the whole batch."""
    if len(batch.base_reps) != len(batch.adapter_reps):
        raise ContractError("base and adapter representation lists differ in length")
    total = 0.0
    n_positions = 0
    for i, (h, h_prime) in enumerate(zip(batch.base_reps, batch.adapter_reps, strict=True)):
        if h.shape != h_prime.shape:
            raise ContractError(f"pair {i}: {tuple(h.shape)} vs {tuple(h_prime.shape)}")
        if i < len(batch.pairs) and h.shape[0] != len(batch.pairs[i].target) + 1:
            raise ContractError(f"pair {i}: expected |y|+1 = {len(batch.pairs[i].target) + 1} positions")
        total += float((h_prime.double() - h.double()).pow(2).sum())
        n_positions += h.shape[0]
    if n_positions == 0:
        raise ContractError("empty representation batch")
    return total / n_positions


def _train_loop(
    model: TranslationModel,
    params: list[torch.nn.Parameter],
    loss_fn: Callable[[list[SentencePair]], tuple[Tensor, int]],
    pairs: Sequence[SentencePair],
    cfg: TrainConfig,
    stage: str,
    metrics_path: str | Path | None = None,
) -> TrainResult:
    result = TrainResult(model=model)
    if cfg.max_steps == 0:
        return result
    if not pairs:
        raise ConfigError(f"{stage}: training corpus is empty")

    optimizer = torch.optim.Adam(params, lr=cfg.lr_peak, betas=(0.9, 0.98), eps=1e-9)
    scheduler = LambdaLR(
        optimizer, lambda i: inverse_sqrt_factor(i + 1, cfg.warmup_steps)
    )
    stream = batch_stream(pairs, cfg.batch_tokens, cfg.seed)

    metrics = None
    if metrics_path is not None:
        metrics_path = Path(metrics_path)
        metrics_path.parent.mkdir(parents=True, exist_ok=True)
        metrics = open(metrics_path, "w", encoding="utf-8")
        metrics.write("step\tloss\tlr\ttokens_per_sec\n")

    window_tokens = 0
    window_start = time.perf_counter()
    try:
        for step in range(1, cfg.max_steps + 1):
            batch = next(stream)
            lr = optimizer.param_groups[0]["lr"]
            optimizer.zero_grad(set_to_none=True)
            loss, n_tokens = loss_fn(batch)
            value = float(loss.detach())
            if not math.isfinite(value):
                last = result.losses[-1] if result.losses else float("nan")
                raise NumericError(
                    f"{stage}: loss is {value} at step {step} (last finite loss {last:.4f})"
                )
            loss.backward()
            torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
            optimizer.step()
            scheduler.step()

            result.losses.append(value)
            result.steps = step
            window_tokens += n_tokens

            if step % cfg.log_interval == 0 or step == cfg.max_steps:
                elapsed = max(time.perf_counter() - window_start, 1e-9)
                tps = window_tokens / elapsed
                logger.info(
                    "Training progress",
                    extra={"stage": stage, "step": step, "loss": round(value, 5), "lr": lr},
                )
                if metrics is not None:
                    metrics.write(f"{step}\t{value:.6f}\t{lr:.8g}\t{tps:.1f}\n")
                window_tokens = 0
                window_start = time.perf_counter()
    finally:
        if metrics is not None:
            metrics.close()
    return result


def build_model(model_cfg: ModelConfig, vocab_size: int | None = None) -> TranslationModel:
    if vocab_size is not None:
        model_cfg = model_cfg.model_copy(update={"vocab_size": vocab_size})
    return TranslationModel(model_cfg)


def train_base(
    parallel: Sequence[SentencePair],
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    metrics_path: str | Path | None = None,
    stage: str = "train/base",
) -> TrainResult:
    """Label-smoothed cross-entropy training from a seeded initialization."""
    if not parallel:
        raise ConfigError(f"{stage}: training corpus is empty")
    seed_everything(cfg.seed)
    model = build_model(model_cfg)
    model.train()

    def loss_fn(batch):
        return cross_entropy_loss(model, batch, cfg.label_smoothing)

    result = _train_loop(
        model, model.base_parameters(), loss_fn, parallel, cfg, stage, metrics_path
    )
    model.eval()
    return result


def train_reverse(
    parallel: Sequence[SentencePair],
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    metrics_path: str | Path | None = None,
) -> TrainResult:
    """Target-to-source model used for back-translation."""
    return train_base(swap_pairs(parallel), model_cfg, cfg, metrics_path, stage="train/reverse")


def train_adapters(
    parallel: Sequence[SentencePair],
    model: TranslationModel,
    cfg: TrainConfig,
    metrics_path: str | Path | None = None,
) -> TrainResult:
    """Fit adapters so the copied pass (y, y) reproduces the translation pass (x, y).

    Only adapter parameters receive gradients; the base stays bit-identical.
    """
    if model.adapters is None:
        raise ConfigError("model has no adapters (adapter_sites = none)")
    seed_everything(cfg.seed)
    model.freeze_base()
    model.eval()
    params = model.adapter_parameters()
    for p in params:
        p.requires_grad_(True)

    def loss_fn(batch):
        sources = [p.source for p in batch]
        targets = [p.target for p in batch]
        with torch.no_grad():
            h, valid = model.forced_reps_batch(sources, targets, use_adapters=False)
        h_prime, _ = model.forced_reps_batch(targets, targets, use_adapters=True)
        return rep_match_objective(h_prime, h, valid), int(valid.sum())

    return _train_loop(model, params, loss_fn, parallel, cfg, "train/adapters", metrics_path)


def fine_tune_full(
    synthetic_parallel: Sequence[SentencePair],
    base: TranslationModel,
    cfg: TrainConfig,
    metrics_path: str | Path | None = None,
) -> TrainResult:
    """Cross-entropy on synthetic pairs with every base parameter trainable.

    Works on a copy; ``base`` itself is left untouched.
    """
    if not synthetic_parallel:
        raise ConfigError("train/finetune: training corpus is empty")
    seed_everything(cfg.seed)
    model = copy.deepcopy(base)
    params = model.base_parameters()
    for p in params:
        p.requires_grad_(True)
    model.train()

    def loss_fn(batch):
        return cross_entropy_loss(model, batch, cfg.label_smoothing)

    result = _train_loop(
        model, params, loss_fn, synthetic_parallel, cfg, "train/finetune", metrics_path
    )
    model.eval()
    return result


def _eval_batches(pairs: Sequence[SentencePair], batch_size: int):
    for start in range(0, len(pairs), batch_size):
        yield pairs[start : start + batch_size]


@torch.no_grad()
def evaluate_loss(
    model: TranslationModel, pairs: Sequence[SentencePair], batch_size: int = 64
) -> float:
    """Mean per-token cross-entropy (no smoothing)."""
    model.eval()
    total, n_tokens = 0.0, 0
    for batch in _eval_batches(pairs, batch_size):
        loss, n = cross_entropy_loss(model, batch, reduction="sum")
        total += float(loss)
        n_tokens += n
    if n_tokens == 0:
        raise ContractError("cannot evaluate on an empty corpus")
    return total / n_tokens


@torch.no_grad()
def token_accuracy(
    model: TranslationModel, pairs: Sequence[SentencePair], batch_size: int = 64
) -> float:
    """Teacher-forced argmax accuracy over all target positions including EOS."""
    model.eval()
    correct, n_tokens = 0, 0
    device = model.embed.weight.device
    for batch in _eval_batches(pairs, batch_size):
        src, src_pad = pad_batch([source_ids(p.source) for p in batch], device)
        tgt_in, tgt_pad, tgt_out = _target_tensors(batch, device)
        pred = model(src, src_pad, tgt_in, tgt_pad).argmax(-1)
        valid = ~tgt_pad
        correct += int((pred.eq(tgt_out) & valid).sum())
        n_tokens += int(valid.sum())
    return correct / max(n_tokens, 1)


@torch.no_grad()
def corpus_rep_match_loss(
    model: TranslationModel,
    pairs: Sequence[SentencePair],
    batch_size: int = 64,
    use_adapters: bool = True,
) -> float:
    """Streaming per-token rep-matching loss over a corpus (adapter pass vs translation pass)."""
    model.eval()
    total, n_positions = 0.0, 0
    for batch in _eval_batches(pairs, batch_size):
        sources = [p.source for p in batch]
        targets = [p.target for p in batch]
        h, valid = model.forced_reps_batch(sources, targets, use_adapters=False)
        h_prime, _ = model.forced_reps_batch(targets, targets, use_adapters=use_adapters)
        total += float((h_prime - h)[valid].double().pow(2).sum())
        n_positions += int(valid.sum())
    if n_positions == 0:
        raise ContractError("cannot evaluate on an empty corpus")
    return total / n_positions
