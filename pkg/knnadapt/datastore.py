"""
Token-level datastore: (decoder state, next target token) for every target
position of a corpus, built under one of four source-side constructions.

File layout ("UDKD", little-endian): magic, version u32, dim u32, count u64,
keys count x dim f32, values count u32.
"""

import struct
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, ContractError, FormatError
from .log import get_logger
from .models import EOS, KnnConfig, SentencePair, SourceMode
from .network import TranslationModel

logger = get_logger()

MAGIC = b"UDKD"
VERSION = 1
HEADER = struct.Struct("<4sIIQ")


@dataclass(frozen=True, eq=False)
class Datastore:
    dim: int
    keys: np.ndarray  # (n, dim) float32
    values: np.ndarray  # (n,) int64

    def __post_init__(self):
        if self.keys.ndim != 2 or self.keys.shape[1] != self.dim:
            raise ContractError(f"keys must have shape (n, {self.dim}), got {self.keys.shape}")
        if self.values.shape != (self.keys.shape[0],):
            raise ContractError("keys and values must be aligned")

    def __len__(self) -> int:
        return int(self.values.shape[0])

    def equals(self, other: "Datastore") -> bool:
        return (
            self.dim == other.dim
            and np.array_equal(self.keys, other.keys)
            and np.array_equal(self.values, other.values)
        )

    @classmethod
    def empty(cls, dim: int) -> "Datastore":
        return cls(dim, np.zeros((0, dim), dtype=np.float32), np.zeros(0, dtype=np.int64))


def _targets(corpus: Sequence[SentencePair | Sequence[int]]) -> list[list[int]]:
    return [list(item.target) if isinstance(item, SentencePair) else list(item) for item in corpus]


def synthesize_pairs(
    corpus: Sequence[SentencePair | Sequence[int]],
    mode: SourceMode,
    reverse_model: TranslationModel | None = None,
    strategy: str = "greedy",
) -> list[SentencePair]:
    """Give every target sentence a source side according to ``mode``.

    parallel keeps the gold sources; copy uses (y, y); empty uses ([EOS], y);
    backtranslate decodes y with the reverse model.
    """
    mode = SourceMode(mode)
    if mode == SourceMode.PARALLEL:
        if not all(isinstance(item, SentencePair) for item in corpus):
            raise ConfigError("parallel mode needs a parallel corpus")
        return list(corpus)

    targets = _targets(corpus)
    if mode == SourceMode.COPY:
        return [SentencePair(source=y, target=y) for y in targets]
    if mode == SourceMode.EMPTY:
        return [SentencePair(source=[EOS], target=y) for y in targets]

    if reverse_model is None:
        raise ConfigError("backtranslate mode requires a reverse model")
    from .decode import translate

    no_retrieval = KnnConfig(lam=0.0)
    pairs = []
    for y in targets:
        x = translate(y, reverse_model, None, no_retrieval, strategy)
        pairs.append(SentencePair(source=x or [EOS], target=y))
    logger.info("Back-translated targets", extra={"sentences": len(pairs)})
    return pairs


@torch.no_grad()
def build_datastore(
    corpus: Sequence[SentencePair | Sequence[int]],
    model: TranslationModel,
    source_mode: SourceMode,
    reverse_model: TranslationModel | None = None,
    use_adapters: bool | None = None,
    batch_size: int = 64,
    strategy: str = "greedy",
) -> Datastore:
    """Forced-decode every pair and collect (h_t, y_t) for t = 1..|y|+1.

    Adapters run only in copy mode unless ``use_adapters`` says otherwise.
    """
    source_mode = SourceMode(source_mode)
    if use_adapters is None:
        use_adapters = source_mode == SourceMode.COPY and model.adapters is not None
    pairs = synthesize_pairs(corpus, source_mode, reverse_model, strategy)

    model.eval()
    dim = model.cfg.d_model
    keys: list[np.ndarray] = []
    values: list[int] = []
    for start in range(0, len(pairs), batch_size):
        batch = pairs[start : start + batch_size]
        h, valid = model.forced_reps_batch(
            [p.source for p in batch], [p.target for p in batch], use_adapters
        )
        keys.append(h[valid].float().cpu().numpy())
        for p in batch:
            values.extend(p.target)
            values.append(EOS)

    if not pairs:
        return Datastore.empty(dim)
    store = Datastore(
        dim,
        np.ascontiguousarray(np.concatenate(keys), dtype=np.float32),
        np.asarray(values, dtype=np.int64),
    )
    logger.info(
        "Built datastore",
        extra={"mode": str(source_mode), "adapters": use_adapters, "entries": len(store)},
    )
    return store


def save_datastore(ds: Datastore, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(HEADER.pack(MAGIC, VERSION, ds.dim, len(ds)))
        f.write(np.ascontiguousarray(ds.keys, dtype="<f4").tobytes())
        f.write(np.asarray(ds.values, dtype="<u4").tobytes())
    return path


def load_datastore(path: str | Path) -> Datastore:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < HEADER.size:
        raise FormatError(path, len(data), "truncated header")
    magic, version, dim, count = HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(path, 0, f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(path, 4, f"unsupported version {version}")

    keys_end = HEADER.size + 4 * count * dim
    values_end = keys_end + 4 * count
    if len(data) < keys_end:
        raise FormatError(path, len(data), f"truncated keys: expected {count} x {dim} floats")
    if len(data) < values_end:
        raise FormatError(path, len(data), f"truncated values: expected {count} ids")
    if len(data) > values_end:
        raise FormatError(path, values_end, "trailing bytes after values")
    if count == 0:
        return Datastore.empty(dim)

    keys = np.frombuffer(data, dtype="<f4", count=count * dim, offset=HEADER.size)
    values = np.frombuffer(data, dtype="<u4", count=count, offset=keys_end)
    return Datastore(
        dim,
        keys.reshape(count, dim).astype(np.float32),
        values.astype(np.int64),
    )
