"""
Named-tensor checkpoint container ("UDAK").

Layout (little-endian): magic "UDAK", version u32, tensor count u32; then per
tensor: name length u16, UTF-8 name, rank u8, dims u32 x rank, f32 payload in
row-major order. Model configs travel in a JSON sidecar next to the file.
"""

import hashlib
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import FormatError
from .log import get_logger
from .models import ModelConfig
from .network import TranslationModel

logger = get_logger()

MAGIC = b"UDAK"
VERSION = 1


def save_tensors(path: str | Path, tensors: dict[str, torch.Tensor]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(struct.pack("<4sII", MAGIC, VERSION, len(tensors)))
        for name, tensor in tensors.items():
            encoded = name.encode("utf-8")
            array = tensor.detach().cpu().contiguous().numpy().astype("<f4")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", array.ndim))
            f.write(np.asarray(array.shape, dtype="<u4").tobytes())
            f.write(array.tobytes(order="C"))
    return path


class ByteReader:
    """Sequential reader over a byte buffer that reports truncation with its offset."""

    def __init__(self, path: Path, data: bytes):
        self.path = path
        self.data = data
        self.offset = 0

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.data):
            raise FormatError(self.path, self.offset, f"truncated: need {n} more bytes")
        chunk = self.data[self.offset : self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_tensors(path: str | Path) -> dict[str, torch.Tensor]:
    path = Path(path)
    reader = ByteReader(path, path.read_bytes())
    magic, version, count = reader.unpack("<4sII")
    if magic != MAGIC:
        raise FormatError(path, 0, f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(path, 4, f"unsupported version {version}")

    tensors = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        (rank,) = reader.unpack("<B")
        dims = tuple(int(d) for d in np.frombuffer(reader.take(4 * rank), dtype="<u4"))
        n_values = int(np.prod(dims, dtype=np.int64)) if dims else 1
        payload = np.frombuffer(reader.take(4 * n_values), dtype="<f4").reshape(dims)
        tensors[name] = torch.from_numpy(payload.astype(np.float32))
    if reader.offset != len(reader.data):
        raise FormatError(path, reader.offset, "trailing bytes after last tensor")
    return tensors


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def model_tensors(model: TranslationModel, part: str = "base") -> dict[str, torch.Tensor]:
    """``part`` is "base" (everything but adapters), "adapters" or "all"."""
    state = model.state_dict()
    if part == "base":
        return {k: v for k, v in state.items() if not k.startswith("adapters.")}
    if part == "adapters":
        return {k: v for k, v in state.items() if k.startswith("adapters.")}
    return dict(state)


def save_model(model: TranslationModel, path: str | Path, part: str = "base") -> Path:
    path = save_tensors(path, model_tensors(model, part))
    _sidecar(path).write_text(model.cfg.model_dump_json(indent=2), encoding="utf-8")
    logger.info("Saved checkpoint", extra={"path": str(path), "part": part})
    return path


def load_model_config(path: str | Path) -> ModelConfig:
    sidecar = _sidecar(Path(path))
    if not sidecar.exists():
        raise FormatError(sidecar, 0, "missing model config sidecar")
    return ModelConfig.model_validate_json(sidecar.read_text(encoding="utf-8"))


def load_model(
    path: str | Path,
    adapters_path: str | Path | None = None,
    cfg: ModelConfig | None = None,
) -> TranslationModel:
    """Rebuild a model from a base checkpoint, optionally with trained adapters.

    Adapters missing from the checkpoints keep their identity initialization.
    """
    if cfg is None:
        cfg = load_model_config(adapters_path or path)
    model = TranslationModel(cfg)
    tensors = load_tensors(path)
    if adapters_path is not None:
        tensors.update(load_tensors(adapters_path))

    state = model.state_dict()
    missing_base = [k for k in state if not k.startswith("adapters.") and k not in tensors]
    unexpected = [k for k in tensors if k not in state]
    if missing_base or unexpected:
        raise FormatError(
            path, 0, f"checkpoint does not fit model: missing={missing_base[:3]} unexpected={unexpected[:3]}"
        )
    for name, value in tensors.items():
        if state[name].shape != value.shape:
            raise FormatError(path, 0, f"shape mismatch for {name}: {tuple(value.shape)}")
    model.load_state_dict(tensors, strict=False)
    model.eval()
    return model


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def tensors_digest(tensors: dict[str, torch.Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(tensors):
        h.update(name.encode())
        h.update(tensors[name].detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
