"""
Tests for the named-tensor checkpoint container.
"""

import struct

import pytest
import torch

from knnadapt.checkpoint import (
    file_digest,
    load_model,
    load_model_config,
    load_tensors,
    model_tensors,
    save_model,
    save_tensors,
    tensors_digest,
)
from knnadapt.errors import FormatError


class TestTensorContainer:
    """Raw save_tensors / load_tensors."""

    def test_round_trip(self, tmp_path):
        """Names, shapes and values survive."""
        tensors = {
            "a": torch.arange(6, dtype=torch.float32).reshape(2, 3),
            "b.scalar": torch.tensor(2.5),
            "c": torch.zeros(0, 4),
        }
        loaded = load_tensors(save_tensors(tmp_path / "t.udak", tensors))
        assert list(loaded) == list(tensors)
        for name, value in tensors.items():
            assert torch.equal(loaded[name], value)

    def test_header(self, tmp_path):
        """The file starts with magic, version and tensor count."""
        path = save_tensors(tmp_path / "t.udak", {"x": torch.ones(1)})
        assert struct.unpack("<4sII", path.read_bytes()[:12]) == (b"UDAK", 1, 1)

    def test_bad_magic(self, tmp_path):
        """Another file type is rejected."""
        path = tmp_path / "t.udak"
        path.write_bytes(b"NOPE" + bytes(8))
        with pytest.raises(FormatError, match="bad magic"):
            load_tensors(path)

    def test_bad_version(self, tmp_path):
        """Unknown versions are rejected."""
        path = tmp_path / "t.udak"
        path.write_bytes(struct.pack("<4sII", b"UDAK", 9, 0))
        with pytest.raises(FormatError, match="version"):
            load_tensors(path)

    def test_truncated(self, tmp_path):
        """A cut-off payload reports the offset it stopped at."""
        path = save_tensors(tmp_path / "t.udak", {"x": torch.ones(4, 4)})
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(FormatError) as exc:
            load_tensors(path)
        assert exc.value.offset > 0

    def test_trailing_bytes(self, tmp_path):
        """Garbage after the last tensor is rejected."""
        path = save_tensors(tmp_path / "t.udak", {"x": torch.ones(2)})
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(FormatError, match="trailing"):
            load_tensors(path)


class TestModelCheckpoint:
    """save_model / load_model."""

    def test_base_round_trip(self, tiny_model, tmp_path):
        """A reloaded base model has identical parameters."""
        path = save_model(tiny_model, tmp_path / "base.udak")
        loaded = load_model(path)
        assert load_model_config(path) == tiny_model.cfg
        assert tensors_digest(model_tensors(loaded)) == tensors_digest(model_tensors(tiny_model))

    def test_base_part_excludes_adapters(self, tiny_model):
        """The base part holds no adapter tensors and the adapter part nothing else."""
        assert not any(k.startswith("adapters.") for k in model_tensors(tiny_model, "base"))
        assert all(k.startswith("adapters.") for k in model_tensors(tiny_model, "adapters"))

    def test_adapters_overlay(self, tiny_model, tmp_path):
        """Trained adapters load on top of the base checkpoint."""
        base_path = save_model(tiny_model, tmp_path / "base.udak")
        with torch.no_grad():
            tiny_model.adapters.embed.w2.fill_(0.25)
        adapters_path = save_model(tiny_model, tmp_path / "adapters.udak", part="adapters")

        plain = load_model(base_path)
        adapted = load_model(base_path, adapters_path)
        assert torch.count_nonzero(plain.adapters.embed.w2) == 0
        assert torch.all(adapted.adapters.embed.w2 == 0.25)

    def test_save_is_deterministic(self, tiny_model, tmp_path):
        """Saving the same model twice gives identical bytes."""
        a = save_model(tiny_model, tmp_path / "a.udak")
        b = save_model(tiny_model, tmp_path / "b.udak")
        assert file_digest(a) == file_digest(b)

    def test_missing_sidecar(self, tiny_model, tmp_path):
        """The model config must travel with the weights."""
        path = save_tensors(tmp_path / "bare.udak", model_tensors(tiny_model))
        with pytest.raises(FormatError, match="sidecar"):
            load_model(path)

    def test_wrong_architecture(self, tiny_model, tiny_model_cfg, tmp_path):
        """Weights for another shape do not load."""
        path = save_model(tiny_model, tmp_path / "base.udak")
        other = tiny_model_cfg.model_copy(update={"d_ff": 64})
        with pytest.raises(FormatError, match="shape mismatch"):
            load_model(path, cfg=other)
