"""
Tests for datastore construction and the "UDKD" file format.
"""

import numpy as np
import pytest
import torch

from knnadapt.datastore import (
    Datastore,
    build_datastore,
    load_datastore,
    save_datastore,
    synthesize_pairs,
)
from knnadapt.errors import ConfigError, ContractError, FormatError
from knnadapt.models import EOS, SentencePair, SourceMode


@pytest.fixture
def two_targets():
    return [[5, 6, 7], [8, 9, 10, 11]]


class TestSynthesizePairs:
    """Source-side constructions."""

    def test_copy(self, two_targets):
        """Copy mode uses the target as its own source."""
        pairs = synthesize_pairs(two_targets, SourceMode.COPY)
        assert all(p.source == p.target for p in pairs)

    def test_empty(self, two_targets):
        """Empty mode sources are exactly [EOS]."""
        pairs = synthesize_pairs(two_targets, SourceMode.EMPTY)
        assert all(p.source == (EOS,) for p in pairs)
        assert [list(p.target) for p in pairs] == two_targets

    def test_parallel_keeps_gold(self):
        """Parallel mode returns the corpus unchanged."""
        pairs = [SentencePair(source=[4], target=[5, 6])]
        assert synthesize_pairs(pairs, SourceMode.PARALLEL) == pairs

    def test_parallel_needs_pairs(self, two_targets):
        """Parallel mode rejects target-only corpora."""
        with pytest.raises(ConfigError):
            synthesize_pairs(two_targets, SourceMode.PARALLEL)

    def test_backtranslate_needs_reverse_model(self, two_targets):
        """Back-translation without a reverse model is a config error."""
        with pytest.raises(ConfigError):
            synthesize_pairs(two_targets, SourceMode.BACKTRANSLATE)

    def test_backtranslate_sources_are_valid(self, two_targets, tiny_model):
        """Back-translated sources are non-empty and keep the targets."""
        pairs = synthesize_pairs(two_targets, SourceMode.BACKTRANSLATE, reverse_model=tiny_model)
        assert [list(p.target) for p in pairs] == two_targets
        assert all(len(p.source) >= 1 for p in pairs)

    def test_accepts_pairs_as_targets(self):
        """Target-only modes read the target side of parallel pairs."""
        pairs = synthesize_pairs([SentencePair(source=[4], target=[5, 6])], SourceMode.COPY)
        assert pairs[0].source == (5, 6)


class TestBuildDatastore:
    """Forced-decode key collection."""

    @pytest.mark.parametrize("mode", [SourceMode.COPY, SourceMode.EMPTY])
    def test_cardinality(self, tiny_model, two_targets, mode):
        """Targets of length 3 and 4 give 9 entries."""
        ds = build_datastore(two_targets, tiny_model, mode)
        assert len(ds) == 9
        assert ds.keys.shape == (9, 16)
        assert ds.keys.dtype == np.float32

    def test_cardinality_backtranslate(self, tiny_model, two_targets):
        """Back-translated stores also hold |y| + 1 entries per sentence."""
        ds = build_datastore(
            two_targets, tiny_model, SourceMode.BACKTRANSLATE, reverse_model=tiny_model
        )
        assert len(ds) == 9

    def test_values_include_eos(self, tiny_model, two_targets):
        """Values are the targets followed by EOS, in corpus order."""
        ds = build_datastore(two_targets, tiny_model, SourceMode.EMPTY)
        assert ds.values.tolist() == [5, 6, 7, EOS, 8, 9, 10, 11, EOS]

    def test_keys_are_forced_reps(self, tiny_model):
        """Keys equal the single-sentence forced pass."""
        pair = SentencePair(source=[4, 5], target=[6, 7])
        ds = build_datastore([pair], tiny_model, SourceMode.PARALLEL)
        with torch.no_grad():
            expected = tiny_model.forced_decode_reps(pair.source, pair.target).numpy()
        assert np.allclose(ds.keys, expected, atol=1e-6)

    def test_identity_adapters_equal_copy_baseline(self, tiny_model, two_targets):
        """Copy mode with fresh adapters reproduces the plain copy keys bit-exactly."""
        with_adapters = build_datastore(two_targets, tiny_model, SourceMode.COPY)
        without = build_datastore(two_targets, tiny_model, SourceMode.COPY, use_adapters=False)
        assert with_adapters.equals(without)

    def test_trained_adapters_only_in_copy_mode(self, tiny_model, two_targets):
        """Adapters change copy-mode keys but never empty-mode keys."""
        empty_before = build_datastore(two_targets, tiny_model, SourceMode.EMPTY)
        copy_before = build_datastore(two_targets, tiny_model, SourceMode.COPY)
        with torch.no_grad():
            for adapter in tiny_model.adapters.encoder:
                adapter.w2.normal_(0.0, 0.5)
        assert build_datastore(two_targets, tiny_model, SourceMode.EMPTY).equals(empty_before)
        assert not build_datastore(two_targets, tiny_model, SourceMode.COPY).equals(copy_before)

    def test_batching_does_not_change_order(self, tiny_model, two_targets):
        """Entry order is the corpus order for any batch size."""
        a = build_datastore(two_targets, tiny_model, SourceMode.COPY, batch_size=1)
        b = build_datastore(two_targets, tiny_model, SourceMode.COPY, batch_size=64)
        assert a.values.tolist() == b.values.tolist()
        assert np.allclose(a.keys, b.keys, atol=1e-5)

    def test_empty_corpus(self, tiny_model):
        """No sentences give a 0-entry store of the model width."""
        ds = build_datastore([], tiny_model, SourceMode.COPY)
        assert len(ds) == 0
        assert ds.dim == 16


class TestDatastoreType:
    """Datastore invariants."""

    def test_misaligned(self):
        """Keys and values must align."""
        with pytest.raises(ContractError):
            Datastore(2, np.zeros((3, 2), dtype=np.float32), np.zeros(2, dtype=np.int64))

    def test_wrong_dim(self):
        """Keys must have the declared width."""
        with pytest.raises(ContractError):
            Datastore(3, np.zeros((3, 2), dtype=np.float32), np.zeros(3, dtype=np.int64))


class TestDatastoreFile:
    """save_datastore / load_datastore."""

    def test_round_trip(self, tiny_model, two_targets, tmp_path):
        """A 9-entry store reloads bit-exactly."""
        ds = build_datastore(two_targets, tiny_model, SourceMode.COPY)
        assert load_datastore(save_datastore(ds, tmp_path / "s.udkd")).equals(ds)

    def test_empty_round_trip(self, tmp_path):
        """A 0-entry store round trips."""
        ds = Datastore.empty(8)
        loaded = load_datastore(save_datastore(ds, tmp_path / "s.udkd"))
        assert len(loaded) == 0
        assert loaded.dim == 8

    def test_layout(self, small_store, tmp_path):
        """Header, keys and values take exactly the documented bytes."""
        path = save_datastore(small_store, tmp_path / "s.udkd")
        assert path.stat().st_size == 20 + 300 * 8 * 4 + 300 * 4
        assert path.read_bytes()[:4] == b"UDKD"

    def test_truncated(self, small_store, tmp_path):
        """A cut file is an error, never a partial store."""
        path = save_datastore(small_store, tmp_path / "s.udkd")
        path.write_bytes(path.read_bytes()[:-1])
        with pytest.raises(FormatError, match="truncated"):
            load_datastore(path)

    def test_truncated_header(self, tmp_path):
        """Fewer bytes than a header is an error."""
        path = tmp_path / "s.udkd"
        path.write_bytes(b"UDKD")
        with pytest.raises(FormatError):
            load_datastore(path)

    def test_bad_magic(self, small_store, tmp_path):
        """A file of another type is rejected."""
        path = save_datastore(small_store, tmp_path / "s.udkd")
        path.write_bytes(b"UDKI" + path.read_bytes()[4:])
        with pytest.raises(FormatError, match="bad magic"):
            load_datastore(path)
