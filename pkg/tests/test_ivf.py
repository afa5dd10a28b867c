"""
Tests for the IVF index, nearest-neighbor search and the "UDKI" file format.
"""

import numpy as np
import pytest

from knnadapt.datastore import Datastore
from knnadapt.errors import ConfigError, ContractError, DimensionError, FormatError
from knnadapt.ivf import (
    Retriever,
    brute_force_search,
    build_ivf,
    knn_search,
    load_index,
    recall_at_k,
    save_index,
)


@pytest.fixture
def queries():
    return np.random.default_rng(9).standard_normal((25, 8)).astype(np.float32)


@pytest.fixture
def two_clouds() -> Datastore:
    rng = np.random.default_rng(4)
    a = rng.normal(-10.0, 0.5, (40, 4))
    b = rng.normal(10.0, 0.5, (60, 4))
    keys = np.concatenate([a, b]).astype(np.float32)
    values = np.array([4] * 40 + [5] * 60, dtype=np.int64)
    return Datastore(4, keys, values)


class TestBuildIvf:
    """k-means clustering of the keys."""

    def test_single_list_is_mean(self, small_store):
        """nlist = 1 puts everything in one list around the mean."""
        index = build_ivf(small_store, nlist=1, kmeans_iters=2, seed=0)
        assert index.lists[0].tolist() == list(range(len(small_store)))
        assert np.allclose(index.centroids[0], small_store.keys.astype(np.float64).mean(0), atol=1e-6)

    def test_planted_clouds(self, two_clouds):
        """Two separated clouds become the two lists."""
        index = build_ivf(two_clouds, nlist=2, kmeans_iters=5, seed=0)
        lists = sorted(index.lists, key=len)
        assert lists[0].tolist() == list(range(40))
        assert lists[1].tolist() == list(range(40, 100))

    def test_deterministic(self, small_store):
        """Same inputs, same index."""
        a = build_ivf(small_store, 16, 5, seed=3)
        b = build_ivf(small_store, 16, 5, seed=3)
        assert a.equals(b)

    def test_lists_partition_entries(self, small_store):
        """The lists together are a permutation of all entry ids."""
        index = build_ivf(small_store, 16, 5, seed=3)
        ids = np.concatenate(index.lists)
        assert sorted(ids.tolist()) == list(range(len(small_store)))

    def test_entries_on_nearest_centroid(self, small_store):
        """Each entry sits in the list of its nearest centroid."""
        index = build_ivf(small_store, 16, 5, seed=3)
        keys = small_store.keys.astype(np.float64)
        cents = index.centroids.astype(np.float64)
        dist = ((keys[:, None, :] - cents[None, :, :]) ** 2).sum(-1)
        for j, ids in enumerate(index.lists):
            for i in ids:
                assert dist[i, j] <= dist[i].min() + 1e-9

    def test_duplicate_keys(self):
        """All-identical keys still produce a complete index."""
        ds = Datastore(2, np.ones((10, 2), dtype=np.float32), np.full(10, 4, dtype=np.int64))
        index = build_ivf(ds, nlist=3, kmeans_iters=3, seed=0)
        assert index.size == 10

    def test_nlist_too_large(self, small_store):
        """nlist above |ds| is a config error."""
        with pytest.raises(ConfigError):
            build_ivf(small_store, nlist=301, kmeans_iters=1, seed=0)

    def test_nlist_zero(self, small_store):
        """nlist must be positive."""
        with pytest.raises(ConfigError):
            build_ivf(small_store, nlist=0, kmeans_iters=1, seed=0)


class TestKnnSearch:
    """Search over probed lists."""

    def test_full_probe_equals_brute_force(self, small_store, queries):
        """nprobe = nlist returns the exhaustive top-k exactly."""
        index = build_ivf(small_store, 16, 5, seed=0)
        for q in queries:
            assert knn_search(index, small_store, q, 8, 16) == brute_force_search(small_store, q, 8)

    def test_recall_monotone(self, small_store, queries):
        """Recall does not fall as more lists are probed."""
        index = build_ivf(small_store, 16, 5, seed=0)
        recalls = [recall_at_k(index, small_store, queries, 8, p) for p in (1, 2, 4, 8, 16)]
        assert recalls == sorted(recalls)
        assert recalls[-1] == 1.0

    def test_exact_match_rank_zero(self, small_store):
        """A stored key is its own nearest neighbor at distance 0."""
        index = build_ivf(small_store, 16, 5, seed=0)
        hit = knn_search(index, small_store, small_store.keys[42], 4, 16)[0]
        assert hit.entry_id == 42
        assert hit.distance == 0.0
        assert hit.value == small_store.values[42]

    def test_ascending_with_id_ties(self):
        """Equal distances are ordered by entry id."""
        keys = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, 3.0]], dtype=np.float32)
        ds = Datastore(2, keys, np.array([4, 5, 6, 7], dtype=np.int64))
        result = brute_force_search(ds, np.zeros(2), 4)
        assert [n.entry_id for n in result] == [0, 1, 2, 3]
        assert [n.distance for n in result] == [1.0, 1.0, 1.0, 9.0]

    def test_distances_recomputed(self, small_store, queries):
        """Returned distances equal an independent squared L2."""
        index = build_ivf(small_store, 16, 5, seed=0)
        for q in queries[:5]:
            for n in knn_search(index, small_store, q, 8, 4):
                diff = small_store.keys[n.entry_id].astype(np.float64) - q.astype(np.float64)
                assert n.distance == pytest.approx(float(diff @ diff), rel=1e-5)

    def test_k_exceeds_store(self, store_factory):
        """k above |ds| returns every entry."""
        ds = store_factory(5, 3, seed=2)
        index = build_ivf(ds, 2, 2, seed=0)
        assert len(knn_search(index, ds, np.zeros(3), 10, 2)) == 5

    def test_nprobe_above_nlist(self, small_store, queries):
        """nprobe larger than nlist probes everything."""
        index = build_ivf(small_store, 4, 3, seed=0)
        assert knn_search(index, small_store, queries[0], 3, 99) == brute_force_search(
            small_store, queries[0], 3
        )

    def test_empty_store(self):
        """Searching an empty datastore returns nothing."""
        ds = Datastore.empty(4)
        assert brute_force_search(ds, np.zeros(4), 3) == []
        assert Retriever(ds).search(np.zeros(4), 3, 1) == []

    def test_bad_arguments(self, small_store):
        """k and nprobe are at least one; queries match the key width."""
        index = build_ivf(small_store, 4, 2, seed=0)
        with pytest.raises(ContractError):
            knn_search(index, small_store, np.zeros(8), 0, 1)
        with pytest.raises(ContractError):
            knn_search(index, small_store, np.zeros(8), 1, 0)
        with pytest.raises(DimensionError):
            knn_search(index, small_store, np.zeros(5), 1, 1)


class TestIndexFile:
    """save_index / load_index."""

    def test_round_trip(self, small_store, tmp_path):
        """A saved index reloads equal."""
        index = build_ivf(small_store, 16, 5, seed=0)
        assert load_index(save_index(index, tmp_path / "s.udki")).equals(index)

    def test_truncated(self, small_store, tmp_path):
        """Cut files are rejected."""
        path = save_index(build_ivf(small_store, 4, 2, seed=0), tmp_path / "s.udki")
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(FormatError):
            load_index(path)

    def test_bad_magic(self, small_store, tmp_path):
        """Datastore files are not index files."""
        path = save_index(build_ivf(small_store, 4, 2, seed=0), tmp_path / "s.udki")
        path.write_bytes(b"UDKD" + path.read_bytes()[4:])
        with pytest.raises(FormatError, match="bad magic"):
            load_index(path)


class TestRetriever:
    """Datastore plus optional index."""

    def test_exact_without_index(self, small_store, queries):
        """No index means brute-force search."""
        assert Retriever(small_store).search(queries[0], 5, 1) == brute_force_search(
            small_store, queries[0], 5
        )

    def test_index_mismatch(self, small_store, store_factory):
        """An index built for another store is rejected."""
        other = store_factory(50, 8, seed=5)
        with pytest.raises(ConfigError):
            Retriever(small_store, build_ivf(other, 4, 2, seed=0))

    def test_check_dim(self, small_store):
        """Model and datastore widths must agree."""
        retriever = Retriever(small_store)
        retriever.check_dim(8)
        with pytest.raises(ConfigError):
            retriever.check_dim(16)
