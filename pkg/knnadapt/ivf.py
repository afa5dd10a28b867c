"""
Inverted-file (IVF) index over datastore keys, exact squared-L2 search inside
the probed lists.

File layout ("UDKI", little-endian): magic, version u32, nlist u32, dim u32,
centroids nlist x dim f32, then per list: length u64 followed by entry ids u64.
"""

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .checkpoint import ByteReader
from .datastore import Datastore
from .errors import ConfigError, ContractError, DimensionError, FormatError
from .log import get_logger

logger = get_logger()

MAGIC = b"UDKI"
VERSION = 1
HEADER = struct.Struct("<4sIII")


class Neighbor(NamedTuple):
    entry_id: int
    distance: float  # squared L2
    value: int


@dataclass(frozen=True, eq=False)
class IvfIndex:
    centroids: np.ndarray  # (nlist, dim) float32
    lists: list[np.ndarray]  # per centroid, ascending entry ids (int64)

    @property
    def nlist(self) -> int:
        return int(self.centroids.shape[0])

    @property
    def dim(self) -> int:
        return int(self.centroids.shape[1])

    @property
    def size(self) -> int:
        return sum(len(ids) for ids in self.lists)

    def equals(self, other: "IvfIndex") -> bool:
        return (
            np.array_equal(self.centroids, other.centroids)
            and len(self.lists) == len(other.lists)
            and all(np.array_equal(a, b) for a, b in zip(self.lists, other.lists, strict=True))
        )


def _sq_distances(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """(n, c) squared L2 in float64, one column per center."""
    out = np.empty((points.shape[0], centers.shape[0]), dtype=np.float64)
    for j, c in enumerate(centers):
        diff = points - c
        out[:, j] = np.einsum("ij,ij->i", diff, diff)
    return out


def _kmeans_pp(points: np.ndarray, nlist: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    chosen = [int(rng.integers(n))]
    nearest = _sq_distances(points, points[chosen])[:, 0]
    while len(chosen) < nlist:
        total = nearest.sum()
        if total > 0:
            idx = int(rng.choice(n, p=nearest / total))
        else:
            # Duplicate keys: fall back to a uniform draw among unchosen entries.
            remaining = np.setdiff1d(np.arange(n), chosen)
            idx = int(rng.choice(remaining))
        chosen.append(idx)
        nearest = np.minimum(nearest, _sq_distances(points, points[idx : idx + 1])[:, 0])
    return points[chosen].copy()


def build_ivf(ds: Datastore, nlist: int, kmeans_iters: int, seed: int) -> IvfIndex:
    """k-means++ seeding, ``kmeans_iters`` Lloyd rounds, then nearest-centroid lists."""
    if nlist < 1:
        raise ConfigError(f"nlist must be >= 1, got {nlist}")
    if nlist > len(ds):
        raise ConfigError(f"nlist ({nlist}) exceeds datastore size ({len(ds)})")

    points = ds.keys.astype(np.float64)
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp(points, nlist, rng)

    for _ in range(kmeans_iters):
        dist = _sq_distances(points, centers)
        assign = dist.argmin(axis=1)
        counts = np.bincount(assign, minlength=nlist)
        for j in range(nlist):
            if counts[j] > 0:
                centers[j] = points[assign == j].mean(axis=0)
        for j in np.flatnonzero(counts == 0):
            largest = int(counts.argmax())
            members = np.flatnonzero(assign == largest)
            far = int(members[dist[members, largest].argmax()])
            centers[j] = points[far]
            assign[far] = j
            counts[largest] -= 1
            counts[j] = 1

    centroids = centers.astype(np.float32)
    assign = _sq_distances(points, centroids.astype(np.float64)).argmin(axis=1)
    lists = [np.flatnonzero(assign == j).astype(np.int64) for j in range(nlist)]
    logger.info(
        "Built IVF index",
        extra={"nlist": nlist, "entries": len(ds), "empty_lists": sum(len(x) == 0 for x in lists)},
    )
    return IvfIndex(centroids, lists)


def _check_query(query, dim: int) -> np.ndarray:
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    if q.shape[0] != dim:
        raise DimensionError(f"query has dimension {q.shape[0]}, datastore has {dim}")
    return q


def _top_k(ds: Datastore, candidates: np.ndarray, q: np.ndarray, k: int) -> list[Neighbor]:
    diff = ds.keys[candidates].astype(np.float64) - q
    dist = np.einsum("ij,ij->i", diff, diff)
    order = np.lexsort((candidates, dist))[:k]
    return [
        Neighbor(int(candidates[i]), float(dist[i]), int(ds.values[candidates[i]]))
        for i in order
    ]


def knn_search(
    index: IvfIndex, ds: Datastore, query, k: int, nprobe: int
) -> list[Neighbor]:
    """Top-k by squared L2 among the lists of the ``nprobe`` nearest centroids.

    Ties break by ascending entry id; ``nprobe`` above ``nlist`` probes every list.
    """
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    if nprobe < 1:
        raise ContractError(f"nprobe must be >= 1, got {nprobe}")
    if len(ds) == 0:
        return []
    q = _check_query(query, ds.dim)

    diff = index.centroids.astype(np.float64) - q
    probe = np.argsort(np.einsum("ij,ij->i", diff, diff), kind="stable")[:nprobe]
    candidates = np.concatenate([index.lists[j] for j in probe])
    if candidates.size == 0:
        return []
    return _top_k(ds, candidates, q, k)


def brute_force_search(ds: Datastore, query, k: int) -> list[Neighbor]:
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    if len(ds) == 0:
        return []
    q = _check_query(query, ds.dim)
    return _top_k(ds, np.arange(len(ds), dtype=np.int64), q, k)


def search_batch(
    index: IvfIndex, ds: Datastore, queries, k: int, nprobe: int
) -> list[list[Neighbor]]:
    return [knn_search(index, ds, q, k, nprobe) for q in np.asarray(queries)]


def recall_at_k(index: IvfIndex, ds: Datastore, queries, k: int, nprobe: int) -> float:
    """Mean fraction of the exact top-k ids that the IVF search also returns."""
    queries = np.asarray(queries)
    if len(queries) == 0:
        raise ContractError("recall needs at least one query")
    hits = 0
    total = 0
    for q, approx in zip(queries, search_batch(index, ds, queries, k, nprobe), strict=True):
        exact = {n.entry_id for n in brute_force_search(ds, q, k)}
        found = {n.entry_id for n in approx}
        hits += len(exact & found)
        total += len(exact)
    return hits / total if total else 1.0


def save_index(index: IvfIndex, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(HEADER.pack(MAGIC, VERSION, index.nlist, index.dim))
        f.write(np.ascontiguousarray(index.centroids, dtype="<f4").tobytes())
        for ids in index.lists:
            f.write(struct.pack("<Q", len(ids)))
            f.write(np.asarray(ids, dtype="<u8").tobytes())
    return path


def load_index(path: str | Path) -> IvfIndex:
    path = Path(path)
    reader = ByteReader(path, path.read_bytes())
    magic, version, nlist, dim = HEADER.unpack(reader.take(HEADER.size))
    if magic != MAGIC:
        raise FormatError(path, 0, f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(path, 4, f"unsupported version {version}")

    centroids = np.frombuffer(reader.take(4 * nlist * dim), dtype="<f4")
    lists = []
    for _ in range(nlist):
        (length,) = reader.unpack("<Q")
        lists.append(np.frombuffer(reader.take(8 * length), dtype="<u8").astype(np.int64))
    if reader.offset != len(reader.data):
        raise FormatError(path, reader.offset, "trailing bytes after last list")
    return IvfIndex(centroids.reshape(nlist, dim).astype(np.float32), lists)


class Retriever:
    """A datastore with its (optional) IVF index.

    Without an index every query is answered by exact search.
    """

    def __init__(self, ds: Datastore, index: IvfIndex | None = None):
        if index is not None:
            if index.dim != ds.dim:
                raise ConfigError(f"index dimension {index.dim} != datastore dimension {ds.dim}")
            if index.size != len(ds):
                raise ConfigError(f"index covers {index.size} entries, datastore has {len(ds)}")
        self.ds = ds
        self.index = index

    @property
    def dim(self) -> int:
        return self.ds.dim

    def __len__(self) -> int:
        return len(self.ds)

    def check_dim(self, d_model: int) -> None:
        if d_model != self.ds.dim:
            raise ConfigError(
                f"model dimension {d_model} does not match datastore dimension {self.ds.dim}"
            )

    def search(self, query, k: int, nprobe: int) -> list[Neighbor]:
        if self.index is None:
            return brute_force_search(self.ds, query, k)
        return knn_search(self.index, self.ds, query, k, nprobe)
