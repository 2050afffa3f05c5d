"""Item-vector cache with exact and inverted-file (IVF) top-K search.

Scores are dot products. Both variants compute candidate scores with the same
row-wise routine, so an IVF index probing every list reproduces exact search
bit for bit. Ties are broken by the smaller item id.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from crmlab.errors import ConfigError
from crmlab.numerics.checkpoint import dumps, loads

INDEX_MAGIC = b"CRMIDX01"
_U64 = struct.Struct("<Q")


@dataclass(frozen=True)
class RetrievalResult:
    ids: np.ndarray  # ranked item ids
    scores: np.ndarray  # float64, non-increasing
    k: int

    def __len__(self):
        return len(self.ids)


@dataclass(eq=False)
class ItemIndex:
    vectors: np.ndarray  # (n, d) float32, the cached V
    ids: np.ndarray  # (n,) int64
    variant: str = "exact"
    n_clusters: int = 0
    n_probe: int = 0
    centroids: np.ndarray | None = None
    postings: list[np.ndarray] = field(default_factory=list)  # row positions per cluster
    kmeans_trace: list[float] = field(default_factory=list)

    @property
    def n_items(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __post_init__(self):
        self.vectors.setflags(write=False)
        self.ids.setflags(write=False)


def row_scores(vectors: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Dot product of every row with ``query``, accumulated in float64.

    A per-row reduction whose result for a given row does not depend on
    which other rows are present.
    """
    return (vectors.astype(np.float64) * query.astype(np.float64)).sum(axis=1)


def top_k(scores: np.ndarray, ids: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Top ``k`` by score, ties broken by smaller id; returns (ids, scores)."""
    n = len(scores)
    k = min(k, n)
    if k < n:
        kth = np.partition(scores, n - k)[n - k]
        cand = np.flatnonzero(scores >= kth)
    else:
        cand = np.arange(n)
    order = np.lexsort((ids[cand], -scores[cand]))[:k]
    sel = cand[order]
    return ids[sel].copy(), scores[sel].copy()


def kmeans(x: np.ndarray, k: int, n_iter: int = 20, seed: int = 0):
    """Lloyd's k-means with k-means++ seeding.

    Returns ``(centroids, assignment, trace)`` where ``trace[i]`` is the sum of
    squared distances after the i-th assignment step. Empty clusters keep
    their previous centroid, which keeps the trace non-increasing.
    """
    x = x.astype(np.float64)
    n = len(x)
    if not 1 <= k <= n:
        raise ConfigError(f"n_clusters must be in [1, {n}], got {k}")
    rng = np.random.default_rng(seed)
    sq = (x * x).sum(axis=1)
    centroids = np.empty((k, x.shape[1]))
    first = rng.integers(n)
    centroids[0] = x[first]
    d2 = np.maximum(sq - 2 * x @ centroids[0] + sq[first], 0)
    for c in range(1, k):
        total = d2.sum()
        idx = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
        centroids[c] = x[idx]
        d2 = np.minimum(d2, np.maximum(sq - 2 * x @ centroids[c] + sq[idx], 0))

    trace = []
    assign = np.zeros(n, dtype=np.int64)
    for _ in range(n_iter):
        dist = sq[:, None] - 2 * x @ centroids.T + (centroids * centroids).sum(axis=1)[None, :]
        assign = np.argmin(dist, axis=1)
        trace.append(float(((x - centroids[assign]) ** 2).sum()))
        for c in range(k):
            members = assign == c
            if members.any():
                centroids[c] = x[members].mean(axis=0)
    # final assignment against the last centroids
    dist = sq[:, None] - 2 * x @ centroids.T + (centroids * centroids).sum(axis=1)[None, :]
    assign = np.argmin(dist, axis=1)
    trace.append(float(((x - centroids[assign]) ** 2).sum()))
    return centroids, assign, trace


def build_index(item_vectors, ids=None, variant: str = "exact", n_clusters: int = 64, n_probe: int = 8,
                seed: int = 0, n_iter: int = 20) -> ItemIndex:
    vectors = np.array(item_vectors, dtype=np.float32)
    if vectors.ndim != 2 or len(vectors) == 0:
        raise ValueError("cannot build an index over an empty item set")
    ids = np.arange(1, len(vectors) + 1, dtype=np.int64) if ids is None else np.array(ids, dtype=np.int64)
    if len(ids) != len(vectors) or len(np.unique(ids)) != len(ids):
        raise ValueError("ids must be distinct and match the number of vectors")
    if variant == "exact":
        return ItemIndex(vectors, ids)
    if variant != "ivf":
        raise ConfigError(f"unknown index variant {variant!r}")
    if not 1 <= n_probe:
        raise ConfigError("n_probe must be >= 1")
    centroids, assign, trace = kmeans(vectors, n_clusters, n_iter, seed)
    postings = [np.flatnonzero(assign == c) for c in range(n_clusters)]
    return ItemIndex(vectors, ids, "ivf", n_clusters, min(n_probe, n_clusters),
                     centroids.astype(np.float32), postings, trace)


def probe_lists(index: ItemIndex, query: np.ndarray) -> np.ndarray:
    """Clusters to scan: the ``n_probe`` centroids nearest the query (L2), ties by cluster number."""
    c = index.centroids.astype(np.float64)
    q = query.astype(np.float64)
    dist = ((c - q) ** 2).sum(axis=1)
    order = np.lexsort((np.arange(len(c)), dist))
    return order[: index.n_probe]


def search(index: ItemIndex, user_vector, k: int) -> RetrievalResult:
    if k < 1:
        raise ValueError("K must be >= 1")
    q = np.asarray(user_vector).reshape(-1)
    if q.shape[0] != index.dim:
        raise ValueError(f"query dim {q.shape[0]} != index dim {index.dim}")
    if index.variant == "exact":
        rows = None
        scores = row_scores(index.vectors, q)
        ids = index.ids
    else:
        rows = np.sort(np.concatenate([index.postings[c] for c in probe_lists(index, q)]))
        scores = row_scores(index.vectors[rows], q)
        ids = index.ids[rows]
    top_ids, top_scores = top_k(scores, ids, k)
    return RetrievalResult(top_ids, top_scores, k)


def search_batch(index: ItemIndex, user_vectors, k: int) -> list[RetrievalResult]:
    return [search(index, u, k) for u in np.asarray(user_vectors)]


def recall_at_k(approx: RetrievalResult, exact: RetrievalResult) -> float:
    if approx.k != exact.k:
        raise ValueError(f"K mismatch: {approx.k} vs {exact.k}")
    return len(set(approx.ids.tolist()) & set(exact.ids.tolist())) / approx.k


# --- persistence ----------------------------------------------------------------------
# File: INDEX_MAGIC | u64 checkpoint length | checkpoint bytes | u64 n_lists |
# per list: u64 count, then count u64 row positions.

def save_index(index: ItemIndex, path, meta: dict[str, str] | None = None):
    tensors = {"vectors": index.vectors, "ids": index.ids.astype(np.float32)}
    if index.ids.max() >= 2**24:
        raise ValueError("item ids >= 2**24 cannot be stored exactly")
    if index.centroids is not None:
        tensors["centroids"] = index.centroids
    info = {"variant": index.variant, "n_clusters": str(index.n_clusters), "n_probe": str(index.n_probe)}
    info.update(meta or {})
    blob = dumps(tensors, info)
    buf = io.BytesIO()
    buf.write(INDEX_MAGIC)
    buf.write(_U64.pack(len(blob)))
    buf.write(blob)
    buf.write(_U64.pack(len(index.postings)))
    for plist in index.postings:
        buf.write(_U64.pack(len(plist)))
        buf.write(np.asarray(plist, dtype="<u8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_index(path) -> tuple[ItemIndex, dict[str, str]]:
    data = Path(path).read_bytes()
    if data[:8] != INDEX_MAGIC:
        raise ValueError(f"{path}: not an index file")
    (n,) = _U64.unpack_from(data, 8)
    tensors, meta = loads(data[16:16 + n])
    pos = 16 + n
    (n_lists,) = _U64.unpack_from(data, pos)
    pos += 8
    postings = []
    for _ in range(n_lists):
        (cnt,) = _U64.unpack_from(data, pos)
        pos += 8
        postings.append(np.frombuffer(data, dtype="<u8", count=cnt, offset=pos).astype(np.int64))
        pos += 8 * cnt
    index = ItemIndex(
        tensors["vectors"],
        tensors["ids"].reshape(-1).astype(np.int64),
        meta["variant"],
        int(meta["n_clusters"]),
        int(meta["n_probe"]),
        tensors.get("centroids"),
        postings,
    )
    return index, meta
