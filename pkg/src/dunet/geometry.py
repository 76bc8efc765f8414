"""Deterministic spatial queries on point sets.

All searches are exact brute force over squared Euclidean distances computed
component by component, so results do not depend on BLAS reduction order.
Ties in distance are broken by the lower source index.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError

_CHUNK = 256


@dataclass
class PointCloud:
    positions: np.ndarray
    features: np.ndarray | None = None
    labels: np.ndarray | None = None
    name: str = ""
    boundary: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.positions)):
            raise ContractError(f"cloud {self.name!r} has non-finite positions")
        n = len(self.positions)
        if self.features is not None:
            self.features = np.asarray(self.features, dtype=np.float64)
            if self.features.ndim == 1:
                self.features = self.features[:, None]
            if len(self.features) != n:
                raise ContractError(f"cloud {self.name!r}: {len(self.features)} feature rows for {n} points")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (n,):
                raise ContractError(f"cloud {self.name!r}: labels shape {self.labels.shape} for {n} points")
        if self.boundary is not None:
            self.boundary = np.asarray(self.boundary, dtype=bool)

    def __len__(self):
        return len(self.positions)


@dataclass
class NeighborIndex:
    """Compressed adjacency: ``indices[offsets[s]:offsets[s+1]]`` are the neighbors of ``centers[s]``."""

    offsets: np.ndarray
    indices: np.ndarray
    centers: np.ndarray

    def __post_init__(self):
        self.offsets = np.asarray(self.offsets, dtype=np.int64)
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.centers = np.asarray(self.centers, dtype=np.int64)
        if self.offsets[0] != 0 or self.offsets[-1] != len(self.indices):
            raise ContractError("neighbor offsets must span the index list")
        if np.any(np.diff(self.offsets) <= 0):
            raise ContractError("every center needs at least one neighbor")
        if len(self.offsets) != len(self.centers) + 1:
            raise ContractError("one offset range per center expected")

    @classmethod
    def from_fixed(cls, idx, centers=None):
        idx = np.asarray(idx, dtype=np.int64)
        s, k = idx.shape
        centers = np.arange(s) if centers is None else centers
        return cls(np.arange(s + 1) * k, idx.reshape(-1), centers)

    @property
    def counts(self):
        return np.diff(self.offsets)

    def __len__(self):
        return len(self.centers)

    def neighbors(self, s):
        return self.indices[self.offsets[s]:self.offsets[s + 1]]

    def center_rows(self):
        """Center id repeated once per neighbor entry."""
        return np.repeat(self.centers, self.counts)

    def shifted(self, index_shift, center_shift):
        return NeighborIndex(self.offsets, self.indices + index_shift, self.centers + center_shift)


def concat_neighbors(parts):
    """Stack per-cloud neighbor indices that were already shifted to global ids."""
    offsets = [np.zeros(1, dtype=np.int64)]
    total = 0
    for p in parts:
        offsets.append(p.offsets[1:] + total)
        total += len(p.indices)
    return NeighborIndex(
        np.concatenate(offsets),
        np.concatenate([p.indices for p in parts]),
        np.concatenate([p.centers for p in parts]),
    )


def _positions(x):
    return x.positions if isinstance(x, PointCloud) else np.asarray(x, dtype=np.float64).reshape(-1, 3)


def squared_distances(query, source):
    diff = query[:, None, :] - source[None, :, :]
    return (diff * diff).sum(axis=-1)


def farthest_point_sample(cloud, k):
    """Greedy max-min subset of ``k`` point ids, in selection order.

    The first pick is the point farthest from the centroid.
    """
    pos = _positions(cloud)
    n = len(pos)
    if not 1 <= k <= n:
        raise ValueError(f"farthest_point_sample: k={k} outside [1, {n}]")
    centroid = pos.mean(axis=0)
    d = pos - centroid
    current = int(np.argmax((d * d).sum(axis=1)))
    selected = np.empty(k, dtype=np.int64)
    min_d = np.full(n, np.inf)
    for i in range(k):
        selected[i] = current
        diff = pos - pos[current]
        min_d = np.minimum(min_d, (diff * diff).sum(axis=1))
        min_d[selected[: i + 1]] = -np.inf
        current = int(np.argmax(min_d))
    return selected


def _sorted_neighbors(query, source, k):
    """Per-query source ids of the ``k`` nearest points and their squared distances."""
    idx = np.empty((len(query), k), dtype=np.int64)
    d2 = np.empty((len(query), k))
    n = len(source)
    for start in range(0, len(query), _CHUNK):
        block = squared_distances(query[start:start + _CHUNK], source)
        if k < n:
            kth = np.partition(block, k - 1, axis=1)[:, k - 1:k]
            cand = block <= kth
            exact = cand.sum(axis=1) == k
            order = np.empty((len(block), k), dtype=np.int64)
            # np.nonzero lists candidates in index order, so a stable sort keeps the tie rule
            cols = np.nonzero(cand[exact])[1].reshape(-1, k)
            sub = np.take_along_axis(block[exact], cols, axis=1)
            order[exact] = np.take_along_axis(cols, np.argsort(sub, axis=1, kind="stable"), axis=1)
            if not exact.all():
                order[~exact] = np.argsort(block[~exact], axis=1, kind="stable")[:, :k]
        else:
            order = np.argsort(block, axis=1, kind="stable")
        idx[start:start + _CHUNK] = order
        d2[start:start + _CHUNK] = np.take_along_axis(block, order, axis=1)
    return idx, d2


def knn(query, source, k):
    """The ``k`` nearest source points of every query, nearest first."""
    query, source = _positions(query), _positions(source)
    if not 1 <= k <= len(source):
        raise ValueError(f"knn: k={k} outside [1, {len(source)}]")
    idx, _ = _sorted_neighbors(query, source, k)
    return NeighborIndex.from_fixed(idx)


def self_excluded_knn(positions, k):
    """kNN within one point set, dropping each point from its own neighborhood.

    ``k`` is clamped to ``n - 1``. A lone point keeps itself as its only
    neighbor so the neighborhood stays nonempty.
    """
    pos = _positions(positions)
    n = len(pos)
    if n == 1:
        return NeighborIndex.from_fixed(np.zeros((1, 1), dtype=np.int64))
    k = min(k, n - 1)
    idx, _ = _sorted_neighbors(pos, pos, k + 1)
    rows = np.arange(n)[:, None]
    is_self = idx == rows
    # exact duplicates can push self out of the first k+1 slots; drop the last then
    drop = np.where(is_self.any(axis=1), np.argmax(is_self, axis=1), k)
    keep = np.ones_like(idx, dtype=bool)
    keep[np.arange(n), drop] = False
    return NeighborIndex.from_fixed(idx[keep].reshape(n, k))


def radius_neighbors(query, source, r, cap=32):
    """Source points within distance ``r`` (nearest ``cap`` kept).

    A query with nothing inside the ball still gets its single nearest point.
    """
    if r <= 0:
        raise ValueError(f"radius_neighbors: radius must be positive, got {r}")
    query, source = _positions(query), _positions(source)
    k = min(cap, len(source))
    idx, d2 = _sorted_neighbors(query, source, k)
    inside = d2 <= r * r
    inside[:, 0] = True
    counts = inside.sum(axis=1)
    offsets = np.concatenate([[0], np.cumsum(counts)])
    return NeighborIndex(offsets, idx[inside], np.arange(len(query)))


def interpolation_weights(query, source, k=3, eps=1e-10):
    """Inverse-square-distance weights over the ``k`` nearest source points."""
    query, source = _positions(query), _positions(source)
    if len(source) < k:
        raise ValueError(f"interpolation needs >= {k} source points, got {len(source)}")
    idx, d2 = _sorted_neighbors(query, source, k)
    inv = 1.0 / (d2 + eps)
    weights = inv / inv.sum(axis=1, keepdims=True)
    return NeighborIndex.from_fixed(idx), weights.reshape(-1)


def adaptive_radius_neighbors(query, source, k=16, cap=32):
    """Radius search whose radius is the median distance from a query to its k-th nearest source.

    Returns the neighborhoods and the radius used. The radius depends only
    on the two point sets, not on their order.
    """
    query, source = _positions(query), _positions(source)
    width = min(max(cap, k), len(source))
    idx, d2 = _sorted_neighbors(query, source, width)
    kth = min(k, width) - 1
    r = float(np.sqrt(np.median(d2[:, kth])))
    if r <= 0:
        r = float(np.sqrt(d2.max())) or 1.0
    inside = d2[:, :min(cap, width)] <= r * r
    inside[:, 0] = True
    counts = inside.sum(axis=1)
    offsets = np.concatenate([[0], np.cumsum(counts)])
    return NeighborIndex(offsets, idx[:, :min(cap, width)][inside], np.arange(len(query))), r
