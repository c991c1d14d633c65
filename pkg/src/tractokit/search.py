"""Exact streamline and point retrieval.

``StreamlineIndex`` holds resampled streamlines, their barycenters and a uniform
hash grid over the barycenters. Every search here is exact: pruning relies on
the bound ``MDF(q, c) >= |bary(q) - bary(c)|``, which holds for both the direct
and the flipped alignment because the mean of norms dominates the norm of the
mean. Ties are broken by lowest id throughout.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from tractokit.errors import InvalidInputError
from tractokit.streamline import as_point_cloud, mdf_to_many

INDEX_POINTS = 40


def _slack(x):
    # rounding allowance so the barycenter bound never prunes a true hit
    return x * (1.0 + 1e-12) + 1e-12


@dataclass(frozen=True)
class NeighborSet:
    ids: np.ndarray
    distances: np.ndarray
    fallback: bool = False

    def __len__(self):
        return len(self.ids)

    @classmethod
    def empty(cls, fallback=False):
        return cls(np.empty(0, dtype=np.int64), np.empty(0), fallback)


def _ordered(ids: np.ndarray, dist: np.ndarray, k=None) -> tuple[np.ndarray, np.ndarray]:
    order = np.lexsort((ids, dist))
    if k is not None:
        order = order[:k]
    return ids[order], dist[order]


@dataclass
class StreamlineIndex:
    streamlines: np.ndarray  # (N, 40, 3)
    barycenters: np.ndarray  # (N, 3)
    ids: np.ndarray  # (N,) dataset indices
    cell_size: float
    grid: dict = field(repr=False)

    def __len__(self):
        return self.streamlines.shape[0]

    def position(self, dataset_id: int) -> int:
        hits = np.flatnonzero(self.ids == dataset_id)
        if hits.size == 0:
            raise InvalidInputError(f"id {dataset_id} is not in the index")
        return int(hits[0])

    def streamline(self, dataset_id: int) -> np.ndarray:
        return self.streamlines[self.position(dataset_id)]

    def _cell(self, point) -> tuple:
        return tuple(int(v) for v in np.floor(np.asarray(point) / self.cell_size))


def build_index(streamlines, cell_size: float = 6.0, ids=None) -> StreamlineIndex:
    """Index resampled 40-point streamlines. ``ids`` defaults to ``0..N-1``."""
    if cell_size <= 0:
        raise InvalidInputError(f"cell_size must be positive, got {cell_size}")
    if len(streamlines) == 0:
        data = np.empty((0, INDEX_POINTS, 3))
    else:
        shapes = {np.shape(s) for s in streamlines}
        if shapes != {(INDEX_POINTS, 3)}:
            raise InvalidInputError(f"all indexed streamlines must be ({INDEX_POINTS}, 3), got {sorted(shapes)}")
        data = np.ascontiguousarray(np.asarray(streamlines, dtype=np.float64))
        if not np.all(np.isfinite(data)):
            raise InvalidInputError("indexed streamlines contain non-finite coordinates")
    ids = np.arange(len(data), dtype=np.int64) if ids is None else np.asarray(ids, dtype=np.int64)
    if ids.shape != (len(data),) or len(np.unique(ids)) != len(ids):
        raise InvalidInputError("ids must be distinct and match the number of streamlines")
    bary = data.mean(axis=1)
    keys = np.floor(bary / cell_size).astype(np.int64)
    grid: dict = {}
    for pos, key in enumerate(map(tuple, keys)):
        grid.setdefault(key, []).append(pos)
    grid = {k: np.asarray(v, dtype=np.int64) for k, v in grid.items()}
    data.setflags(write=False)
    return StreamlineIndex(data, bary, ids, float(cell_size), grid)


def _check_query(query) -> np.ndarray:
    q = np.asarray(query, dtype=np.float64)
    if q.shape != (INDEX_POINTS, 3):
        raise InvalidInputError(f"query must be ({INDEX_POINTS}, 3), got {q.shape}")
    return q


def brute_force_knn(index: StreamlineIndex, query, k: int, exclude_id=None) -> NeighborSet:
    """Reference scan over every entry."""
    q = _check_query(query)
    if k < 1:
        raise InvalidInputError(f"k must be >= 1, got {k}")
    dist = mdf_to_many(q, index.streamlines)
    keep = index.ids != exclude_id if exclude_id is not None else np.ones(len(index), bool)
    ids, d = _ordered(index.ids[keep], dist[keep], k)
    return NeighborSet(ids, d)


def knn_mdf(index: StreamlineIndex, query, k: int, exclude_id=None, chunk: int = 64) -> NeighborSet:
    """The ``k`` entries closest to ``query`` in MDF.

    Entries are visited in order of barycenter distance (a lower bound on MDF)
    and the scan stops once the bound exceeds the current k-th best distance.
    """
    q = _check_query(query)
    if k < 1:
        raise InvalidInputError(f"k must be >= 1, got {k}")
    n = len(index)
    if n == 0:
        return NeighborSet.empty()
    bound = np.linalg.norm(index.barycenters - q.mean(axis=0), axis=1)
    if exclude_id is not None:
        bound = np.where(index.ids == exclude_id, np.inf, bound)
    order = np.argsort(bound, kind="stable")
    n_valid = int(np.isfinite(bound).sum())
    best_pos = np.empty(0, dtype=np.int64)
    best_d = np.empty(0)
    start = 0
    while start < n_valid:
        pos = order[start:min(start + chunk, n_valid)]
        start += len(pos)
        cand_pos = np.concatenate([best_pos, pos])
        cand_d = np.concatenate([best_d, mdf_to_many(q, index.streamlines[pos])])
        sel = np.lexsort((index.ids[cand_pos], cand_d))[:k]
        best_pos, best_d = cand_pos[sel], cand_d[sel]
        # an unvisited entry can still tie or beat the k-th best only if its bound allows it
        if len(best_d) == k and start < n_valid and bound[order[start]] > _slack(best_d[-1]):
            break
    return NeighborSet(index.ids[best_pos], best_d)


def radius_search(index: StreamlineIndex, query, radius: float, exclude_id=None) -> NeighborSet:
    """All entries with MDF <= radius, using the barycenter grid to skip far cells."""
    q = _check_query(query)
    if radius <= 0:
        raise InvalidInputError(f"radius must be positive, got {radius}")
    if len(index) == 0:
        return NeighborSet.empty()
    qb = q.mean(axis=0)
    lo = index._cell(qb - _slack(radius))
    hi = index._cell(qb + _slack(radius))
    cs = index.cell_size
    found = []
    for key in itertools.product(*(range(a, b + 1) for a, b in zip(lo, hi))):
        members = index.grid.get(key)
        if members is None:
            continue
        # distance from query barycenter to the cell's box
        box_lo = np.asarray(key) * cs
        gap = np.maximum(0.0, np.maximum(box_lo - qb, qb - (box_lo + cs)))
        if math.sqrt(float(gap @ gap)) > _slack(radius):
            continue
        found.append(members)
    if not found:
        return NeighborSet.empty()
    pos = np.concatenate(found)
    pos = pos[np.linalg.norm(index.barycenters[pos] - qb, axis=1) <= _slack(radius)]
    if exclude_id is not None:
        pos = pos[index.ids[pos] != exclude_id]
    d = mdf_to_many(q, index.streamlines[pos])
    hit = d <= radius
    ids, d = _ordered(index.ids[pos[hit]], d[hit])
    return NeighborSet(ids, d)


def radius_search_fss(index: StreamlineIndex, candidates: NeighborSet, query, radius: float = 6.0,
                      k_hyper: int = 5) -> NeighborSet:
    """Closest ``k_hyper`` candidates within ``radius`` (MDF), restricted to ``candidates``.

    When fewer than ``k_hyper`` candidates qualify, the result is topped up with
    the nearest remaining candidates regardless of radius and ``fallback`` is set.
    """
    q = _check_query(query)
    if radius <= 0:
        raise InvalidInputError(f"radius must be positive, got {radius}")
    if k_hyper < 1:
        raise InvalidInputError(f"k_hyper must be >= 1, got {k_hyper}")
    if len(candidates) == 0:
        return NeighborSet.empty(fallback=True)
    cand_ids = np.asarray(candidates.ids, dtype=np.int64)
    pos = np.array([index.position(i) for i in cand_ids], dtype=np.int64)
    near = np.linalg.norm(index.barycenters[pos] - q.mean(axis=0), axis=1) <= _slack(radius)
    d = np.full(len(pos), np.inf)
    d[near] = mdf_to_many(q, index.streamlines[pos[near]])
    inside = d <= radius
    ids, dist = _ordered(cand_ids[inside], d[inside], k_hyper)
    if len(ids) == k_hyper:
        return NeighborSet(ids, dist)
    rest = ~inside
    d_rest = mdf_to_many(q, index.streamlines[pos[rest]])
    extra_ids, extra_d = _ordered(cand_ids[rest], d_rest, k_hyper - len(ids))
    return NeighborSet(np.concatenate([ids, extra_ids]), np.concatenate([dist, extra_d]), fallback=True)


def farthest_point_sampling(points, p_f: int, seed=None) -> np.ndarray:
    """Greedy FPS. The first index comes from the seeded RNG; ties go to the lowest index."""
    pts = as_point_cloud(points)
    n = pts.shape[0]
    if p_f < 1 or p_f > n:
        raise InvalidInputError(f"p_f must be in [1, {n}], got {p_f}")
    rng = np.random.default_rng(seed)
    chosen = np.empty(p_f, dtype=np.int64)
    chosen[0] = rng.integers(n)
    min_d = np.linalg.norm(pts - pts[chosen[0]], axis=1)
    min_d[chosen[0]] = -np.inf
    for i in range(1, p_f):
        nxt = int(np.argmax(min_d))
        chosen[i] = nxt
        min_d = np.minimum(min_d, np.linalg.norm(pts - pts[nxt], axis=1))
        min_d[nxt] = -np.inf
    return chosen


def knn_points(points, center, k: int) -> np.ndarray:
    """Indices of the ``k`` points nearest ``center`` (Euclidean), ties to the lowest index."""
    pts = as_point_cloud(points)
    if k < 1 or k > pts.shape[0]:
        raise InvalidInputError(f"k must be in [1, {pts.shape[0]}], got {k}")
    d = np.linalg.norm(pts - np.asarray(center, dtype=np.float64), axis=1)
    return np.argsort(d, kind="stable")[:k]
