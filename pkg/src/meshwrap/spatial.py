"""Exact nearest-neighbor queries, the mutual-k-NN good-fit test, and the
cylinder ray query used by the beam penalty.

A kd-tree accelerates everything, but results are contractually identical to
a brute-force linear scan: equal distances are broken toward the lowest point
index.  The rare ambiguous queries (exact distance ties at a result boundary)
are re-resolved with an explicit candidate scan.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

_TIE_REL = 1e-12


class PointIndex:
    """Immutable spatial index over a fixed 3D point set."""

    def __init__(self, points):
        points = np.ascontiguousarray(points, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] != 3 or len(points) == 0:
            raise ValueError(f"need a non-empty (N,3) point array, got {points.shape}")
        self.points = points
        self.tree = cKDTree(points)

    def __len__(self):
        return len(self.points)


def _exact_dists(points, query):
    d = points - query
    return np.sqrt((d * d).sum(axis=1))


def _resolve_tie(index, query, radius):
    cand = index.tree.query_ball_point(query, radius * (1.0 + 1e-9))
    cand = np.sort(np.asarray(cand, dtype=np.int64))
    d = _exact_dists(index.points[cand], query)
    order = np.lexsort((cand, d))
    return cand[order], d[order]


def nearest_batch(index, queries):
    """Nearest stored point for each query row: (indices, distances)."""
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    k = min(2, len(index))
    d, i = index.tree.query(queries, k=k)
    if k == 1:
        return i.reshape(-1), d.reshape(-1)
    ambiguous = d[:, 1] - d[:, 0] <= d[:, 0] * _TIE_REL
    idx, dist = i[:, 0].astype(np.int64), d[:, 0]
    for row in np.nonzero(ambiguous)[0]:
        cand, cd = _resolve_tie(index, queries[row], d[row, 0])
        idx[row], dist[row] = cand[0], cd[0]
    return idx, dist


def nearest(index, query):
    idx, dist = nearest_batch(index, np.asarray(query, dtype=np.float64)[None, :])
    return int(idx[0]), float(dist[0])


def knn_batch(index, queries, k):
    """k nearest stored points per query, ascending by (distance, index)."""
    n = len(index)
    if k > n:
        raise ValueError(f"k={k} exceeds point count {n}")
    if k < 1:
        raise ValueError("k must be >= 1")
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    kk = min(k + 1, n)
    d, i = index.tree.query(queries, k=kk)
    d, i = np.atleast_2d(d), np.atleast_2d(i)
    dk, ik = d[:, :k].copy(), i[:, :k].astype(np.int64)
    # order within the k results by (distance, index)
    order = np.lexsort((ik, dk), axis=1)
    dk = np.take_along_axis(dk, order, axis=1)
    ik = np.take_along_axis(ik, order, axis=1)
    if kk > k:
        boundary = d[:, k] - d[:, k - 1] <= d[:, k - 1] * _TIE_REL
        for row in np.nonzero(boundary)[0]:
            cand, cd = _resolve_tie(index, queries[row], d[row, k - 1])
            ik[row], dk[row] = cand[:k], cd[:k]
    return ik, dk


def knn(index, query, k):
    ik, dk = knn_batch(index, np.asarray(query, dtype=np.float64)[None, :], k)
    return ik[0], dk[0]


def mutual_knn_mask(samples, target_index, k):
    """Good-fit mask: sample i is good iff some target among its k nearest
    targets counts i among that target's k nearest samples.

    k is clamped to both set sizes so the test stays defined for tiny batches.
    """
    samples = np.ascontiguousarray(samples, dtype=np.float64)
    if len(samples) == 0:
        return np.zeros(0, dtype=bool)
    k = min(k, len(target_index), len(samples))
    t_of_s, _ = knn_batch(target_index, samples, k)          # (S, k)
    sample_index = PointIndex(samples)
    s_of_t, _ = knn_batch(sample_index, target_index.points, k)  # (N, k)
    back = s_of_t[t_of_s]                                    # (S, k, k)
    return (back == np.arange(len(samples))[:, None, None]).any(axis=(1, 2))


def beam_intersect_batch(index, origins, directions, epsilon):
    """First cloud point inside the epsilon-cylinder along each ray.

    A point qualifies when its projection onto the ray is positive and its
    perpendicular distance is at most epsilon; among qualifiers the one with
    the smallest projection wins (ties to the lowest index).  Returns
    (hit_mask (S,), hit_points (S,3), hit_indices (S,)); misses hold zeros/-1.
    """
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    directions = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    pts = index.points
    n = len(pts)
    s = len(origins)
    eps2 = float(epsilon) ** 2
    pt_sq = (pts * pts).sum(axis=1)

    hit_idx = np.full(s, -1, dtype=np.int64)
    hit_t = np.full(s, np.inf)
    chunk = max(1, int(4_000_000 // max(n, 1)))
    for s0 in range(0, s, chunk):
        s1 = min(s0 + chunk, s)
        o = origins[s0:s1]
        d = directions[s0:s1]
        t = d @ pts.T - (d * o).sum(axis=1)[:, None]               # (c, n)
        dist2 = pt_sq[None, :] - 2.0 * (o @ pts.T) + (o * o).sum(axis=1)[:, None]
        perp2 = np.maximum(dist2 - t * t, 0.0)
        valid = (t > 0.0) & (perp2 <= eps2)
        t = np.where(valid, t, np.inf)
        j = np.argmin(t, axis=1)  # first (lowest-index) minimum on ties
        tmin = t[np.arange(s1 - s0), j]
        found = np.isfinite(tmin)
        hit_idx[s0:s1] = np.where(found, j, -1)
        hit_t[s0:s1] = tmin

    mask = hit_idx >= 0
    points = np.zeros((s, 3))
    points[mask] = pts[hit_idx[mask]]
    return mask, points, hit_idx


def beam_intersect(index, origin, direction, epsilon):
    """Single-ray cylinder query; returns the hit point or None."""
    mask, points, _ = beam_intersect_batch(
        index,
        np.asarray(origin, dtype=np.float64)[None, :],
        np.asarray(direction, dtype=np.float64)[None, :],
        epsilon,
    )
    return points[0] if mask[0] else None
