"""Point-set operations: canonical framing, farthest point sampling, exact
nearest neighbors."""

from __future__ import annotations

import numpy as np

from .types import NeighborIndex, PointCloud, as_points

# Above this many query*source pairs the distance matrix switches to the
# |a|^2+|b|^2-2ab GEMM form (same ordering, less memory traffic).
_GEMM_PAIRS = 4_000_000


def normalize_unit_cube(pc):
    """Center the centroid at the origin and scale isotropically so the
    cloud fits [-0.5, 0.5]^3 (touching on its widest side).

    An all-identical cloud collapses to the origin.  Returns the same
    container kind it was given.
    """
    pts = as_points(pc)
    centered = pts - pts.mean(axis=0)
    half = np.abs(centered).max()
    out = np.zeros_like(centered) if half == 0.0 else centered * (0.5 / half)
    if isinstance(pc, PointCloud):
        return PointCloud(out, label=pc.label)
    return out


def pairwise_sq_dists(a, b) -> np.ndarray:
    """Squared Euclidean distance matrix (|a| x |b|)."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape[0] * b.shape[0] > _GEMM_PAIRS:
        d2 = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * (a @ b.T)
        return np.maximum(d2, 0.0)
    diff = a[:, None, :] - b[None, :, :]
    return (diff * diff).sum(-1)


def fps(pc, k: int, start: int = 0) -> np.ndarray:
    """Greedy farthest point sampling.  Returns k indices; selection ties
    go to the lowest index (argmax-first semantics on squared distances)."""
    pts = as_points(pc)
    n = len(pts)
    if not 1 <= k <= n:
        raise ValueError(f"k={k} outside [1, {n}]")
    if not 0 <= start < n:
        raise ValueError(f"start index {start} out of range")
    sel = np.empty(k, dtype=np.int64)
    sel[0] = start
    diff = pts - pts[start]
    best = (diff * diff).sum(1)
    for i in range(1, k):
        nxt = int(np.argmax(best))
        sel[i] = nxt
        diff = pts - pts[nxt]
        np.minimum(best, (diff * diff).sum(1), out=best)
    return sel


def knn(query, source, k: int) -> NeighborIndex:
    """Exact k nearest neighbors by Euclidean distance, ties by index.

    A point queried against a cloud containing it returns itself first.
    """
    q = as_points(query)
    s = as_points(source)
    if not 1 <= k <= len(s):
        raise ValueError(f"k={k} outside [1, {len(s)}]")
    d2 = pairwise_sq_dists(q, s)
    order = np.argsort(d2, axis=1, kind="stable")[:, :k]
    dists = np.sqrt(np.take_along_axis(d2, order, axis=1))
    return NeighborIndex(order, dists)
