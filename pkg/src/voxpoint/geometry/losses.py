"""Distance and uniformity losses over point sets.

Each loss has two routes sharing one neighbor search: a plain numpy
route returning floats (metrics, oracles) and a Tensor route that keeps
coordinates differentiable.  Nearest-neighbor *indices* are always
resolved in numpy — the assignment is piecewise constant, so gradients
flow only through the selected distances.  The Tensor route adds 1e-12
inside square roots to keep the gradient finite at coincident points;
the numpy route is exact.
"""

from __future__ import annotations

import warnings

import numpy as np

from ..autodiff import Tensor, index_select
from .pointcloud import knn, pairwise_sq_dists
from .types import as_points

_D_FLOOR = 1e-9


def _coords(x):
    """(array, tensor-or-None) view of a point argument."""
    if isinstance(x, Tensor):
        if x.ndim != 2 or x.shape[1] != 3 or x.shape[0] < 1:
            raise ValueError(f"expected non-empty (N, 3) tensor, got {x.shape}")
        return x.data, x
    return as_points(x), None


def _nearest(a, b):
    d2 = pairwise_sq_dists(a, b)
    return np.argmin(d2, axis=1)


def _side(a_arr, b_arr, a_t, b_t):
    # mean over a of the distance to its nearest point in b
    ia = _nearest(a_arr, b_arr)
    if a_t is None and b_t is None:
        return float(np.linalg.norm(a_arr - b_arr[ia], axis=1).mean())
    a = a_t if a_t is not None else Tensor(a_arr, dtype=a_arr.dtype)
    b = b_t if b_t is not None else Tensor(b_arr, dtype=b_arr.dtype)
    diff = a - index_select(b, ia)
    return ((diff * diff).sum(axis=1) + 1e-12).sqrt().mean()


def chamfer_l1(a, b):
    """Symmetric mean nearest-neighbor Euclidean distance.

    Returns a float for array inputs, a scalar Tensor when either side
    is a Tensor.
    """
    a_arr, a_t = _coords(a)
    b_arr, b_t = _coords(b)
    left = _side(a_arr, b_arr, a_t, b_t)
    right = _side(b_arr, a_arr, b_t, a_t)
    return left + right


def _knn_excluding_self(pts, k):
    """Indices and distances of the k nearest neighbors of each point in
    its own cloud, with the point itself removed."""
    n = len(pts)
    if n <= k:
        raise ValueError(f"need more than k={k} points, got {n}")
    ni = knn(pts, pts, k + 1)
    cols = np.arange(k + 1)[None, :]
    is_self = ni.indices == np.arange(n)[:, None]
    # drop the self entry, or the final column when >k duplicates hid it
    drop = np.where(is_self.any(axis=1), is_self.argmax(axis=1), k)
    keep = cols != drop[:, None]
    idx = ni.indices[keep].reshape(n, k)
    dist = ni.distances[keep].reshape(n, k)
    return idx, dist


def uniform_kl(pc, k: int):
    """KL divergence between the normalized per-point mean-kNN-distance
    distribution and the uniform distribution over the cloud.

    Zero exactly when every per-point mean distance is equal; duplicated
    points (zero distances) are clamped to 1e-9 with a warning.
    """
    arr, t = _coords(pc)
    idx, dist = _knn_excluding_self(arr, k)
    if t is None:
        d = dist.mean(axis=1)
        if (d <= 0.0).any():
            warnings.warn("duplicate points in uniform_kl; clamping distances")
            d = np.maximum(d, _D_FLOOR)
        if d.max() == d.min():
            return 0.0
        q = d / d.sum()
        kl = float((q * np.log(len(arr) * q)).sum())
        return max(kl, 0.0)
    neigh = index_select(t, idx.reshape(-1)).reshape(len(arr), k, 3)
    diff = t.reshape(len(arr), 1, 3) - neigh
    d = ((diff * diff).sum(axis=2) + 1e-12).sqrt().mean(axis=1)
    if (d.data <= 0.0).any():
        warnings.warn("duplicate points in uniform_kl; clamping distances")
    d = d.clamp_min(_D_FLOOR)
    q = d / d.sum()
    return (q * (q * float(len(arr))).log()).sum()
