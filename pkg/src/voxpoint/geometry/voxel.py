"""Voxelization and occupancy statistics."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from ..autodiff import Tensor
from .types import VoxelGrid, as_points

_SIX_CONNECTED = ndimage.generate_binary_structure(3, 1)


def voxelize(pc, resolution: int, solid: bool = False) -> VoxelGrid:
    """Bin unit-cube points into an R^3 occupancy grid.

    Shell mode marks a cell when at least one point lands in it.  Solid
    mode additionally fills the enclosed interior: empty cells are
    flood-filled from the grid boundary with 6-connectivity and every
    unreached empty cell is marked occupied.
    """
    r = int(resolution)
    if r < 4:
        raise ValueError(f"resolution {r} too small (minimum 4)")
    pts = as_points(pc)
    idx = np.clip(np.floor((pts + 0.5) * r), 0, r - 1).astype(np.int64)
    flat = (idx[:, 2] * r + idx[:, 1]) * r + idx[:, 0]
    occ = np.zeros(r ** 3, dtype=np.float32)
    occ[flat] = 1.0
    if solid:
        shell = occ.reshape(r, r, r) > 0
        empty = ~shell
        labels, n = ndimage.label(empty, structure=_SIX_CONNECTED)
        if n:
            boundary = np.zeros_like(empty)
            boundary[0], boundary[-1] = True, True
            boundary[:, 0], boundary[:, -1] = True, True
            boundary[:, :, 0], boundary[:, :, -1] = True, True
            outside = np.unique(labels[boundary & empty])
            interior = empty & ~np.isin(labels, outside)
            occ = (shell | interior).astype(np.float32).reshape(-1)
    return VoxelGrid(r, occ)


def _occ_values(v):
    if isinstance(v, VoxelGrid):
        return v.occupancy
    if isinstance(v, Tensor):
        return v
    return np.asarray(v)


def mean_occupancy(v):
    """Mean occupancy over all cells; Tensor input stays differentiable."""
    vals = _occ_values(v)
    if isinstance(vals, Tensor):
        return vals.mean()
    return float(vals.mean())


def occupancy_loss(v, v_hat):
    """Squared difference of the two grids' mean occupancies."""
    a, b = _occ_values(v), _occ_values(v_hat)
    na = a.size if isinstance(a, Tensor) else np.asarray(a).size
    nb = b.size if isinstance(b, Tensor) else np.asarray(b).size
    if na != nb:
        raise ValueError(f"resolution mismatch: {na} vs {nb} cells")
    ma = mean_occupancy(a)
    mb = mean_occupancy(b)
    if isinstance(ma, Tensor) or isinstance(mb, Tensor):
        diff = ma - mb if isinstance(ma, Tensor) else mb - ma
        return diff * diff
    return float((ma - mb) ** 2)


def voxel_iou(a: VoxelGrid, b: VoxelGrid, threshold: float = 0.5) -> float:
    """Intersection over union of thresholded grids; two empty grids
    count as identical (IoU 1)."""
    if a.resolution != b.resolution:
        raise ValueError("resolution mismatch")
    occ_a = a.occupancy >= threshold
    occ_b = b.occupancy >= threshold
    union = np.logical_or(occ_a, occ_b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(occ_a, occ_b).sum() / union)
