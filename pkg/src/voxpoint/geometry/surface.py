"""Isosurface extraction and area-uniform surface sampling.

The voxel field is read at cell centers: cell (x, y, z) sits at spatial
coordinate ((i + 0.5)/R - 0.5) per axis.  Marching cubes runs on the
(z, y, x)-ordered dense array, so extracted vertices are flipped back to
x, y, z order; triangle winding is reversed to keep orientation after
the axis mirror.
"""

from __future__ import annotations

import numpy as np
from skimage import measure

from .types import PointCloud, SurfaceMesh, VoxelGrid

_EMPTY = SurfaceMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))


def extract_surface(v: VoxelGrid, iso: float = 0.5) -> SurfaceMesh:
    """Lewiner marching cubes at the given iso level.

    A field with no crossing (constant, or entirely on one side) yields
    the empty mesh rather than an error.
    """
    if not 0.0 < iso < 1.0:
        raise ValueError("iso must lie in (0, 1)")
    arr = v.dense()
    try:
        verts, faces, _, _ = measure.marching_cubes(
            arr, level=iso, method="lewiner", allow_degenerate=False)
    except (ValueError, RuntimeError):
        return _EMPTY
    if len(faces) == 0:
        return _EMPTY
    spatial = (verts + 0.5) / v.resolution - 0.5
    return SurfaceMesh(spatial[:, ::-1], faces[:, ::-1])


def surface_points(mesh: SurfaceMesh, n: int, seed: int) -> PointCloud:
    """Sample n points uniformly by triangle area; fixed seed, fixed output."""
    if mesh.is_empty:
        raise ValueError("cannot sample an empty mesh")
    if n < 1:
        raise ValueError("need n >= 1 samples")
    v, t = mesh.vertices, mesh.triangles
    a, b, c = v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]
    cross = np.cross(b - a, c - a)
    areas = 0.5 * np.linalg.norm(cross, axis=1)
    total = areas.sum()
    if total <= 0.0:
        raise ValueError("mesh has zero total area")
    rng = np.random.default_rng(seed)
    ti = rng.choice(len(t), size=n, p=areas / total)
    u = rng.random((n, 1))
    w = rng.random((n, 1))
    over = (u + w) > 1.0
    u = np.where(over, 1.0 - u, u)
    w = np.where(over, 1.0 - w, w)
    pts = a[ti] + u * (b - a)[ti] + w * (c - a)[ti]
    return PointCloud(pts)
