"""Geometry containers with validated invariants."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def as_points(x) -> np.ndarray:
    """Validate and return an (N, 3) coordinate array (dtype preserved)."""
    if isinstance(x, PointCloud):
        return x.points
    arr = np.asarray(x)
    if arr.ndim != 2 or arr.shape[1] != 3 or arr.shape[0] < 1:
        raise ValueError(f"expected (N, 3) points, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError("points contain non-finite coordinates")
    return arr


@dataclass
class PointCloud:
    """N x 3 coordinates, canonically float32; optional integer label."""
    points: np.ndarray
    label: int | None = None

    def __post_init__(self):
        arr = np.asarray(self.points, dtype=np.float32)
        if arr.ndim != 2 or arr.shape[1] != 3 or arr.shape[0] < 1:
            raise ValueError(f"expected (N, 3) points, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("points contain non-finite coordinates")
        self.points = arr

    def __len__(self):
        return len(self.points)


@dataclass
class VoxelGrid:
    """Cubic occupancy grid; flat layout (z*R + y)*R + x, x fastest."""
    resolution: int
    occupancy: np.ndarray

    def __post_init__(self):
        r = int(self.resolution)
        occ = np.asarray(self.occupancy, dtype=np.float32).reshape(-1)
        if occ.size != r ** 3:
            raise ValueError(f"payload {occ.size} != {r}^3")
        if occ.size and (occ.min() < 0.0 or occ.max() > 1.0):
            raise ValueError("occupancy values must lie in [0, 1]")
        self.resolution = r
        self.occupancy = occ

    def dense(self) -> np.ndarray:
        """(R, R, R) view with axes ordered (z, y, x)."""
        r = self.resolution
        return self.occupancy.reshape(r, r, r)

    @classmethod
    def from_dense(cls, arr) -> "VoxelGrid":
        arr = np.asarray(arr)
        if arr.ndim != 3 or len(set(arr.shape)) != 1:
            raise ValueError("expected a cubic (R, R, R) array")
        return cls(arr.shape[0], arr.reshape(-1))


@dataclass
class SurfaceMesh:
    vertices: np.ndarray        # (V, 3)
    triangles: np.ndarray       # (T, 3) vertex indices

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        t = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(t):
            if t.min() < 0 or t.max() >= len(v):
                raise ValueError("triangle index out of range")
            if ((t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2])
                    | (t[:, 0] == t[:, 2])).any():
                raise ValueError("degenerate triangle (repeated vertex index)")
        self.vertices = v
        self.triangles = t

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0


@dataclass
class NeighborIndex:
    """Per query row: k source indices by ascending distance, ties by index."""
    indices: np.ndarray         # (Q, k) int64
    distances: np.ndarray       # (Q, k) float

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        d = np.asarray(self.distances)
        if idx.shape != d.shape or idx.ndim != 2:
            raise ValueError("indices/distances must share a (Q, k) shape")
        self.indices = idx
        self.distances = d
