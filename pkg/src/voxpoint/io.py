"""File formats: ASCII XYZ, binary little-endian PLY, ASCII OBJ meshes,
and the VPPV voxel-grid container.

Coordinates are written as float32.  XYZ uses nine significant digits,
which round-trips float32 exactly.
"""

from __future__ import annotations

import struct

import numpy as np

from .geometry import PointCloud, SurfaceMesh, VoxelGrid, as_points

VOXEL_MAGIC = b"VPPV"


def _as_f32_points(x):
    return np.ascontiguousarray(as_points(x), dtype=np.float32)


def write_xyz(path, points):
    pts = _as_f32_points(points)
    with open(path, "w") as f:
        for x, y, z in pts:
            f.write(f"{x:.9g} {y:.9g} {z:.9g}\n")


def read_xyz(path) -> PointCloud:
    rows = []
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ValueError(f"{path}:{ln}: expected 3 coordinates")
            rows.append([float(p) for p in parts])
    if not rows:
        raise ValueError(f"{path}: no points")
    return PointCloud(np.array(rows, dtype=np.float32))


def write_ply(path, points):
    pts = _as_f32_points(points)
    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {len(pts)}\n"
        "property float x\n"
        "property float y\n"
        "property float z\n"
        "end_header\n"
    )
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(pts.astype("<f4").tobytes(order="C"))


def read_ply(path) -> PointCloud:
    with open(path, "rb") as f:
        raw = f.read()
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply\n") or end < 0:
        raise ValueError(f"{path}: not a PLY file")
    lines = raw[:end].decode("ascii", errors="replace").splitlines()
    if "format binary_little_endian 1.0" not in lines:
        raise ValueError(f"{path}: only binary little-endian PLY is supported")
    count = None
    props = []
    for line in lines:
        if line.startswith("element vertex"):
            count = int(line.split()[-1])
        elif line.startswith("element ") and count is not None:
            raise ValueError(f"{path}: only a single vertex element is supported")
        elif line.startswith("property") and count is not None:
            props.append(line.split())
    if count is None or props != [["property", "float", c] for c in "xyz"]:
        raise ValueError(f"{path}: expected exactly float x, y, z properties")
    payload = raw[end + len(b"end_header\n"):]
    if len(payload) != 12 * count:
        raise ValueError(f"{path}: payload size mismatch")
    pts = np.frombuffer(payload, dtype="<f4").reshape(count, 3)
    return PointCloud(pts.copy())


def load_points(path) -> PointCloud:
    s = str(path)
    if s.endswith(".ply"):
        return read_ply(path)
    if s.endswith(".xyz"):
        return read_xyz(path)
    raise ValueError(f"{path}: unknown point format (use .xyz or .ply)")


def save_points(path, points):
    s = str(path)
    if s.endswith(".ply"):
        write_ply(path, points)
    elif s.endswith(".xyz"):
        write_xyz(path, points)
    else:
        raise ValueError(f"{path}: unknown point format (use .xyz or .ply)")


def write_obj(path, mesh: SurfaceMesh):
    with open(path, "w") as f:
        for x, y, z in np.asarray(mesh.vertices, dtype=np.float32):
            f.write(f"v {x:.9g} {y:.9g} {z:.9g}\n")
        for a, b, c in mesh.triangles:
            f.write(f"f {a + 1} {b + 1} {c + 1}\n")


def write_vppv(path, grid: VoxelGrid):
    with open(path, "wb") as f:
        f.write(VOXEL_MAGIC)
        f.write(struct.pack("<I", grid.resolution))
        f.write(grid.occupancy.astype("<f4").tobytes(order="C"))


def read_vppv(path) -> VoxelGrid:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != VOXEL_MAGIC:
        raise ValueError(f"{path}: not a voxel grid file (bad magic)")
    (r,) = struct.unpack_from("<I", raw, 4)
    payload = raw[8:]
    if len(payload) != 4 * r ** 3:
        raise ValueError(f"{path}: payload size mismatch for R={r}")
    return VoxelGrid(r, np.frombuffer(payload, dtype="<f4").copy())
