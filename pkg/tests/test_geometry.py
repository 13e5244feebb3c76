import math
import warnings

import numpy as np
import pytest

from voxpoint.autodiff import Tensor, fd_check, use_dtype
from voxpoint.geometry import (NeighborIndex, PointCloud, SurfaceMesh,
                               VoxelGrid, chamfer_l1, extract_surface, fps,
                               knn, mean_occupancy, normalize_unit_cube,
                               occupancy_loss, surface_points, uniform_kl,
                               voxel_iou, voxelize)
from voxpoint import io


# -- oracles -----------------------------------------------------------------

def fps_oracle(pts, k, start):
    """O(N^2) greedy reference; same squared-distance arithmetic, explicit
    lowest-index tie-break by strict > scan."""
    n = len(pts)
    sel = [start]
    best = ((pts - pts[start]) ** 2).sum(1)
    for _ in range(k - 1):
        far, far_d = 0, -1.0
        for j in range(n):
            if best[j] > far_d:
                far, far_d = j, best[j]
        sel.append(far)
        best = np.minimum(best, ((pts - pts[far]) ** 2).sum(1))
    return np.array(sel)


def knn_oracle(query, source, k):
    """Exhaustive per-query sort by (squared distance, index)."""
    out_i, out_d = [], []
    for q in query:
        d2 = ((source - q) ** 2).sum(1)
        order = sorted(range(len(source)), key=lambda j: (d2[j], j))[:k]
        out_i.append(order)
        out_d.append([math.sqrt(d2[j]) for j in order])
    return np.array(out_i), np.array(out_d)


def chamfer_oracle(a, b):
    """Brute force over all pairs with per-pair norms."""
    left = np.mean([min(np.linalg.norm(p - q) for q in b) for p in a])
    right = np.mean([min(np.linalg.norm(q - p) for p in a) for q in b])
    return left + right


def flood_fill_oracle(shell):
    """BFS from boundary empty cells, 6-connected; returns solid grid."""
    from collections import deque
    r = shell.shape[0]
    empty = shell == 0
    seen = np.zeros_like(empty)
    queue = deque()
    for z in range(r):
        for y in range(r):
            for x in range(r):
                if (z in (0, r - 1) or y in (0, r - 1) or x in (0, r - 1)) \
                        and empty[z, y, x]:
                    queue.append((z, y, x))
                    seen[z, y, x] = True
    while queue:
        z, y, x = queue.popleft()
        for dz, dy, dx in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0),
                           (0, 0, 1), (0, 0, -1)):
            nz, ny, nx = z + dz, y + dy, x + dx
            if 0 <= nz < r and 0 <= ny < r and 0 <= nx < r \
                    and empty[nz, ny, nx] and not seen[nz, ny, nx]:
                seen[nz, ny, nx] = True
                queue.append((nz, ny, nx))
    return (shell > 0) | (empty & ~seen)


# -- normalization -----------------------------------------------------------

def test_normalize_scales_cube_corners():
    corners = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1)
                        for sz in (-1, 1)], dtype=np.float64)
    out = normalize_unit_cube(corners)
    np.testing.assert_allclose(out, corners * 0.5)


def test_normalize_single_point_maps_to_origin():
    out = normalize_unit_cube(np.array([[3.0, 4.0, 5.0]]))
    np.testing.assert_array_equal(out, np.zeros((1, 3)))


def test_normalize_random_cloud_halfwidth_and_centroid():
    rng = np.random.default_rng(0)
    for _ in range(20):
        pts = rng.normal(size=(64, 3)) * rng.uniform(0.1, 10) + rng.normal(size=3)
        out = normalize_unit_cube(pts)
        assert abs(np.abs(out).max() - 0.5) < 1e-6
        np.testing.assert_allclose(out.mean(axis=0), 0.0, atol=1e-9)


def test_normalize_rejects_nonfinite():
    with pytest.raises(ValueError):
        normalize_unit_cube(np.array([[0.0, np.nan, 0.0]]))


def test_normalize_preserves_pointcloud_label():
    pc = PointCloud(np.array([[1, 0, 0], [-1, 0, 0]], dtype=np.float32), label=3)
    out = normalize_unit_cube(pc)
    assert isinstance(out, PointCloud) and out.label == 3


# -- voxelization ------------------------------------------------------------

def test_voxelize_single_origin_point_one_cell():
    g = voxelize(np.zeros((1, 3)), 4)
    assert g.occupancy.sum() == 1.0
    # origin maps to cell (2,2,2): floor((0+0.5)*4) = 2 on each axis
    assert g.dense()[2, 2, 2] == 1.0


def test_voxelize_rejects_small_resolution():
    with pytest.raises(ValueError):
        voxelize(np.zeros((1, 3)), 3)


def _sphere_surface(n, radius=0.4, seed=0):
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v * radius


def test_voxelize_solid_fills_sphere_interior():
    pts = _sphere_surface(20000)
    shell = voxelize(pts, 16)
    solid = voxelize(pts, 16, solid=True)
    assert solid.occupancy.sum() > shell.occupancy.sum()
    # solid occupancy is a cellwise superset of the shell
    assert np.all(solid.occupancy >= shell.occupancy)


def test_voxelize_solid_matches_bfs_oracle_on_handmade_grids():
    # hollow cube: faces occupied, interior empty, on an 8^3 grid
    pts = []
    for a in np.linspace(-0.34, 0.34, 12):
        for b in np.linspace(-0.34, 0.34, 12):
            for c in (-0.34, 0.34):
                pts += [[a, b, c], [a, c, b], [c, a, b]]
    pts = np.array(pts)
    shell = voxelize(pts, 8)
    solid = voxelize(pts, 8, solid=True)
    want = flood_fill_oracle(shell.dense())
    np.testing.assert_array_equal(solid.dense() > 0, want)
    assert solid.occupancy.sum() > shell.occupancy.sum()


def test_voxelize_solid_matches_bfs_oracle_on_random_clouds():
    rng = np.random.default_rng(5)
    for _ in range(5):
        pts = rng.uniform(-0.5, 0.4999, size=(200, 3))
        shell = voxelize(pts, 8)
        solid = voxelize(pts, 8, solid=True)
        np.testing.assert_array_equal(solid.dense() > 0,
                                      flood_fill_oracle(shell.dense()))


# -- occupancy statistics ----------------------------------------------------

def test_mean_occupancy_examples():
    assert mean_occupancy(VoxelGrid(4, np.zeros(64))) == 0.0
    assert mean_occupancy(VoxelGrid(2, np.ones(8))) == 1.0
    occ = np.zeros(64)
    occ[[3, 17, 42]] = 1.0
    assert mean_occupancy(VoxelGrid(4, occ)) == 0.046875


def test_occupancy_loss_examples():
    a = VoxelGrid(4, np.full(64, 0.25))
    assert occupancy_loss(a, a) == 0.0
    ones = VoxelGrid(4, np.ones(64))
    zeros = VoxelGrid(4, np.zeros(64))
    assert occupancy_loss(ones, zeros) == 1.0
    got = occupancy_loss(np.full(64, 0.25), np.full(64, 0.1))
    assert got == pytest.approx(0.0225, rel=1e-12)


def test_occupancy_loss_rejects_resolution_mismatch():
    with pytest.raises(ValueError):
        occupancy_loss(VoxelGrid(4, np.zeros(64)), VoxelGrid(8, np.zeros(512)))


def test_occupancy_loss_differentiable_route():
    with use_dtype(np.float64):
        target = np.full(64, 0.25)
        pred = Tensor(np.random.default_rng(0).uniform(0.1, 0.9, 64),
                      requires_grad=True, dtype=np.float64)
        fd_check(lambda: occupancy_loss(target, pred), [pred])


# -- surface extraction ------------------------------------------------------

def test_extract_surface_empty_on_constant_field():
    assert extract_surface(VoxelGrid(8, np.zeros(512))).is_empty
    assert extract_surface(VoxelGrid(8, np.ones(512))).is_empty


def test_extract_surface_sphere_vertex_radius_error_below_spacing():
    r_grid = 32
    centers = (np.arange(r_grid) + 0.5) / r_grid - 0.5
    z, y, x = np.meshgrid(centers, centers, centers, indexing="ij")
    rad = np.sqrt(x * x + y * y + z * z)
    field = np.clip(0.5 + (0.35 - rad), 0.0, 1.0)
    mesh = extract_surface(VoxelGrid.from_dense(field))
    assert not mesh.is_empty
    err = np.abs(np.linalg.norm(mesh.vertices, axis=1) - 0.35)
    assert err.mean() < 1.0 / r_grid


def edge_audit(mesh):
    """Return the set of per-edge triangle counts."""
    from collections import Counter
    cnt = Counter()
    for tri in mesh.triangles:
        a, b, c = sorted(tri)
        cnt[(a, b)] += 1
        cnt[(a, c)] += 1
        cnt[(b, c)] += 1
    return set(cnt.values())


def test_extract_surface_closed_meshes_pass_edge_audit():
    pts = _sphere_surface(20000)
    mesh = extract_surface(voxelize(pts, 16, solid=True))
    assert edge_audit(mesh) == {2}
    box = np.zeros((12, 12, 12))
    box[3:9, 2:10, 4:8] = 1.0
    mesh2 = extract_surface(VoxelGrid.from_dense(box))
    assert edge_audit(mesh2) == {2}


def test_extract_surface_axis_orientation():
    # region long in x only; extracted extents must follow
    box = np.zeros((16, 16, 16))
    box[7:9, 6:10, 2:14] = 1.0        # (z, y, x) slab, x widest
    mesh = extract_surface(VoxelGrid.from_dense(box))
    spans = mesh.vertices.max(axis=0) - mesh.vertices.min(axis=0)
    assert spans[0] > spans[1] > spans[2]


def test_extract_surface_rejects_bad_iso():
    with pytest.raises(ValueError):
        extract_surface(VoxelGrid(8, np.zeros(512)), iso=1.5)


# -- surface sampling --------------------------------------------------------

def test_surface_points_single_triangle_in_plane():
    mesh = SurfaceMesh(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0.0]]),
                       np.array([[0, 1, 2]]))
    pc = surface_points(mesh, 1000, seed=0)
    assert np.abs(pc.points[:, 2]).max() < 1e-6
    u, v = pc.points[:, 0], pc.points[:, 1]
    assert (u >= -1e-6).all() and (v >= -1e-6).all() and (u + v <= 1 + 1e-5).all()


def test_surface_points_area_weighting():
    # triangle in z=0 with 3x the area of the one in z=1
    verts = np.array([[0, 0, 0], [3, 0, 0], [0, 2, 0],
                      [0, 0, 1], [1, 0, 1], [0, 2, 1.0]])
    mesh = SurfaceMesh(verts, np.array([[0, 1, 2], [3, 4, 5]]))
    pc = surface_points(mesh, 10_000, seed=1)
    frac = (pc.points[:, 2] < 0.5).mean()
    assert abs(frac - 0.75) < 0.75 * 0.05


def test_surface_points_deterministic_and_rejects_empty():
    mesh = SurfaceMesh(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0.0]]),
                       np.array([[0, 1, 2]]))
    a = surface_points(mesh, 128, seed=7).points
    b = surface_points(mesh, 128, seed=7).points
    np.testing.assert_array_equal(a, b)
    empty = SurfaceMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    with pytest.raises(ValueError):
        surface_points(empty, 10, seed=0)


# -- farthest point sampling -------------------------------------------------

def test_fps_collinear_example():
    pts = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0.0]])
    np.testing.assert_array_equal(fps(pts, 2, start=0), [0, 3])


def test_fps_full_k_returns_all_indices():
    rng = np.random.default_rng(2)
    pts = rng.normal(size=(40, 3))
    assert set(fps(pts, 40)) == set(range(40))


def test_fps_matches_bruteforce_oracle():
    rng = np.random.default_rng(3)
    pts = rng.normal(size=(200, 3))
    for k in (1, 2, 37, 200):
        for start in (0, 11, 199):
            np.testing.assert_array_equal(fps(pts, k, start),
                                          fps_oracle(pts, k, start))


def test_fps_tie_break_with_duplicates_matches_oracle():
    rng = np.random.default_rng(4)
    base = rng.normal(size=(30, 3))
    pts = np.concatenate([base, base[:10]])      # forced exact ties
    for k in (5, 20, 40):
        np.testing.assert_array_equal(fps(pts, k, 3), fps_oracle(pts, k, 3))


def test_fps_rejects_bad_k():
    with pytest.raises(ValueError):
        fps(np.zeros((5, 3)), 6)


# -- k nearest neighbors -----------------------------------------------------

def test_knn_self_neighbor():
    rng = np.random.default_rng(5)
    pts = rng.normal(size=(50, 3))
    ni = knn(pts, pts, 1)
    np.testing.assert_array_equal(ni.indices[:, 0], np.arange(50))
    np.testing.assert_array_equal(ni.distances[:, 0], np.zeros(50))


def test_knn_equidistant_tie_goes_to_lower_index():
    source = np.array([[0, 1, 0], [0, -1, 0.0]])
    ni = knn(np.zeros((1, 3)), source, 1)
    assert ni.indices[0, 0] == 0


def test_knn_matches_exhaustive_oracle():
    rng = np.random.default_rng(6)
    q = rng.normal(size=(60, 3))
    s = rng.normal(size=(500, 3))
    for k in (1, 7, 500):
        ni = knn(q, s, k)
        oi, od = knn_oracle(q, s, k)
        np.testing.assert_array_equal(ni.indices, oi)
        np.testing.assert_allclose(ni.distances, od, atol=1e-9)
        assert (np.diff(ni.distances, axis=1) >= -1e-12).all()


def test_knn_rejects_k_above_source_size():
    with pytest.raises(ValueError):
        knn(np.zeros((3, 3)), np.zeros((4, 3)), 5)


# -- chamfer -----------------------------------------------------------------

def test_chamfer_identical_sets_zero_even_permuted():
    rng = np.random.default_rng(7)
    a = rng.normal(size=(30, 3))
    assert chamfer_l1(a, a) == 0.0
    assert chamfer_l1(a, a[::-1].copy()) == 0.0


def test_chamfer_singleton_examples():
    a = np.array([[0, 0, 0.0]])
    b = np.array([[1, 0, 0.0]])
    assert chamfer_l1(a, b) == pytest.approx(2.0, abs=1e-9)
    c = np.array([[0, 0, 0], [2, 0, 0.0]])
    assert chamfer_l1(c, b) == pytest.approx(2.0, abs=1e-9)


def test_chamfer_symmetric_and_positive_when_different():
    rng = np.random.default_rng(8)
    a = rng.normal(size=(40, 3))
    b = rng.normal(size=(25, 3))
    assert chamfer_l1(a, b) == chamfer_l1(b, a)
    assert chamfer_l1(a, b) > 0.0


def test_chamfer_matches_bruteforce_oracle():
    rng = np.random.default_rng(9)
    for na, nb in ((1, 1), (17, 23), (200, 500)):
        a = rng.normal(size=(na, 3))
        b = rng.normal(size=(nb, 3))
        assert chamfer_l1(a, b) == pytest.approx(chamfer_oracle(a, b), abs=1e-9)


def test_chamfer_tensor_route_matches_and_differentiates():
    rng = np.random.default_rng(10)
    a = rng.normal(size=(12, 3))
    b = rng.normal(size=(9, 3))
    with use_dtype(np.float64):
        at = Tensor(a, requires_grad=True, dtype=np.float64)
        val = chamfer_l1(at, b)
        assert val.item() == pytest.approx(chamfer_l1(a, b), abs=1e-6)
        fd_check(lambda: chamfer_l1(at, b), [at])


def test_chamfer_rejects_empty():
    with pytest.raises(ValueError):
        chamfer_l1(np.zeros((0, 3)), np.zeros((3, 3)))


# -- uniformity KL -----------------------------------------------------------

def _tetrahedron():
    return np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1.0]])


def test_uniform_kl_zero_on_equal_distances():
    # tetrahedron: every pairwise distance is the same float, so the
    # per-point means are bitwise equal and the exact-zero rule applies
    assert uniform_kl(_tetrahedron(), 1) == 0.0
    assert uniform_kl(_tetrahedron(), 3) == 0.0
    # circle of 8: symmetric in exact arithmetic, but cos/sin rounding
    # leaves last-ulp spread, so only near-zero is guaranteed
    ang = np.linspace(0, 2 * np.pi, 8, endpoint=False)
    circle = np.stack([np.cos(ang), np.sin(ang), np.zeros(8)], axis=1)
    assert 0.0 <= uniform_kl(circle, 2) < 1e-12


def test_uniform_kl_two_points_closed_form():
    assert uniform_kl(np.array([[0, 0, 0], [1, 0, 0.0]]), 1) == 0.0


def test_uniform_kl_three_points_hand_computed():
    pts = np.array([[0, 0, 0], [1, 0, 0], [3, 0, 0.0]])
    # d = [1, 1, 2]; q = [1/4, 1/4, 1/2]; KL = log 3 - 1.5 log 2
    want = math.log(3) - 1.5 * math.log(2)
    assert uniform_kl(pts, 1) == pytest.approx(want, rel=1e-12)


def test_uniform_kl_nonnegative_on_random_clouds():
    rng = np.random.default_rng(11)
    for _ in range(1000):
        pts = rng.normal(size=(rng.integers(6, 40), 3))
        assert uniform_kl(pts, 4) >= 0.0


def test_uniform_kl_duplicates_warn_and_clamp():
    pts = np.array([[0, 0, 0], [0, 0, 0], [1, 0, 0], [2, 0, 0.0]])
    with pytest.warns(UserWarning, match="duplicate"):
        val = uniform_kl(pts, 1)
    assert np.isfinite(val)


def test_uniform_kl_rejects_small_clouds():
    with pytest.raises(ValueError):
        uniform_kl(np.zeros((3, 3)), 3)


def test_uniform_kl_tensor_route_matches_and_differentiates():
    rng = np.random.default_rng(12)
    pts = rng.normal(size=(14, 3))
    with use_dtype(np.float64):
        t = Tensor(pts, requires_grad=True, dtype=np.float64)
        val = uniform_kl(t, 4)
        assert val.item() == pytest.approx(uniform_kl(pts, 4), abs=1e-6)
        fd_check(lambda: uniform_kl(t, 4), [t])


# -- voxel IoU ---------------------------------------------------------------

def test_voxel_iou_examples():
    occ = np.zeros(64)
    occ[[0, 1]] = 1.0
    a = VoxelGrid(4, occ)
    assert voxel_iou(a, a) == 1.0
    occ_b = np.zeros(64)
    occ_b[[1, 2]] = 1.0
    assert voxel_iou(a, VoxelGrid(4, occ_b)) == pytest.approx(1 / 3)
    occ_c = np.zeros(64)
    occ_c[[5]] = 1.0
    occ_d = np.zeros(64)
    occ_d[[9]] = 1.0
    assert voxel_iou(VoxelGrid(4, occ_c), VoxelGrid(4, occ_d)) == 0.0
    empty = VoxelGrid(4, np.zeros(64))
    assert voxel_iou(empty, empty) == 1.0
    with pytest.raises(ValueError):
        voxel_iou(a, VoxelGrid(8, np.zeros(512)))


# -- containers --------------------------------------------------------------

def test_voxelgrid_validates_payload():
    with pytest.raises(ValueError):
        VoxelGrid(4, np.zeros(63))
    with pytest.raises(ValueError):
        VoxelGrid(4, np.full(64, 1.5))


def test_surfacemesh_validates_triangles():
    with pytest.raises(ValueError):
        SurfaceMesh(np.zeros((3, 3)), np.array([[0, 1, 3]]))
    with pytest.raises(ValueError):
        SurfaceMesh(np.zeros((3, 3)), np.array([[0, 1, 1]]))


def test_neighborindex_validates_shapes():
    with pytest.raises(ValueError):
        NeighborIndex(np.zeros((3, 2), dtype=np.int64), np.zeros((3, 3)))


# -- file formats ------------------------------------------------------------

def test_xyz_round_trip_exact(tmp_path):
    rng = np.random.default_rng(13)
    pts = rng.normal(size=(50, 3)).astype(np.float32)
    io.write_xyz(tmp_path / "c.xyz", pts)
    back = io.read_xyz(tmp_path / "c.xyz")
    np.testing.assert_array_equal(back.points, pts)


def test_ply_round_trip_bitwise(tmp_path):
    rng = np.random.default_rng(14)
    pts = rng.normal(size=(77, 3)).astype(np.float32)
    io.write_ply(tmp_path / "c.ply", pts)
    back = io.read_ply(tmp_path / "c.ply")
    np.testing.assert_array_equal(back.points, pts)


def test_ply_rejects_foreign_files(tmp_path):
    (tmp_path / "bad.ply").write_bytes(b"ply\nformat ascii 1.0\nend_header\n")
    with pytest.raises(ValueError):
        io.read_ply(tmp_path / "bad.ply")
    (tmp_path / "notply.ply").write_bytes(b"\x00\x01")
    with pytest.raises(ValueError):
        io.read_ply(tmp_path / "notply.ply")


def test_vppv_round_trip_and_magic(tmp_path):
    rng = np.random.default_rng(15)
    grid = VoxelGrid(8, rng.uniform(0, 1, 512).astype(np.float32))
    io.write_vppv(tmp_path / "g.vppv", grid)
    back = io.read_vppv(tmp_path / "g.vppv")
    assert back.resolution == 8
    np.testing.assert_array_equal(back.occupancy, grid.occupancy)
    (tmp_path / "bad.vppv").write_bytes(b"XXXX" + b"\x00" * 8)
    with pytest.raises(ValueError):
        io.read_vppv(tmp_path / "bad.vppv")


def test_obj_export(tmp_path):
    mesh = SurfaceMesh(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0.0]]),
                       np.array([[0, 1, 2]]))
    io.write_obj(tmp_path / "m.obj", mesh)
    lines = (tmp_path / "m.obj").read_text().splitlines()
    assert lines[:3] == ["v 0 0 0", "v 1 0 0", "v 0 1 0"]
    assert lines[3] == "f 1 2 3"


def test_points_dispatch_by_extension(tmp_path):
    pts = np.eye(3, dtype=np.float32)
    io.save_points(tmp_path / "a.ply", pts)
    io.save_points(tmp_path / "a.xyz", pts)
    np.testing.assert_array_equal(io.load_points(tmp_path / "a.ply").points, pts)
    np.testing.assert_array_equal(io.load_points(tmp_path / "a.xyz").points, pts)
    with pytest.raises(ValueError):
        io.save_points(tmp_path / "a.txt", pts)
