"""Synthetic dataset: sampler geometry, spec validation, deterministic
regeneration, manifests, and split loading."""

import json
import os

import numpy as np
import pytest

from voxpoint import io
from voxpoint.data import (CATEGORIES, PARAM_RANGES, SyntheticShapeSpec,
                           _sample_box, _sample_cone, _sample_cylinder,
                           _sample_sphere, _sample_torus, gen_dataset,
                           load_split, make_prompt, random_spec,
                           resolve_prompt, sample_shape)


# -- prompt helpers ----------------------------------------------------------

def test_make_prompt_template():
    assert make_prompt("sphere") == "a sphere"
    assert make_prompt("cylinder") == "a cylinder"


@pytest.mark.parametrize("text,label", [
    ("a sphere", 0),
    ("a box", 1),
    ("an box", 1),          # article is stripped, not grammar-checked
    ("torus", 2),
    ("  A Cone ", 4),
    ("a  cylinder", 3),     # extra inner whitespace after the article
])
def test_resolve_prompt_accepts_articles_case_and_whitespace(text, label):
    assert resolve_prompt(text) == label


def test_resolve_prompt_unknown_lists_vocabulary():
    with pytest.raises(ValueError, match="sphere"):
        resolve_prompt("a teapot")


def test_resolve_prompt_round_trips_every_category():
    for i, cat in enumerate(CATEGORIES):
        assert resolve_prompt(make_prompt(cat)) == i


# -- shape spec validation ---------------------------------------------------

def test_spec_rejects_unknown_category():
    with pytest.raises(ValueError, match="unknown category"):
        SyntheticShapeSpec("pyramid", {})


def test_spec_rejects_missing_and_extra_params():
    with pytest.raises(ValueError, match="needs parameters"):
        SyntheticShapeSpec("sphere", {})
    with pytest.raises(ValueError, match="needs parameters"):
        SyntheticShapeSpec("sphere", {"radius": 0.4, "extra": 1.0})


def test_spec_rejects_out_of_range_params():
    lo, hi = PARAM_RANGES["sphere"]["radius"]
    with pytest.raises(ValueError, match="outside"):
        SyntheticShapeSpec("sphere", {"radius": hi + 0.01})
    with pytest.raises(ValueError, match="outside"):
        SyntheticShapeSpec("sphere", {"radius": lo - 0.01})


def test_spec_rejects_torus_minor_at_or_above_major():
    with pytest.raises(ValueError, match="minor"):
        SyntheticShapeSpec("torus", {"major": 0.3, "minor": 0.3})


def test_random_spec_within_ranges_all_categories():
    rng = np.random.default_rng(7)
    for _ in range(30):
        for cat in CATEGORIES:
            spec = random_spec(cat, rng)
            for name, (lo, hi) in PARAM_RANGES[cat].items():
                assert lo <= spec.params[name] <= hi
            if cat == "torus":
                assert spec.params["minor"] < spec.params["major"]
            assert 0 <= spec.seed < 2 ** 31


# -- raw sampler structure (pre-jitter, pre-normalization) -------------------

def test_sphere_sampler_radii_exactly_equal():
    pts = _sample_sphere(np.random.default_rng(0), 4096, 0.42)
    radii = np.linalg.norm(pts, axis=1)
    np.testing.assert_allclose(radii, 0.42, rtol=1e-12)


def test_box_sampler_points_lie_on_faces():
    hx, hy, hz = 0.3, 0.4, 0.5
    pts = _sample_box(np.random.default_rng(1), 4096, hx, hy, hz)
    halves = np.array([hx, hy, hz])
    ratios = np.abs(pts) / halves
    # every point pinned to one face, no point outside the box
    assert np.allclose(ratios.max(axis=1), 1.0, atol=1e-12)
    assert (ratios <= 1.0 + 1e-12).all()
    # every face hit roughly in proportion to its area
    on_face = np.isclose(ratios, 1.0, atol=1e-12)
    assert (on_face.sum(axis=0) > 0).all()


def test_torus_sampler_points_on_tube_surface():
    major, minor = 0.35, 0.12
    pts = _sample_torus(np.random.default_rng(2), 4096, major, minor)
    ring = np.sqrt(pts[:, 0] ** 2 + pts[:, 1] ** 2)
    tube = np.sqrt((ring - major) ** 2 + pts[:, 2] ** 2)
    np.testing.assert_allclose(tube, minor, rtol=1e-9)


def test_cylinder_sampler_points_on_side_or_caps():
    r, h = 0.25, 0.4
    pts = _sample_cylinder(np.random.default_rng(3), 4096, r, h)
    axial = np.sqrt(pts[:, 0] ** 2 + pts[:, 1] ** 2)
    on_cap = np.isclose(np.abs(pts[:, 2]), h, atol=1e-12)
    on_side = np.isclose(axial, r, atol=1e-12)
    assert (on_cap | on_side).all()
    assert (axial <= r + 1e-12).all()
    assert (np.abs(pts[:, 2]) <= h + 1e-12).all()
    assert on_cap.any() and on_side.any()
    assert (pts[on_cap, 2] > 0).any() and (pts[on_cap, 2] < 0).any()


def test_cone_sampler_points_on_base_or_slant():
    r, h = 0.3, 0.7
    pts = _sample_cone(np.random.default_rng(4), 4096, r, h)
    axial = np.sqrt(pts[:, 0] ** 2 + pts[:, 1] ** 2)
    on_base = pts[:, 2] == 0.0
    assert on_base.any() and (~on_base).any()
    assert (axial[on_base] <= r + 1e-12).all()
    # lateral surface: axial distance shrinks linearly from base edge to apex
    lat = ~on_base
    np.testing.assert_allclose(axial[lat] / r + pts[lat, 2] / h, 1.0, atol=1e-9)
    assert (pts[:, 2] >= -1e-12).all() and (pts[:, 2] <= h + 1e-12).all()


# -- sampled shapes ----------------------------------------------------------

def test_sample_shape_bit_identical_for_same_spec():
    spec = SyntheticShapeSpec("torus", {"major": 0.3, "minor": 0.12}, seed=5)
    a = sample_shape(spec, 1024)
    b = sample_shape(spec, 1024)
    assert np.array_equal(a.points, b.points)
    assert a.label == b.label == CATEGORIES.index("torus")


def test_sample_shape_different_seeds_differ():
    base = dict(category="sphere", params={"radius": 0.4})
    a = sample_shape(SyntheticShapeSpec(seed=0, **base), 512)
    b = sample_shape(SyntheticShapeSpec(seed=1, **base), 512)
    assert not np.array_equal(a.points, b.points)


def test_sample_shape_point_count_and_normalization():
    spec = SyntheticShapeSpec("box", {"half_x": 0.3, "half_y": 0.4,
                                      "half_z": 0.35}, seed=9)
    pc = sample_shape(spec, 2048)
    assert pc.points.shape == (2048, 3)
    assert np.isclose(np.abs(pc.points).max(), 0.5)
    np.testing.assert_allclose(pc.points.mean(axis=0), 0.0, atol=1e-6)


def test_sample_shape_default_count_is_8192():
    spec = SyntheticShapeSpec("sphere", {"radius": 0.4}, seed=3)
    assert sample_shape(spec).points.shape == (8192, 3)


def _fit_sphere_center(pts):
    """Algebraic least-squares sphere fit: |p|^2 = 2 c.p + (r^2 - |c|^2).
    Needed because unit-cube normalization centers on the empirical centroid,
    which sits O(r/sqrt(n)) off the true sphere center."""
    p = pts.astype(np.float64)
    a = np.concatenate([2 * p, np.ones((len(p), 1))], axis=1)
    sol, *_ = np.linalg.lstsq(a, (p ** 2).sum(axis=1), rcond=None)
    return sol[:3]


def test_noiseless_sphere_radii_equal_after_normalization():
    spec = SyntheticShapeSpec("sphere", {"radius": 0.45}, jitter=0.0, seed=11)
    pc = sample_shape(spec, 4096)
    radii = np.linalg.norm(pc.points - _fit_sphere_center(pc.points), axis=1)
    assert radii.std() / radii.mean() < 1e-5


def test_jittered_sphere_radii_within_noise_envelope():
    sigma = 0.004
    spec = SyntheticShapeSpec("sphere", {"radius": 0.45}, jitter=sigma, seed=11)
    pc = sample_shape(spec, 8192)
    radii = np.linalg.norm(pc.points - _fit_sphere_center(pc.points), axis=1)
    # normalization rescales by at most 0.5/(r - 5 sigma); bound the jitter
    # in normalized units accordingly
    sigma_n = sigma * 0.5 / (0.45 - 5 * sigma)
    dev = np.abs(radii - np.median(radii))
    assert (dev <= 3 * sigma_n).mean() > 0.985    # the three-sigma rule
    assert dev.max() <= 6 * sigma_n


# -- dataset generation ------------------------------------------------------

@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("shapes_ds")
    report = gen_dataset(root, n_per_class=10, seed=123, n_points=256)
    return root, report


def test_gen_dataset_writes_all_files(dataset_dir):
    root, report = dataset_dir
    files = sorted(os.listdir(os.path.join(root, "shapes")))
    assert len(files) == 5 * 10
    assert all(f.endswith(".ply") for f in files)
    assert set(report["file_sha1"]) == {os.path.join("shapes", f) for f in files}


def test_gen_dataset_split_sizes_and_class_balance(dataset_dir):
    root, report = dataset_dir
    assert report["counts"] == {"train": 45, "val": 5}
    for split, per_class in (("train", 9), ("val", 1)):
        with open(os.path.join(root, f"{split}.tsv")) as f:
            lines = [l for l in f.read().splitlines() if l]
        labels = [int(l.split("\t")[1]) for l in lines]
        counts = np.bincount(labels, minlength=5)
        assert (counts == per_class).all()


def test_gen_dataset_manifest_format(dataset_dir):
    root, _ = dataset_dir
    with open(os.path.join(root, "train.tsv")) as f:
        for line in f.read().splitlines():
            if not line:
                continue
            rel, label, prompt = line.split("\t")
            assert os.path.exists(os.path.join(root, rel))
            cat = CATEGORIES[int(label)]
            assert rel.startswith(os.path.join("shapes", cat))
            assert prompt == f"a {cat}"


def test_gen_dataset_report_on_disk_matches_return(dataset_dir):
    root, report = dataset_dir
    with open(os.path.join(root, "dataset_report.json")) as f:
        on_disk = json.load(f)
    assert on_disk == json.loads(json.dumps(report))
    assert on_disk["seed"] == 123 and on_disk["n_points"] == 256
    assert on_disk["categories"] == list(CATEGORIES)


def test_gen_dataset_regeneration_is_bit_identical(tmp_path):
    a = gen_dataset(tmp_path / "a", n_per_class=3, seed=77, n_points=128)
    b = gen_dataset(tmp_path / "b", n_per_class=3, seed=77, n_points=128)
    assert a["file_sha1"] == b["file_sha1"]
    c = gen_dataset(tmp_path / "c", n_per_class=3, seed=78, n_points=128)
    assert c["file_sha1"] != a["file_sha1"]


def test_gen_dataset_single_shape_per_class_has_empty_val(tmp_path):
    report = gen_dataset(tmp_path, n_per_class=1, seed=5, n_points=64)
    assert report["counts"] == {"train": 5, "val": 0}
    val = load_split(tmp_path, "val")
    assert val.clouds == [] and len(val.labels) == 0


def test_load_split_round_trip(dataset_dir):
    root, _ = dataset_dir
    split = load_split(root, "train")
    assert len(split.clouds) == len(split.labels) == len(split.prompts) == 45
    assert split.labels.dtype == np.int64
    for pc, label, prompt, rel in zip(split.clouds, split.labels,
                                      split.prompts, split.paths):
        assert pc.points.shape == (256, 3)
        assert pc.label == label == resolve_prompt(prompt)
        assert np.abs(pc.points).max() <= 0.5 + 1e-6
    # loaded points match what the generator wrote
    direct = io.read_ply(os.path.join(root, split.paths[0]))
    assert np.array_equal(direct.points, split.clouds[0].points)
