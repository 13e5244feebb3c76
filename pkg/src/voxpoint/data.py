"""Synthetic five-class shape dataset.

Stands in for a real 3D corpus: surface samples of parametric solids
(sphere, box, torus, cylinder, cone) with small Gaussian jitter, unit
cube normalized, 8192 points each.  Every shape is reconstructible
bit-for-bit from its :class:`SyntheticShapeSpec`; dataset generation is
a pure function of (seed, counts).

Prompts are templated "a <category>".  Manifests are line oriented:
``<relative path>\\t<label>\\t<prompt>``.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import io
from .geometry import PointCloud, normalize_unit_cube

CATEGORIES = ("sphere", "box", "torus", "cylinder", "cone")

PARAM_RANGES = {
    "sphere": {"radius": (0.35, 0.5)},
    "box": {"half_x": (0.25, 0.5), "half_y": (0.25, 0.5), "half_z": (0.25, 0.5)},
    "torus": {"major": (0.28, 0.4), "minor": (0.1, 0.16)},
    "cylinder": {"radius": (0.15, 0.3), "half_height": (0.25, 0.45)},
    "cone": {"radius": (0.2, 0.35), "height": (0.5, 0.9)},
}

DEFAULT_JITTER = 0.004


def make_prompt(category: str) -> str:
    return f"a {category}"


def resolve_prompt(text: str, categories=CATEGORIES) -> int:
    """Map prompt text to a label index; accepts 'a <cat>', 'an <cat>' or a
    bare category name.  Unknown prompts raise with the vocabulary."""
    t = text.strip().lower()
    for prefix in ("a ", "an "):
        if t.startswith(prefix):
            t = t[len(prefix):]
            break
    t = t.strip()
    if t not in categories:
        raise ValueError(f"prompt {text!r} does not name a category; "
                         f"known: {', '.join(categories)}")
    return categories.index(t)


@dataclass
class SyntheticShapeSpec:
    category: str
    params: dict = field(default_factory=dict)
    jitter: float = DEFAULT_JITTER
    seed: int = 0

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown category {self.category!r}")
        ranges = PARAM_RANGES[self.category]
        if set(self.params) != set(ranges):
            raise ValueError(f"{self.category} needs parameters {sorted(ranges)}")
        for name, value in self.params.items():
            lo, hi = ranges[name]
            if not lo <= value <= hi:
                raise ValueError(f"{name}={value} outside [{lo}, {hi}]")
        if self.category == "torus" and self.params["minor"] >= self.params["major"]:
            raise ValueError("torus minor radius must be below the major radius")


def random_spec(category: str, rng, jitter: float = DEFAULT_JITTER) -> SyntheticShapeSpec:
    params = {name: float(rng.uniform(lo, hi))
              for name, (lo, hi) in PARAM_RANGES[category].items()}
    if category == "torus":
        params["minor"] = min(params["minor"], 0.95 * params["major"])
    return SyntheticShapeSpec(category, params, jitter,
                              int(rng.integers(0, 2 ** 31 - 1)))


# -- per-category area-uniform surface samplers ------------------------------

def _sample_sphere(rng, n, radius):
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v * radius


def _sample_box(rng, n, hx, hy, hz):
    areas = np.array([hy * hz, hy * hz, hx * hz, hx * hz, hx * hy, hx * hy])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(-1, 1, size=n)
    v = rng.uniform(-1, 1, size=n)
    pts = np.empty((n, 3))
    for f in range(6):
        m = face == f
        axis = f // 2
        sign = 1.0 if f % 2 == 0 else -1.0
        half = (hx, hy, hz)[axis]
        others = [a for a in range(3) if a != axis]
        pts[m, axis] = sign * half
        pts[m, others[0]] = u[m] * (hx, hy, hz)[others[0]]
        pts[m, others[1]] = v[m] * (hx, hy, hz)[others[1]]
    return pts


def _sample_torus(rng, n, major, minor):
    theta = rng.uniform(0, 2 * np.pi, size=n)
    phi = np.empty(n)
    filled = 0
    while filled < n:                      # area density along the tube
        cand = rng.uniform(0, 2 * np.pi, size=2 * (n - filled))
        accept = rng.random(cand.size) <= (major + minor * np.cos(cand)) / (major + minor)
        got = cand[accept][: n - filled]
        phi[filled:filled + got.size] = got
        filled += got.size
    ring = major + minor * np.cos(phi)
    return np.stack([ring * np.cos(theta), ring * np.sin(theta),
                     minor * np.sin(phi)], axis=1)


def _sample_cylinder(rng, n, radius, half_height):
    lateral = 2 * np.pi * radius * 2 * half_height
    cap = np.pi * radius ** 2
    part = rng.choice(3, size=n, p=np.array([lateral, cap, cap]) / (lateral + 2 * cap))
    theta = rng.uniform(0, 2 * np.pi, size=n)
    r_disk = radius * np.sqrt(rng.random(n))
    z_side = rng.uniform(-half_height, half_height, size=n)
    pts = np.empty((n, 3))
    side = part == 0
    pts[side] = np.stack([radius * np.cos(theta[side]),
                          radius * np.sin(theta[side]), z_side[side]], axis=1)
    for which, zval in ((1, half_height), (2, -half_height)):
        m = part == which
        pts[m] = np.stack([r_disk[m] * np.cos(theta[m]),
                           r_disk[m] * np.sin(theta[m]),
                           np.full(m.sum(), zval)], axis=1)
    return pts


def _sample_cone(rng, n, radius, height):
    slant = np.sqrt(radius ** 2 + height ** 2)
    lateral = np.pi * radius * slant
    base = np.pi * radius ** 2
    on_base = rng.random(n) < base / (lateral + base)
    theta = rng.uniform(0, 2 * np.pi, size=n)
    s = np.sqrt(rng.random(n))           # density grows linearly from the apex
    pts = np.empty((n, 3))
    m = ~on_base
    pts[m] = np.stack([radius * s[m] * np.cos(theta[m]),
                       radius * s[m] * np.sin(theta[m]),
                       height * (1.0 - s[m])], axis=1)
    pts[on_base] = np.stack([radius * s[on_base] * np.cos(theta[on_base]),
                             radius * s[on_base] * np.sin(theta[on_base]),
                             np.zeros(int(on_base.sum()))], axis=1)
    return pts


_SAMPLERS = {
    "sphere": lambda rng, n, p: _sample_sphere(rng, n, p["radius"]),
    "box": lambda rng, n, p: _sample_box(rng, n, p["half_x"], p["half_y"], p["half_z"]),
    "torus": lambda rng, n, p: _sample_torus(rng, n, p["major"], p["minor"]),
    "cylinder": lambda rng, n, p: _sample_cylinder(rng, n, p["radius"], p["half_height"]),
    "cone": lambda rng, n, p: _sample_cone(rng, n, p["radius"], p["height"]),
}


def sample_shape(spec: SyntheticShapeSpec, n: int = 8192) -> PointCloud:
    """Surface-sample a spec; bit-identical for identical (spec, n)."""
    rng = np.random.default_rng(spec.seed)
    pts = _SAMPLERS[spec.category](rng, n, spec.params)
    if spec.jitter > 0:
        pts = pts + rng.normal(0.0, spec.jitter, size=pts.shape)
    pc = normalize_unit_cube(PointCloud(pts, label=CATEGORIES.index(spec.category)))
    return pc


# -- dataset assembly --------------------------------------------------------

@dataclass
class DatasetSplit:
    clouds: list
    labels: np.ndarray
    prompts: list
    paths: list


def _spec_for(seed, category, index, jitter):
    label = CATEGORIES.index(category)
    ss = np.random.SeedSequence(seed, spawn_key=(label, index))
    rng = np.random.default_rng(ss)
    spec = random_spec(category, rng, jitter)
    return spec


def gen_dataset(root, n_per_class: int, seed: int, n_points: int = 8192,
                jitter: float = DEFAULT_JITTER) -> dict:
    """Write PLY files, train/val manifests (90/10 per class), and a report
    with per-file content hashes.  Returns the report dict."""
    root = str(root)
    os.makedirs(os.path.join(root, "shapes"), exist_ok=True)
    n_val = max(1, round(0.1 * n_per_class)) if n_per_class > 1 else 0
    manifests = {"train": [], "val": []}
    hashes = {}
    for category in CATEGORIES:
        for i in range(n_per_class):
            spec = _spec_for(seed, category, i, jitter)
            pc = sample_shape(spec, n_points)
            rel = os.path.join("shapes", f"{category}_{i:04d}.ply")
            io.write_ply(os.path.join(root, rel), pc)
            with open(os.path.join(root, rel), "rb") as f:
                hashes[rel] = hashlib.sha1(f.read()).hexdigest()
            split = "val" if i >= n_per_class - n_val else "train"
            label = CATEGORIES.index(category)
            manifests[split].append(f"{rel}\t{label}\t{make_prompt(category)}")
    for split, lines in manifests.items():
        with open(os.path.join(root, f"{split}.tsv"), "w") as f:
            f.write("\n".join(lines) + ("\n" if lines else ""))
    report = {
        "seed": seed,
        "n_per_class": n_per_class,
        "n_points": n_points,
        "jitter": jitter,
        "categories": list(CATEGORIES),
        "counts": {s: len(l) for s, l in manifests.items()},
        "file_sha1": hashes,
    }
    with open(os.path.join(root, "dataset_report.json"), "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
    return report


def load_split(root, split: str) -> DatasetSplit:
    path = os.path.join(str(root), f"{split}.tsv")
    clouds, labels, prompts, paths = [], [], [], []
    with open(path) as f:
        for line in f:
            line = line.rstrip("\n")
            if not line:
                continue
            rel, label, prompt = line.split("\t")
            pc = io.read_ply(os.path.join(str(root), rel))
            pc.label = int(label)
            clouds.append(pc)
            labels.append(int(label))
            prompts.append(prompt)
            paths.append(rel)
    return DatasetSplit(clouds, np.array(labels, dtype=np.int64), prompts, paths)
