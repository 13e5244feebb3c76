"""Patch-based point-cloud densification.

A sparse cloud is carved into local patches (farthest-point-sampled
centers, k-nearest neighborhoods in center-relative coordinates).  Two
models cooperate:

* :class:`PointPatchTeacher` — a masked patch autoencoder.  Each patch is
  embedded by a shared per-point MLP with max-pooling (so the embedding is
  invariant to point order inside the patch), combined with a positional
  encoding of the patch center, and processed by a bidirectional
  Transformer; a folding head conditioned on the patch feature displaces
  a small disc spanned by a fixed 2-D lattice of seeds into reconstructed
  points.  Training masks a fixed fraction of patches and minimizes
  per-patch Chamfer distance on the masked ones, against targets that
  start slightly jittered and anneal to exact (see ``target_jitter``).
  The frozen encoder then serves as a feature provider (``tokenize``)
  and its folding head as a point emitter.
* :class:`PointUpsampler` — a masked Transformer that regresses the
  teacher's per-patch features.  During training some patches are visible;
  at inference every patch is masked, so features are predicted from patch
  *positions* alone — exactly the situation after coarse generation, where
  only coordinates exist.  Predicted features drive a frozen copy of the
  teacher's folding head, evaluated on a denser seed lattice, emitting
  ``patch_size * upsample_factor`` points per patch and therefore exactly
  ``n_patches * patch_size * upsample_factor`` points overall.

Positional encodings are computed from centroid-centered patch centers, so
translating the input translates the output, point for point.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ..autodiff import (AdamW, AttentionBlock, LayerNorm, Linear, MLP,
                        ParameterStore, Tensor, WarmupCosineSchedule, cat,
                        gelu, index_select, no_grad, trunc_normal)
from ..geometry import PointCloud, fps, knn
from ..geometry.pointcloud import as_points
from .base import StoreModelMixin
from .generator import sample_mask_ratio

__all__ = ["PatchSet", "PointPatchTeacher", "PointUpsampler", "fold_seeds",
           "patchify", "upsampler_loss"]


# -- patch construction ------------------------------------------------------

@dataclass
class PatchSet:
    """Local patches of one cloud: ``centers`` (G, 3) and ``neighborhoods``
    (G, K, 3) in center-relative coordinates."""

    centers: np.ndarray
    neighborhoods: np.ndarray

    def __post_init__(self):
        c = np.ascontiguousarray(self.centers, dtype=np.float32)
        n = np.ascontiguousarray(self.neighborhoods, dtype=np.float32)
        if c.ndim != 2 or c.shape[1] != 3 or len(c) < 1:
            raise ValueError(f"centers must be (G, 3), got {c.shape}")
        if n.ndim != 3 or n.shape[0] != len(c) or n.shape[2] != 3 or n.shape[1] < 1:
            raise ValueError(f"neighborhoods must be (G, K, 3) with G={len(c)}, "
                             f"got {n.shape}")
        if not (np.isfinite(c).all() and np.isfinite(n).all()):
            raise ValueError("patches must be finite")
        self.centers = c
        self.neighborhoods = n

    @property
    def n_patches(self) -> int:
        return len(self.centers)

    @property
    def patch_size(self) -> int:
        return self.neighborhoods.shape[1]


def patchify(pc, n_patches: int = 32, patch_size: int = 32,
             seed: int = 0) -> PatchSet:
    """Split a cloud into ``n_patches`` local neighborhoods.

    Centers are farthest-point samples (the seed picks the starting
    index); each neighborhood holds the ``patch_size`` nearest points in
    coordinates relative to its center.  Requires at least
    ``max(n_patches, patch_size)`` points.
    """
    pts = np.ascontiguousarray(as_points(pc), dtype=np.float32)
    n = len(pts)
    if n < int(n_patches):
        raise ValueError(f"need at least {n_patches} points to place "
                         f"{n_patches} patch centers, got {n}")
    if int(patch_size) > n:
        raise ValueError(f"patch_size {patch_size} exceeds cloud size {n}")
    start = int(np.random.default_rng(seed).integers(n))
    centers = pts[fps(pts, int(n_patches), start=start)]
    nbr = knn(centers, pts, int(patch_size))
    return PatchSet(centers, pts[nbr.indices] - centers[:, None, :])


def fold_seeds(m: int) -> np.ndarray:
    """Deterministic low-discrepancy lattice of ``m`` 2-D seeds in
    [-1, 1]^2 (golden-ratio sequence), the domain the folding head maps
    onto each patch.  Any ``m`` yields an evenly spread set, which is what
    lets one head emit patches at different densities."""
    if m < 1:
        raise ValueError("need at least one seed")
    i = np.arange(int(m), dtype=np.float64) + 0.5
    u = i / m
    v = (i * ((np.sqrt(5.0) - 1.0) / 2.0)) % 1.0
    return (np.stack([u, v], axis=1) * 2.0 - 1.0).astype(np.float32)


# -- losses ------------------------------------------------------------------

def _patch_chamfer(pred, true_local: np.ndarray):
    """Mean symmetric Chamfer distance over same-size patch pairs.

    ``pred`` is (P, K, 3), Tensor or array; ``true_local`` is (P, K, 3)
    array.  Matches averaging :func:`~voxpoint.geometry.chamfer_l1` over
    the P patch pairs; nearest-neighbor assignment is resolved in numpy so
    only selected distances carry gradient.
    """
    true_local = np.asarray(true_local)
    p_arr = pred.data if isinstance(pred, Tensor) else np.asarray(pred)
    if p_arr.shape != true_local.shape or p_arr.ndim != 3:
        raise ValueError(f"patch sets must share a (P, K, 3) shape, got "
                         f"{p_arr.shape} vs {true_local.shape}")
    n_patch, k, _ = true_local.shape
    diff = p_arr[:, :, None, :].astype(np.float64) - true_local[:, None, :, :]
    d2 = (diff * diff).sum(-1)                      # (P, K_pred, K_true)
    i_ab = d2.argmin(axis=2)                        # nearest true per pred point
    i_ba = d2.argmin(axis=1)                        # nearest pred per true point
    if not isinstance(pred, Tensor):
        da = np.sqrt(np.take_along_axis(d2, i_ab[:, :, None], 2)[..., 0])
        db = np.sqrt(np.take_along_axis(d2, i_ba[:, None, :], 1)[:, 0, :])
        return float(da.mean(axis=1).mean() + db.mean(axis=1).mean())
    nearest_true = np.take_along_axis(true_local, i_ab[..., None], axis=1)
    d_a = pred - Tensor(nearest_true.astype(p_arr.dtype))
    side_a = ((d_a * d_a).sum(axis=2) + 1e-12).sqrt().mean(axis=1)
    flat = pred.reshape(n_patch * k, 3)
    rows = (np.arange(n_patch)[:, None] * k + i_ba).reshape(-1)
    gathered = index_select(flat, rows).reshape(n_patch, k, 3)
    d_b = gathered - Tensor(true_local.astype(p_arr.dtype))
    side_b = ((d_b * d_b).sum(axis=2) + 1e-12).sqrt().mean(axis=1)
    return (side_a + side_b).mean()


def upsampler_loss(pred_feats, target_feats, *, decoded=None,
                   local_targets=None, lambda_decoder: float = 1.0) -> dict:
    """Feature-regression loss with an optional decoded-patch term.

    ``feature`` is the mean over patches of ``1 - cosine(pred, target)``
    (zero exactly when predictions match the targets up to positive
    scale).  ``decoder`` is the mean per-patch Chamfer distance between
    ``decoded`` points and ``local_targets`` (``None`` when no decoded
    patches are supplied).  ``total`` is ``feature + lambda_decoder *
    decoder``; with ``lambda_decoder=0`` the total IS the feature
    component, exactly.  Entries are Tensors when the predictions are
    Tensors, floats otherwise.
    """
    t_arr = np.asarray(target_feats, dtype=np.float64)
    if t_arr.ndim != 2 or len(t_arr) < 1:
        raise ValueError(f"target features must be (P, D), got {t_arr.shape}")
    t_unit = t_arr / np.maximum(np.linalg.norm(t_arr, axis=1, keepdims=True),
                                1e-12)
    lam = float(lambda_decoder)
    if isinstance(pred_feats, Tensor):
        if pred_feats.shape != t_arr.shape:
            raise ValueError(f"feature shapes differ: {pred_feats.shape} vs "
                             f"{t_arr.shape}")
        norm = ((pred_feats * pred_feats).sum(axis=1, keepdims=True)
                + 1e-12).sqrt()
        cos = ((pred_feats / norm) * Tensor(t_unit.astype(pred_feats.data.dtype))
               ).sum(axis=1)
        feat = (1.0 - cos).mean()
    else:
        p_arr = np.asarray(pred_feats, dtype=np.float64)
        if p_arr.shape != t_arr.shape:
            raise ValueError(f"feature shapes differ: {p_arr.shape} vs "
                             f"{t_arr.shape}")
        p_unit = p_arr / np.maximum(
            np.linalg.norm(p_arr, axis=1, keepdims=True), 1e-12)
        feat = float((1.0 - (p_unit * t_unit).sum(axis=1)).mean())
    dec = None
    if decoded is not None:
        if local_targets is None:
            raise ValueError("decoded patches need local_targets")
        dec = _patch_chamfer(decoded, local_targets)
    if lam == 0.0:
        total = feat
    else:
        if dec is None:
            raise ValueError("lambda_decoder > 0 requires decoded patches "
                             "and local_targets")
        total = feat + dec * lam
    return {"feature": feat, "decoder": dec, "total": total}


# -- shared encoder backbone -------------------------------------------------

class _PatchBackbone:
    """Patch-token Transformer shared by teacher and upsampler: per-point
    embedding MLP with max-pool, positional MLP over centroid-centered
    patch centers, a learned placeholder token for masked patches."""

    def _build_backbone(self, store: ParameterStore, prefix: str, rng) -> None:
        dim = int(self.dim)
        self.embed_ = MLP(store, f"{prefix}.embed", (3, 64, dim), rng)
        self.pe_ = MLP(store, f"{prefix}.pe", (3, 64, dim), rng)
        self.mask_token_ = store.add(
            f"{prefix}.masktok", Tensor(trunc_normal(rng, (dim,)),
                                        requires_grad=True))
        self.blocks_ = [AttentionBlock(store, f"{prefix}.block{i}", dim,
                                       int(self.heads), rng)
                        for i in range(int(self.layers))]
        self.norm_ = LayerNorm(store, f"{prefix}.norm", dim)

    def _encode_tokens(self, neigh: np.ndarray, centers: np.ndarray,
                       visible) -> Tensor:
        """(B, G, K, 3) local patches + (B, G, 3) centers -> (B, G, dim).

        ``visible`` is a (B, G) boolean mask — masked patches contribute
        only their position — or ``None`` for all-visible encoding.
        """
        emb = self.embed_(Tensor(neigh.astype(np.float32))).max(axis=2)
        centered = centers - centers.mean(axis=1, keepdims=True)
        pe = self.pe_(Tensor(centered.astype(np.float32)))
        if visible is None:
            h = emb + pe
        else:
            vis = np.asarray(visible, dtype=np.float32)[..., None]
            h = emb * Tensor(vis) + self.mask_token_ * Tensor(1.0 - vis) + pe
        for blk in self.blocks_:
            h = blk(h)
        return self.norm_(h)


# The folding head sees each 2-D seed both raw and through a few sine/
# cosine harmonics: matching a discrete set of target points requires the
# fold to bend sharply between seeds, which a plain coordinate input makes
# needlessly hard.  The head's output displaces a small disc spanned by
# the seed lattice, so an untrained decode is already spread over a
# patch-sized footprint instead of collapsed at one point — spread starts
# escape the many-to-one nearest-neighbor assignments that stall Chamfer
# training from a collapsed start.
_SEED_FREQS = (1.0, 2.0, 4.0)
_SEED_DIM = 2 + 4 * len(_SEED_FREQS)
_FOLD_BASE_SCALE = 0.1


def _seed_table(m: int):
    """Lifted seed coordinates (m, 2 + 4F) and the disc base offset (m, 3)
    added to every fold output."""
    seeds = fold_seeds(m)
    cols = [seeds]
    for f in _SEED_FREQS:
        cols.append(np.sin(np.pi * f * seeds))
        cols.append(np.cos(np.pi * f * seeds))
    lifted = np.concatenate(cols, axis=1).astype(np.float32)
    base = np.concatenate([seeds, np.zeros((m, 1), dtype=np.float32)],
                          axis=1) * np.float32(_FOLD_BASE_SCALE)
    return lifted, base


def _tile_with_seeds(feats: Tensor, m: int) -> Tensor:
    """(P, D) features -> (P, m, D + seed dims): each feature repeated per
    seed and concatenated with that seed's lifted coordinates."""
    lifted, _ = _seed_table(m)
    n_patch, dim = feats.shape
    tiled = feats.reshape(n_patch, 1, dim) * Tensor(
        np.ones((1, m, 1), dtype=feats.data.dtype))
    seeds = np.broadcast_to(lifted[None], (n_patch, m, lifted.shape[1]))
    return cat([tiled, Tensor(np.ascontiguousarray(
        seeds, dtype=feats.data.dtype))], axis=2)


def _frozen_fold(store: ParameterStore, prefix: str, feats: Tensor,
                 m: int) -> Tensor:
    """Run a stored folding head with its weights held constant, so no
    gradient reaches them; the feature input stays differentiable."""
    x = _tile_with_seeds(feats, m)
    i = 0
    while f"{prefix}.{i}.w" in store:
        w = Tensor(store[f"{prefix}.{i}.w"].data)
        b = Tensor(store[f"{prefix}.{i}.b"].data)
        x = x @ w + b
        if f"{prefix}.{i + 1}.w" in store:
            x = gelu(x)
        i += 1
    if i == 0:
        raise ValueError(f"no folding head stored under {prefix!r}")
    return x + Tensor(_seed_table(m)[1][None])


# -- teacher -----------------------------------------------------------------

class PointPatchTeacher(StoreModelMixin, _PatchBackbone, BaseEstimator):
    """Masked patch autoencoder whose frozen encoder provides per-patch
    features and whose folding head emits points from features.

    Parameters
    ----------
    n_patches, patch_size : patch layout (defaults 32/256, covering a
        dense 8192-point cloud exactly).  When the teacher feeds a
        :class:`PointUpsampler`, ``patch_size`` must equal the
        upsampler's ``patch_size * upsample_factor`` so the folding head
        is trained at exactly the footprint and density it will be asked
        to emit.
    dim, layers, heads : Transformer width/depth (defaults 192/4/6).
    dec_hidden : folding-head width.
    mask_ratio : fraction of patches hidden per step; 0 turns training
        into plain reconstruction of every patch (sanity mode).
    target_jitter : starting scale of Gaussian noise added to the Chamfer
        targets, annealed linearly to zero over the first 60% of training.
        Per-step target perturbation reshuffles nearest-neighbor
        assignments, which otherwise freeze into many-to-one matchings
        that stall the Chamfer loss well above its floor; by the end the
        targets are exact.  0 disables.
    steps, batch_size, lr, weight_decay, warmup_steps : optimization.
    snapshot_every : steps between rollback snapshots; a non-finite
        forward or loss restores the last snapshot and stops.
    seed : init, patching, and masking randomness.
    """

    _prefix = "teacher"

    def __init__(self, n_patches=32, patch_size=256, dim=192, layers=4,
                 heads=6, dec_hidden=192, mask_ratio=0.6, target_jitter=0.02,
                 steps=2000, batch_size=8, lr=1e-3, weight_decay=1e-4,
                 warmup_steps=100, snapshot_every=200, seed=0):
        self.n_patches = n_patches
        self.patch_size = patch_size
        self.dim = dim
        self.layers = layers
        self.heads = heads
        self.dec_hidden = dec_hidden
        self.mask_ratio = mask_ratio
        self.target_jitter = target_jitter
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.warmup_steps = warmup_steps
        self.snapshot_every = snapshot_every
        self.seed = seed

    # -- construction --------------------------------------------------------

    def _build(self, rng):
        store = ParameterStore()
        self._build_backbone(store, self._prefix, rng)
        hid = int(self.dec_hidden)
        self.dec_ = MLP(store, f"{self._prefix}.dec",
                        (int(self.dim) + _SEED_DIM, hid, hid, 3), rng)
        self.params_ = store
        self.diverged_ = False

    def _fold(self, feats: Tensor, m: int) -> Tensor:
        """Decode ``m`` points per patch from (P, dim) patch features."""
        return self.dec_(_tile_with_seeds(feats, m)) + Tensor(
            _seed_table(m)[1][None])

    # -- loss ----------------------------------------------------------------

    def _reconstruction_loss(self, neigh: np.ndarray, centers: np.ndarray,
                             visible: np.ndarray, targets=None) -> Tensor:
        """Mean per-patch Chamfer distance of decoded patches.  Decoding
        targets the hidden patches, or every patch when none are hidden;
        ``targets`` substitutes the Chamfer targets (e.g. jittered copies
        of ``neigh``) without changing what the encoder sees."""
        h = self._encode_tokens(neigh, centers, visible)
        bsz, g, dim = h.shape
        flat_idx = np.flatnonzero(~visible.reshape(-1))
        if flat_idx.size == 0:
            flat_idx = np.arange(bsz * g)
        sel = index_select(h.reshape(bsz * g, dim), flat_idx)
        decoded = self._fold(sel, neigh.shape[2])
        if targets is None:
            targets = neigh
        true_local = targets.reshape(bsz * g, neigh.shape[2], 3)[flat_idx]
        return _patch_chamfer(decoded, true_local)

    # -- data plumbing -------------------------------------------------------

    def _patch_arrays(self, X):
        sets = [patchify(pc, int(self.n_patches), int(self.patch_size),
                         seed=i) for i, pc in enumerate(X)]
        return (np.stack([p.neighborhoods for p in sets]),
                np.stack([p.centers for p in sets]))

    # -- estimator API -------------------------------------------------------

    def fit(self, X, y=None):
        """Train on point clouds (arrays or :class:`PointCloud`); each must
        have at least ``max(n_patches, patch_size)`` points."""
        if len(X) == 0:
            raise ValueError("need at least one training cloud")
        ratio = float(self.mask_ratio)
        if not 0.0 <= ratio < 1.0:
            raise ValueError(f"mask_ratio must lie in [0, 1), got {ratio}")
        jitter0 = float(self.target_jitter)
        if jitter0 < 0.0:
            raise ValueError(f"target_jitter must be >= 0, got {jitter0}")
        neigh_all, cent_all = self._patch_arrays(X)
        g = int(self.n_patches)
        n_mask = int(np.ceil(ratio * g))

        rng = np.random.default_rng(self.seed)
        self._build(rng)
        steps = int(self.steps)
        opt = AdamW(self.params_, weight_decay=self.weight_decay,
                    schedule=WarmupCosineSchedule(
                        self.lr, steps, min(int(self.warmup_steps), steps - 1)))

        order = rng.permutation(len(X))
        pos = 0
        bsz = min(int(self.batch_size), len(X))
        snapshot = self.params_.state_copy()
        history = []
        self.diverged_ = False

        for step in range(1, steps + 1):
            if pos + bsz > len(X):
                order = rng.permutation(len(X))
                pos = 0
            take = order[pos:pos + bsz]
            pos += bsz

            visible = np.ones((bsz, g), dtype=bool)
            for row in range(bsz):
                if n_mask:
                    visible[row, rng.choice(g, n_mask, replace=False)] = False
            neigh = neigh_all[take]
            sigma = jitter0 * max(0.0, 1.0 - step / (0.6 * steps))
            targets = None if sigma == 0.0 else (
                neigh + rng.normal(0.0, sigma, neigh.shape)).astype(np.float32)
            loss = self._reconstruction_loss(neigh, cent_all[take], visible,
                                             targets)
            opt.zero_grad()
            loss.backward()
            opt.step()

            row = {"step": step, "loss": float(loss.item()),
                   "mask_frac": n_mask / g}
            if not np.isfinite(row["loss"]):
                self.params_.load_state(snapshot)
                self.diverged_ = True
                break
            history.append(row)
            if step % max(1, int(self.snapshot_every)) == 0:
                snapshot = self.params_.state_copy()

        self.history_ = history
        self.n_steps_ = len(history)
        return self

    def features(self, patches: PatchSet) -> np.ndarray:
        """Per-patch feature matrix (G, dim) from the frozen encoder; the
        patch set may use any layout (G, K)."""
        check_is_fitted(self)
        with no_grad():
            h = self._encode_tokens(patches.neighborhoods[None],
                                    patches.centers[None], None)
        out = h.data[0]
        if not np.isfinite(out).all():
            raise FloatingPointError("teacher produced non-finite features")
        return out.copy()

    def tokenize(self, pc, seed: int = 0) -> np.ndarray:
        """Features of a cloud under this teacher's patch layout."""
        check_is_fitted(self)
        return self.features(patchify(pc, int(self.n_patches),
                                      int(self.patch_size), seed=seed))

    # -- persistence ---------------------------------------------------------

    def _extra_state(self):
        return {"diverged": bool(self.diverged_)}

    def _restore(self, store, extra):
        self._build(np.random.default_rng(self.seed))
        self.params_.load_state(store.state_copy())
        self.diverged_ = bool(extra.get("diverged", False))
        self.history_ = []
        self.n_steps_ = 0


# -- upsampler ---------------------------------------------------------------

class PointUpsampler(StoreModelMixin, _PatchBackbone, BaseEstimator):
    """Masked patch Transformer that densifies a fixed-size sparse cloud.

    Training clouds are dense; each is farthest-point downsampled to
    ``n_sparse`` points, and that sparse version is patchified to give
    the encoder its input (``patch_size`` points per patch) and the patch
    centers.  Targets live on the *dense* geometry: at each sparse center
    the ``patch_size * upsample_factor`` nearest dense points form the
    reference patch, the frozen teacher's features of those dense patches
    are regressed at masked positions (cosine loss), and with weight
    ``lambda_decoder`` the predicted features are pushed through the
    frozen folding head at that same density and scored against the dense
    patch with Chamfer distance — the exact decode that inference
    performs.  This is why the teacher's ``patch_size`` must equal
    ``patch_size * upsample_factor``: the folding head only knows how to
    emit patches of the footprint and density it was trained on.

    The teacher's folding head is copied into this estimator's parameter
    store at ``fit`` time, so a saved checkpoint upsamples without the
    teacher object.  Inference masks every patch: features are predicted
    from patch positions alone and folded into ``patch_size *
    upsample_factor`` points per patch.

    Parameters
    ----------
    n_sparse : exact input cloud size accepted by :meth:`upsample`.
    n_patches, patch_size, upsample_factor : output layout — the dense
        cloud always has ``n_patches * patch_size * upsample_factor``
        points (32 * 32 * 8 = 8192 by default).
    dim, layers, heads : Transformer width/depth (defaults 192/4/6).
    feat_dim, dec_hidden : must equal the teacher's ``dim``/``dec_hidden``.
    lambda_decoder : weight of the decoded-patch Chamfer term.
    steps, batch_size, lr, weight_decay, warmup_steps : optimization.
    snapshot_every : rollback snapshot cadence.
    seed : init, patching, and masking randomness.
    """

    _prefix = "upsampler"

    def __init__(self, n_sparse=1024, n_patches=32, patch_size=32,
                 upsample_factor=8, dim=192, layers=4, heads=6, feat_dim=192,
                 dec_hidden=192, lambda_decoder=1.0, steps=3000, batch_size=8,
                 lr=1e-3, weight_decay=1e-4, warmup_steps=100,
                 snapshot_every=200, seed=0):
        self.n_sparse = n_sparse
        self.n_patches = n_patches
        self.patch_size = patch_size
        self.upsample_factor = upsample_factor
        self.dim = dim
        self.layers = layers
        self.heads = heads
        self.feat_dim = feat_dim
        self.dec_hidden = dec_hidden
        self.lambda_decoder = lambda_decoder
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.warmup_steps = warmup_steps
        self.snapshot_every = snapshot_every
        self.seed = seed

    @property
    def n_dense(self) -> int:
        """Output cardinality: patches x points per patch x factor."""
        return int(self.n_patches) * int(self.patch_size) * int(self.upsample_factor)

    # -- construction --------------------------------------------------------

    def _build(self, rng):
        store = ParameterStore()
        self._build_backbone(store, self._prefix, rng)
        self.head_ = Linear(store, f"{self._prefix}.head", int(self.dim),
                            int(self.feat_dim), rng)
        # placeholders for the teacher folding head, overwritten at fit
        # time and never optimized (no gradient is ever built into them)
        hid = int(self.dec_hidden)
        shapes = [(int(self.feat_dim) + _SEED_DIM, hid), (hid, hid), (hid, 3)]
        for i, (d_in, d_out) in enumerate(shapes):
            store.add(f"{self._prefix}.dec.{i}.w",
                      Tensor(np.zeros((d_in, d_out), dtype=np.float32)))
            store.add(f"{self._prefix}.dec.{i}.b",
                      Tensor(np.zeros(d_out, dtype=np.float32)))
        self.params_ = store
        self.diverged_ = False

    def _adopt_decoder(self, teacher: PointPatchTeacher) -> None:
        for i in range(3):
            for leaf in ("w", "b"):
                src = teacher.params_[f"teacher.dec.{i}.{leaf}"].data
                dst = self.params_[f"{self._prefix}.dec.{i}.{leaf}"]
                if src.shape != dst.data.shape:
                    raise ValueError(
                        f"teacher folding head {src.shape} does not fit "
                        f"dec_hidden={self.dec_hidden}/feat_dim={self.feat_dim}")
                dst.data = src.astype(np.float32).copy()

    # -- loss ----------------------------------------------------------------

    def _regression_loss(self, neigh: np.ndarray, centers: np.ndarray,
                         visible: np.ndarray, target_feats: np.ndarray,
                         dense_neigh: np.ndarray = None) -> dict:
        """Feature + decoded-patch loss record over the hidden patches.

        ``neigh`` holds the sparse patches the encoder sees;
        ``dense_neigh`` the dense reference patches (B, G, K * factor, 3)
        that decoded points are scored against.
        """
        h = self._encode_tokens(neigh, centers, visible)
        bsz, g, dim = h.shape
        flat_idx = np.flatnonzero(~visible.reshape(-1))
        pred = index_select(
            self.head_(h).reshape(bsz * g, int(self.feat_dim)), flat_idx)
        targets = target_feats.reshape(bsz * g, -1)[flat_idx]
        decoded = local = None
        if float(self.lambda_decoder) != 0.0:
            if dense_neigh is None:
                raise ValueError("lambda_decoder > 0 needs dense reference "
                                 "patches")
            m = dense_neigh.shape[2]
            decoded = _frozen_fold(self.params_, f"{self._prefix}.dec", pred, m)
            local = dense_neigh.reshape(bsz * g, m, 3)[flat_idx]
        return upsampler_loss(pred, targets, decoded=decoded,
                              local_targets=local,
                              lambda_decoder=self.lambda_decoder)

    # -- data plumbing -------------------------------------------------------

    def _sparsify(self, pc) -> np.ndarray:
        pts = np.ascontiguousarray(as_points(pc), dtype=np.float32)
        n = int(self.n_sparse)
        if len(pts) < n:
            raise ValueError(f"training clouds need at least {n} points, "
                             f"got {len(pts)}")
        return pts if len(pts) == n else pts[fps(pts, n)]

    # -- estimator API -------------------------------------------------------

    def fit(self, X, y=None, *, teacher: PointPatchTeacher):
        """Train against a fitted teacher on dense point clouds of at
        least ``n_sparse`` points; each is farthest-point downsampled to
        the sparse input the encoder sees, while teacher targets and
        decode references keep the full dense geometry.
        """
        if len(X) == 0:
            raise ValueError("need at least one training cloud")
        if not isinstance(teacher, PointPatchTeacher):
            raise ValueError("teacher must be a PointPatchTeacher")
        check_is_fitted(teacher)
        if int(teacher.dim) != int(self.feat_dim):
            raise ValueError(f"feat_dim {self.feat_dim} != teacher dim "
                             f"{teacher.dim}")
        g, k = int(self.n_patches), int(self.patch_size)
        k_dense = k * int(self.upsample_factor)
        if int(teacher.patch_size) != k_dense:
            raise ValueError(
                f"teacher patch_size {teacher.patch_size} != patch_size * "
                f"upsample_factor = {k_dense}; the folding head must be "
                f"trained at the footprint and density it emits")

        sparse_sets, dense_parts = [], []
        for i, pc in enumerate(X):
            dense_pts = np.ascontiguousarray(as_points(pc), dtype=np.float32)
            if len(dense_pts) < k_dense:
                raise ValueError(f"training clouds need at least {k_dense} "
                                 f"points for dense reference patches, got "
                                 f"{len(dense_pts)}")
            sp = patchify(self._sparsify(dense_pts), g, k, seed=i)
            sparse_sets.append(sp)
            nbr = knn(sp.centers, dense_pts, k_dense)
            dense_parts.append(dense_pts[nbr.indices] - sp.centers[:, None, :])
        neigh_all = np.stack([p.neighborhoods for p in sparse_sets])
        cent_all = np.stack([p.centers for p in sparse_sets])
        dense_all = np.stack(dense_parts)
        feat_all = np.stack([
            teacher.features(PatchSet(p.centers, dn))
            for p, dn in zip(sparse_sets, dense_parts)])

        rng = np.random.default_rng(self.seed)
        self._build(rng)
        self._adopt_decoder(teacher)
        steps = int(self.steps)
        opt = AdamW(self.params_, weight_decay=self.weight_decay,
                    schedule=WarmupCosineSchedule(
                        self.lr, steps, min(int(self.warmup_steps), steps - 1)))

        order = rng.permutation(len(X))
        pos = 0
        bsz = min(int(self.batch_size), len(X))
        snapshot = self.params_.state_copy()
        history = []
        self.diverged_ = False

        for step in range(1, steps + 1):
            if pos + bsz > len(X):
                order = rng.permutation(len(X))
                pos = 0
            take = order[pos:pos + bsz]
            pos += bsz

            visible = np.ones((bsz, g), dtype=bool)
            for row in range(bsz):
                n_mask = int(np.ceil(sample_mask_ratio(rng) * g))
                visible[row, rng.choice(g, n_mask, replace=False)] = False
            rec = self._regression_loss(neigh_all[take], cent_all[take],
                                        visible, feat_all[take],
                                        dense_all[take])
            loss = rec["total"]
            opt.zero_grad()
            loss.backward()
            opt.step()

            row = {"step": step, "feature": float(rec["feature"].item()),
                   "decoder": (0.0 if rec["decoder"] is None
                               else float(rec["decoder"].item())),
                   "total": float(loss.item()),
                   "mask_frac": float((~visible).mean())}
            if not all(np.isfinite(v) for v in row.values()):
                self.params_.load_state(snapshot)
                self.diverged_ = True
                break
            history.append(row)
            if step % max(1, int(self.snapshot_every)) == 0:
                snapshot = self.params_.state_copy()

        self.history_ = history
        self.n_steps_ = len(history)
        return self

    def upsample(self, pc, seed: int = 0) -> PointCloud:
        """Densify one cloud of exactly ``n_sparse`` points into
        ``n_patches * patch_size * upsample_factor`` points.

        Every patch is treated as masked — predictions use patch positions
        only — and the frozen folding head emits each patch's points
        around its center.  Output order is patch-major, deterministic for
        a given seed.  The label, when present, is carried over.
        """
        check_is_fitted(self)
        pts = as_points(pc)
        if len(pts) != int(self.n_sparse):
            raise ValueError(f"upsampler is configured for exactly "
                             f"{self.n_sparse} input points, got {len(pts)}")
        g, k = int(self.n_patches), int(self.patch_size)
        patches = patchify(pts, g, k, seed=seed)
        visible = np.zeros((1, g), dtype=bool)
        with no_grad():
            h = self._encode_tokens(patches.neighborhoods[None],
                                    patches.centers[None], visible)
            pred = self.head_(h.reshape(g, int(self.dim)))
            folded = _frozen_fold(self.params_, f"{self._prefix}.dec", pred,
                                  k * int(self.upsample_factor))
        dense = (patches.centers[:, None, :] + folded.data).reshape(-1, 3)
        if not np.isfinite(dense).all():
            raise FloatingPointError("upsampler produced non-finite points")
        label = pc.label if isinstance(pc, PointCloud) else None
        return PointCloud(dense, label=label)

    def predict(self, X) -> list:
        return [self.upsample(pc) for pc in X]

    # -- persistence ---------------------------------------------------------

    def _extra_state(self):
        return {"diverged": bool(self.diverged_)}

    def _restore(self, store, extra):
        self._build(np.random.default_rng(self.seed))
        self.params_.load_state(store.state_copy())
        self.diverged_ = bool(extra.get("diverged", False))
        self.history_ = []
        self.n_steps_ = 0
