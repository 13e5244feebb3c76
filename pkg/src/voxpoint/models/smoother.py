"""Point-cloud smoother: a small permutation-equivariant Transformer that
nudges blocky voxel-surface samples toward a smooth, evenly spread cloud.

Tokens are per-point features of the 3D coordinates alone — no sequence
positional encoding — so reordering the input reorders the output and
nothing else.  The input head lifts each coordinate through a fixed bank of
sinusoids (frequencies 1, 2, 4, 8 cycles per unit cube) before projecting
to the hidden width; raw coordinates through a single linear layer train an
order of magnitude slower on displacement-field fitting.  The displacement
head starts at zero, making the untrained smoother the identity map.
Training minimizes symmetric Chamfer distance to a farthest-point-sampled
target cloud plus a weighted spacing-uniformity penalty (KL of the
per-point mean-kNN-distance distribution against uniform); both components
are reported every step.

Inputs are canonically ordered (lexicographic sort) before the network runs
and restored after, so permutation equivariance holds bitwise even though
float summation inside matrix products is order-sensitive.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ..autodiff import (AdamW, AttentionBlock, LayerNorm, Linear,
                        ParameterStore, Tensor, WarmupCosineSchedule, no_grad)
from ..geometry import PointCloud, chamfer_l1, fps, uniform_kl
from ..geometry.pointcloud import as_points
from .base import StoreModelMixin

__all__ = ["GridSmoother", "smoother_loss"]


def _canonical_order(pts: np.ndarray) -> np.ndarray:
    """Lexicographic point order (x, then y, then z); ties keep input order."""
    return np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0]))


_FREQS = (2.0 * np.pi * np.array([1.0, 2.0, 4.0, 8.0])).astype(np.float32)
_FEATURE_DIM = 3 + 3 * 2 * len(_FREQS)


def _point_features(pts: np.ndarray) -> np.ndarray:
    """Per-point sinusoidal lift: [xyz, sin(2pi f xyz), cos(2pi f xyz)]."""
    ang = pts[..., None] * _FREQS
    s = np.sin(ang).reshape(*pts.shape[:-1], -1)
    c = np.cos(ang).reshape(*pts.shape[:-1], -1)
    return np.concatenate([pts, s, c], axis=-1).astype(np.float32)


def smoother_loss(smoothed, target, *, lambda_uniform: float = 1.0,
                  knn_k: int = 8) -> dict:
    """Chamfer-to-target plus weighted spacing-uniformity penalty.

    Returns ``{"chamfer", "uniform", "total"}``; entries are scalar Tensors
    when ``smoothed`` is a Tensor, floats otherwise.  With
    ``lambda_uniform=0`` the total IS the Chamfer component (no zero-scaled
    term is added, so the equality is exact).
    """
    cd = chamfer_l1(smoothed, target)
    uni = uniform_kl(smoothed, knn_k)
    lam = float(lambda_uniform)
    total = cd if lam == 0.0 else cd + uni * lam
    return {"chamfer": cd, "uniform": uni, "total": total}


class GridSmoother(StoreModelMixin, BaseEstimator):
    """Sequence-invariant Transformer mapping N points to N displaced points.

    Parameters
    ----------
    n_points : fixed cloud size N; ``smooth`` rejects other sizes.
    layers, hidden, heads : Transformer shape (defaults 4/64/4).
    lambda_uniform : weight of the spacing-uniformity penalty.
    knn_k : neighborhood size for the uniformity term.
    steps, batch_size, lr, weight_decay, warmup_steps : optimization budget.
    snapshot_every : steps between parameter snapshots used for divergence
        rollback (a non-finite loss restores the last snapshot and stops).
    seed : init and batching randomness.
    """

    def __init__(self, n_points=1024, layers=4, hidden=64, heads=4,
                 lambda_uniform=1.0, knn_k=8, steps=500, batch_size=4,
                 lr=1e-3, weight_decay=1e-4, warmup_steps=50,
                 snapshot_every=100, seed=0):
        self.n_points = n_points
        self.layers = layers
        self.hidden = hidden
        self.heads = heads
        self.lambda_uniform = lambda_uniform
        self.knn_k = knn_k
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
        hid = int(self.hidden)
        self.in_head_ = Linear(store, "smoother.in", _FEATURE_DIM, hid, rng)
        self.blocks_ = [AttentionBlock(store, f"smoother.block{i}", hid,
                                       int(self.heads), rng)
                        for i in range(int(self.layers))]
        self.norm_ = LayerNorm(store, "smoother.norm", hid)
        # zero-initialized displacement head: the untrained smoother is the
        # identity map
        self.out_head_ = Linear(store, "smoother.out", hid, 3, rng,
                                zero_init=True)
        self.params_ = store
        self.diverged_ = False

    def _forward(self, pts: Tensor) -> Tensor:
        """(B, N, 3) coordinates -> (B, N, 3) displaced coordinates."""
        h = self.in_head_(Tensor(_point_features(pts.data)))
        for blk in self.blocks_:
            h = blk(h)
        disp = self.out_head_(self.norm_(h))
        return pts + disp

    # -- data plumbing -------------------------------------------------------

    def _check_cloud(self, pc) -> np.ndarray:
        pts = as_points(pc)
        n = int(self.n_points)
        if pts.shape != (n, 3):
            raise ValueError(f"smoother is configured for exactly {n} points, "
                             f"got shape {pts.shape}")
        return np.ascontiguousarray(pts, dtype=np.float32)

    def _targets(self, y) -> list:
        n = int(self.n_points)
        targets = []
        for pc in y:
            pts = as_points(pc)
            if len(pts) < n:
                raise ValueError(f"target clouds need at least {n} points, "
                                 f"got {len(pts)}")
            targets.append(np.ascontiguousarray(
                pts[fps(pts, n)], dtype=np.float32))
        return targets

    # -- estimator API -------------------------------------------------------

    def fit(self, X, y):
        """Train on pairs of (raw cloud of N points, dense target cloud).

        Targets are farthest-point downsampled to N once up front.  Every
        history row carries both loss components and their weighted total.
        """
        raws = [self._check_cloud(pc) for pc in X]
        targets = self._targets(y)
        if len(raws) != len(targets):
            raise ValueError(f"{len(raws)} raw clouds vs {len(targets)} targets")
        if not raws:
            raise ValueError("need at least one training pair")

        rng = np.random.default_rng(self.seed)
        self._build(rng)
        steps = int(self.steps)
        opt = AdamW(self.params_, weight_decay=self.weight_decay,
                    schedule=WarmupCosineSchedule(
                        self.lr, steps, min(int(self.warmup_steps), steps - 1)))

        order = rng.permutation(len(raws))
        pos = 0
        bsz = min(int(self.batch_size), len(raws))
        snapshot = self.params_.state_copy()
        history = []
        self.diverged_ = False

        for step in range(1, steps + 1):
            if pos + bsz > len(raws):
                order = rng.permutation(len(raws))
                pos = 0
            take = order[pos:pos + bsz]
            pos += bsz

            batch = Tensor(np.stack([raws[i][_canonical_order(raws[i])]
                                     for i in take]))
            out = self._forward(batch)
            if not np.isfinite(out.data).all():
                # exploded before the loss could even be evaluated
                self.params_.load_state(snapshot)
                self.diverged_ = True
                break
            cd_sum, uni_sum, total = None, None, None
            for row, i in enumerate(take):
                rec = smoother_loss(out[row], targets[i],
                                    lambda_uniform=self.lambda_uniform,
                                    knn_k=self.knn_k)
                cd_sum = rec["chamfer"] if cd_sum is None else cd_sum + rec["chamfer"]
                uni_sum = rec["uniform"] if uni_sum is None else uni_sum + rec["uniform"]
                total = rec["total"] if total is None else total + rec["total"]
            inv = 1.0 / len(take)
            loss = total * inv

            opt.zero_grad()
            loss.backward()
            opt.step()

            row = {"step": step,
                   "chamfer": float(cd_sum.item()) * inv,
                   "uniform": float(uni_sum.item()) * inv,
                   "total": float(loss.item())}
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

    def smooth(self, raw) -> PointCloud:
        """Displace one cloud of exactly N points; label is carried over."""
        check_is_fitted(self)
        pts = self._check_cloud(raw)
        order = _canonical_order(pts)
        inverse = np.empty_like(order)
        inverse[order] = np.arange(len(order))
        with no_grad():
            out = self._forward(Tensor(pts[order][None]))
        moved = out.data[0][inverse]
        if not np.isfinite(moved).all():
            raise FloatingPointError("smoother produced non-finite points")
        label = raw.label if isinstance(raw, PointCloud) else None
        return PointCloud(moved, label=label)

    def predict(self, X) -> list:
        return [self.smooth(pc) for pc in X]

    # -- persistence ---------------------------------------------------------

    def _extra_state(self):
        return {"diverged": bool(self.diverged_)}

    def _restore(self, store, extra):
        self._build(np.random.default_rng(self.seed))
        self.params_.load_state(store.state_copy())
        self.diverged_ = bool(extra.get("diverged", False))
        self.history_ = []
        self.n_steps_ = 0
