"""Voxel autoencoder with a learned discrete codebook and an adversarial critic.

The model compresses an R^3 occupancy grid to an (R/f)^3 grid of D-dim
features, snaps each feature to its nearest codebook entry (straight-through
gradient), and decodes back to occupancy probabilities.  Training combines:

* L1 reconstruction between input and decoded occupancy,
* the two quantization terms (codebook pull and commitment),
* non-saturating logistic GAN losses from a small 3D conv critic
  (the classic minimax generator loss is available via ``gan_mode``),
* a global-occupancy regularizer that penalizes squared mean-occupancy
  mismatch, which counteracts the sparse-grid tendency to decode everything
  to empty.

The codebook doubles as a tokenizer: ``tokenize`` maps a grid to discrete
indices in [0, K-1] and ``detokenize`` decodes indices back.  Index K is
reserved as the MASK sentinel for downstream masked-token generation and is
never produced by quantization; ``decode`` rejects grids containing it.

The straight-through composition is ``z + sg(z_q - z)``: the decoder input
equals the quantized latent up to float rounding while the gradient passes
to the encoder unchanged (bitwise identical to differentiating the decoder
input directly), and the value stays locally continuous in the encoder
features, which keeps the whole decoder path finite-difference checkable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ..autodiff import (AdamW, Conv3d, Embedding, LayerNorm, Linear,
                        ParameterStore, Tensor, WarmupCosineSchedule,
                        embedding, gelu, no_grad, softplus, stop_gradient,
                        upsample_nearest3d)
from ..geometry.types import VoxelGrid
from ..geometry.voxel import occupancy_loss, voxel_iou
from .base import StoreModelMixin

__all__ = ["TokenGrid", "VoxelVQGAN", "vqgan_losses"]

GAN_MODES = ("nonsat", "minimax")


@dataclass
class TokenGrid:
    """Cubic grid of discrete code indices; value ``n_codes`` is the MASK
    sentinel (a hole to be filled, not a codebook row)."""

    resolution: int
    tokens: np.ndarray
    n_codes: int

    def __post_init__(self):
        r = int(self.resolution)
        toks = np.asarray(self.tokens)
        if not np.issubdtype(toks.dtype, np.integer):
            raise ValueError("tokens must be integers")
        toks = toks.astype(np.int64).reshape(-1)
        if toks.size != r ** 3:
            raise ValueError(f"payload {toks.size} != {r}^3")
        k = int(self.n_codes)
        if toks.size and (toks.min() < 0 or toks.max() > k):
            raise ValueError(f"token ids must lie in [0, {k}] ({k} = MASK)")
        self.resolution = r
        self.tokens = toks
        self.n_codes = k

    @property
    def mask_id(self) -> int:
        return self.n_codes

    @property
    def mask_count(self) -> int:
        return int((self.tokens == self.n_codes).sum())

    def dense(self) -> np.ndarray:
        """(R, R, R) view with axes ordered (z, y, x)."""
        r = self.resolution
        return self.tokens.reshape(r, r, r)

    def copy(self) -> "TokenGrid":
        return TokenGrid(self.resolution, self.tokens.copy(), self.n_codes)


class _ChannelNorm:
    """Per-position normalization over channels of a (B, C, D, H, W) map.

    Without it the conv stack has an unconstrained uniform-shift direction,
    and on sparse occupancy targets gradient descent rides that direction
    into all-empty sigmoid saturation before spatial features form.
    """

    def __init__(self, store, name, ch):
        self.ln = LayerNorm(store, name, ch)

    def __call__(self, x: Tensor) -> Tensor:
        return self.ln(x.transpose(0, 2, 3, 4, 1)).transpose(0, 4, 1, 2, 3)


class _ResBlock:
    def __init__(self, store, name, ch, rng):
        self.n1 = _ChannelNorm(store, f"{name}.n1", ch)
        self.c1 = Conv3d(store, f"{name}.c1", ch, ch, 3, rng, padding=1)
        self.n2 = _ChannelNorm(store, f"{name}.n2", ch)
        self.c2 = Conv3d(store, f"{name}.c2", ch, ch, 3, rng, padding=1)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.c1(gelu(self.n1(x)))
        return x + self.c2(gelu(self.n2(h)))


class _Encoder:
    def __init__(self, store, name, rng, base, n_down, d_out):
        chans = [base * 2 ** i for i in range(n_down + 1)]
        self.stem = Conv3d(store, f"{name}.stem", 1, chans[0], 3, rng, padding=1)
        self.stages = []
        for i in range(n_down):
            res = _ResBlock(store, f"{name}.res{i}", chans[i], rng)
            down = Conv3d(store, f"{name}.down{i}", chans[i], chans[i + 1], 4,
                          rng, stride=2, padding=1)
            self.stages.append((res, down))
        self.res_out = _ResBlock(store, f"{name}.res_out", chans[-1], rng)
        self.norm_out = _ChannelNorm(store, f"{name}.norm_out", chans[-1])
        self.proj = Conv3d(store, f"{name}.proj", chans[-1], d_out, 1, rng)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.stem(x)
        for res, down in self.stages:
            h = down(gelu(res(h)))
        return self.proj(gelu(self.norm_out(self.res_out(h))))


class _Decoder:
    """Mirror of the encoder with nearest-neighbor upsampling.

    Occupancy logits are bounded with a scaled tanh before the logistic
    squash.  Binary targets otherwise drive the sigmoid into saturation
    (the all-empty prediction is a gradient-dead attractor under L1);
    bounding keeps every cell's gradient alive while leaving the output
    strictly inside [0, 1].
    """

    LOGIT_BOUND = 6.0

    def __init__(self, store, name, rng, base, n_down, d_in):
        chans = [base * 2 ** i for i in range(n_down + 1)]
        self.proj = Conv3d(store, f"{name}.proj", d_in, chans[-1], 1, rng)
        self.res_in = _ResBlock(store, f"{name}.res_in", chans[-1], rng)
        self.stages = []
        for i in reversed(range(n_down)):
            conv = Conv3d(store, f"{name}.up{i}", chans[i + 1], chans[i], 3,
                          rng, padding=1)
            res = _ResBlock(store, f"{name}.res{i}", chans[i], rng)
            self.stages.append((conv, res))
        self.norm_out = _ChannelNorm(store, f"{name}.norm_out", chans[0])
        self.out = Conv3d(store, f"{name}.out", chans[0], 1, 3, rng, padding=1)

    def __call__(self, z: Tensor) -> Tensor:
        h = self.res_in(self.proj(z))
        for conv, res in self.stages:
            h = res(gelu(conv(upsample_nearest3d(h, 2))))
        logits = self.out(gelu(self.norm_out(h)))
        s = self.LOGIT_BOUND
        return ((logits * (1.0 / s)).tanh() * s).sigmoid()


class _Discriminator:
    """Three stride-2 convs then a linear real/fake logit; needs side % 8 == 0."""

    def __init__(self, store, name, rng, base, side):
        chans = [1, base, 2 * base, 4 * base]
        self.convs = [
            Conv3d(store, f"{name}.c{i}", chans[i], chans[i + 1], 4, rng,
                   stride=2, padding=1)
            for i in range(3)
        ]
        feat = side // 8
        self.head = Linear(store, f"{name}.head", chans[-1] * feat ** 3, 1, rng)

    def __call__(self, x: Tensor) -> Tensor:
        h = x
        for conv in self.convs:
            h = gelu(conv(h))
        b = h.shape[0]
        return self.head(h.reshape(b, -1)).reshape(b)


def _occ_term(v, v_hat):
    """Mean per-sample occupancy loss; single grids delegate directly."""
    if isinstance(v, Tensor) and v.ndim == 5:
        per = [occupancy_loss(v[b], v_hat[b]) for b in range(v.shape[0])]
        total = per[0]
        for p in per[1:]:
            total = total + p
        return total / float(len(per))
    if isinstance(v, np.ndarray) and v.ndim == 5:
        per = [occupancy_loss(v[b], v_hat[b]) for b in range(v.shape[0])]
        return float(np.mean(per))
    return occupancy_loss(v, v_hat)


def vqgan_losses(v, v_hat, z, z_q, disc_real=None, disc_fake=None, *,
                 beta_commit=1.0, gan_weight=0.1, occ_weight=1.0,
                 gan_mode="nonsat", use_occ=True):
    """Assemble the autoencoder loss record.

    ``v``/``v_hat`` are occupancy grids (batched ``(B,1,R,R,R)`` or single),
    ``z``/``z_q`` the pre- and post-quantization latents, ``disc_real``/
    ``disc_fake`` optional critic logits.  Tensor inputs yield Tensor values
    (differentiable); pure numpy/VoxelGrid inputs yield floats.  ``total`` is
    the generator-side objective: recon + vq + gan_weight*gan_g (+
    occ_weight*occ when enabled).  ``gan_d`` is reported but not folded into
    ``total``; it belongs to the critic's optimizer.
    """
    if gan_mode not in GAN_MODES:
        raise ValueError(f"gan_mode must be one of {GAN_MODES}")
    raw = (v, v_hat, z, z_q, disc_real, disc_fake)
    tensorial = any(isinstance(t, Tensor) for t in raw)

    def lift(a):
        if a is None or isinstance(a, Tensor):
            return a
        if isinstance(a, VoxelGrid):
            a = a.occupancy
        return Tensor(np.asarray(a, dtype=np.float64), dtype=np.float64)

    v, v_hat, z, z_q = lift(v), lift(v_hat), lift(z), lift(z_q)
    disc_real, disc_fake = lift(disc_real), lift(disc_fake)

    recon = (v - v_hat).abs().mean()
    l_code = ((z_q - stop_gradient(z)) ** 2).mean()
    l_commit = ((z - stop_gradient(z_q)) ** 2).mean()
    vq = l_code + float(beta_commit) * l_commit
    total = recon + vq

    occ = _occ_term(v, v_hat)
    if use_occ:
        total = total + float(occ_weight) * occ

    gan_g = gan_d = None
    if disc_fake is not None:
        if gan_mode == "minimax":
            gan_g = (-softplus(disc_fake)).mean()
        else:
            gan_g = softplus(-disc_fake).mean()
        total = total + float(gan_weight) * gan_g
    if disc_real is not None and disc_fake is not None:
        gan_d = (softplus(-disc_real) + softplus(disc_fake)).mean()

    record = {"recon": recon, "vq_codebook": l_code, "vq_commit": l_commit,
              "vq": vq, "occ": occ, "gan_g": gan_g, "gan_d": gan_d,
              "total": total}
    if not tensorial:
        record = {k: (None if t is None else float(t.item()))
                  for k, t in record.items()}
    return record


class VoxelVQGAN(StoreModelMixin, BaseEstimator):
    """Trainable voxel tokenizer (conv autoencoder + discrete codebook + critic).

    Parameters mirror the desk-scale defaults: 16^3 grids compressed 4x to a
    4^3 token grid over a 512-entry codebook of 64-dim embeddings.
    """

    def __init__(self, resolution=16, downsample=4, codebook_size=512,
                 embed_dim=64, base_channels=16, steps=2000, batch_size=4,
                 lr=2e-3, weight_decay=1e-4, beta_commit=1.0, gan_weight=0.1,
                 occ_weight=1.0, gan_warmup=500, gan_mode="nonsat",
                 use_occ=True, warmup_steps=100, snapshot_every=100, seed=0):
        self.resolution = resolution
        self.downsample = downsample
        self.codebook_size = codebook_size
        self.embed_dim = embed_dim
        self.base_channels = base_channels
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta_commit = beta_commit
        self.gan_weight = gan_weight
        self.occ_weight = occ_weight
        self.gan_warmup = gan_warmup
        self.gan_mode = gan_mode
        self.use_occ = use_occ
        self.warmup_steps = warmup_steps
        self.snapshot_every = snapshot_every
        self.seed = seed

    # ------------------------------------------------------------- build

    def _validate_config(self):
        r, f = int(self.resolution), int(self.downsample)
        if f < 2 or (f & (f - 1)) != 0:
            raise ValueError(f"downsample must be a power of two >= 2, got {f}")
        if r % f != 0:
            raise ValueError(f"resolution {r} not divisible by downsample {f}")
        if r % 8 != 0:
            raise ValueError(f"resolution {r} must be a multiple of 8 "
                             "(critic downsamples three times)")
        if self.gan_mode not in GAN_MODES:
            raise ValueError(f"gan_mode must be one of {GAN_MODES}")

    def _build(self, rng):
        self._validate_config()
        n_down = int(self.downsample).bit_length() - 1
        self.params_ = ParameterStore()
        self.encoder_ = _Encoder(self.params_, "vqgan.encoder", rng,
                                 self.base_channels, n_down, self.embed_dim)
        self.decoder_ = _Decoder(self.params_, "vqgan.decoder", rng,
                                 self.base_channels, n_down, self.embed_dim)
        self.disc_ = _Discriminator(self.params_, "vqgan.disc", rng,
                                    self.base_channels, self.resolution)
        self.codebook_ = Embedding(self.params_, "vqgan.codebook",
                                   self.codebook_size, self.embed_dim, rng)
        self.latent_side_ = self.resolution // self.downsample
        self.diverged_ = False

    def _restore(self, store, extra):
        self._build(np.random.default_rng(self.seed))
        self.params_.load_state(store.state_copy())
        self.diverged_ = bool(extra.get("diverged", False))
        self.history_ = []

    def _extra_state(self):
        return {"diverged": bool(getattr(self, "diverged_", False))}

    # ------------------------------------------------------------- data prep

    def _as_grid(self, item) -> VoxelGrid:
        if isinstance(item, VoxelGrid):
            g = item
        else:
            g = VoxelGrid(self.resolution, np.asarray(item).reshape(-1))
        if g.resolution != self.resolution:
            raise ValueError(f"grid resolution {g.resolution} != configured "
                             f"{self.resolution}")
        return g

    def _as_batch_array(self, X) -> np.ndarray:
        if isinstance(X, VoxelGrid):
            X = [X]
        dense = [self._as_grid(item).dense() for item in X]
        if not dense:
            raise ValueError("empty dataset")
        return np.stack(dense)[:, None].astype(np.float32)

    # ------------------------------------------------------------- core ops

    def _nearest_indices(self, flat: np.ndarray) -> np.ndarray:
        table = self.codebook_.table.data
        d2 = ((flat ** 2).sum(axis=1, keepdims=True)
              - 2.0 * flat @ table.T
              + (table ** 2).sum(axis=1))
        return np.argmin(d2, axis=1)

    def _quantize_t(self, z: Tensor):
        """Graph-side quantization: returns (indices, flat features, flat
        quantized features, straight-through decoder input)."""
        b, d = z.shape[0], z.shape[1]
        side = z.shape[2]
        z_flat = z.transpose(0, 2, 3, 4, 1).reshape(b * side ** 3, d)
        idx = self._nearest_indices(z_flat.data)
        z_q = embedding(self.codebook_.table, idx)
        z_st = z_flat + stop_gradient(z_q - z_flat)
        z_grid = z_st.reshape(b, side, side, side, d).transpose(0, 4, 1, 2, 3)
        return idx, z_flat, z_q, z_grid

    def encode(self, v) -> np.ndarray:
        """Deterministic feature grid, shape (R', R', R', D)."""
        check_is_fitted(self)
        batch = self._as_grid(v).dense()[None, None].astype(np.float32)
        with no_grad():
            z = self.encoder_(Tensor(batch))
        return np.ascontiguousarray(z.data[0].transpose(1, 2, 3, 0))

    def quantize(self, z):
        """Snap features (S, S, S, D) to nearest codebook rows.

        Returns (TokenGrid, quantized features of the same shape, loss dict
        with the codebook and commitment terms).  Ties break to the lowest
        index.
        """
        check_is_fitted(self)
        arr = np.asarray(z, dtype=np.float32)
        if arr.ndim != 4 or arr.shape[-1] != self.embed_dim:
            raise ValueError(f"expected (S, S, S, {self.embed_dim}) features, "
                             f"got {arr.shape}")
        if len(set(arr.shape[:3])) != 1:
            raise ValueError("feature grid must be cubic")
        side = arr.shape[0]
        flat = arr.reshape(-1, self.embed_dim)
        idx = self._nearest_indices(flat)
        z_q = self.codebook_.table.data[idx].astype(np.float32)
        losses = {"codebook": float(((z_q - flat) ** 2).mean()),
                  "commitment": float(((flat - z_q) ** 2).mean())}
        grid = TokenGrid(side, idx, self.codebook_size)
        return grid, z_q.reshape(arr.shape), losses

    def _codes_to_latent(self, t: TokenGrid) -> np.ndarray:
        table = self.codebook_.table.data
        z_q = table[t.tokens].astype(np.float32)
        side = t.resolution
        latent = z_q.reshape(side, side, side, self.embed_dim)
        return np.ascontiguousarray(latent.transpose(3, 0, 1, 2))[None]

    def decode(self, t) -> VoxelGrid:
        """Decode a complete TokenGrid (or (S,S,S,D) latent) to occupancy."""
        check_is_fitted(self)
        if isinstance(t, TokenGrid):
            if t.n_codes != self.codebook_size:
                raise ValueError("token grid built for a different codebook")
            if t.mask_count:
                raise ValueError(f"cannot decode: {t.mask_count} cells still "
                                 "carry the MASK sentinel")
            latent = self._codes_to_latent(t)
        else:
            arr = np.asarray(t, dtype=np.float32)
            if arr.ndim != 4 or arr.shape[-1] != self.embed_dim:
                raise ValueError(f"expected TokenGrid or (S, S, S, "
                                 f"{self.embed_dim}) latent, got {arr.shape}")
            latent = np.ascontiguousarray(arr.transpose(3, 0, 1, 2))[None]
        with no_grad():
            v = self.decoder_(Tensor(latent))
        return VoxelGrid.from_dense(v.data[0, 0])

    def tokenize(self, v) -> TokenGrid:
        z = self.encode(v)
        idx = self._nearest_indices(z.reshape(-1, self.embed_dim))
        return TokenGrid(self.latent_side_, idx, self.codebook_size)

    def detokenize(self, t: TokenGrid) -> VoxelGrid:
        return self.decode(t)

    def reconstruction_iou(self, X) -> float:
        """Mean IoU between grids and their tokenize->detokenize round trip."""
        grids = [X] if isinstance(X, VoxelGrid) else list(X)
        scores = [voxel_iou(self._as_grid(g), self.detokenize(self.tokenize(g)))
                  for g in grids]
        return float(np.mean(scores))

    # ------------------------------------------------------------- training

    def fit(self, X, y=None):
        data = self._as_batch_array(X)
        n = data.shape[0]
        rng = np.random.default_rng(self.seed)
        self._build(rng)

        steps = int(self.steps)
        gen_params = self.params_.subset("vqgan.encoder", "vqgan.decoder",
                                         "vqgan.codebook")
        disc_params = self.params_.subset("vqgan.disc")
        g_opt = AdamW(gen_params, weight_decay=self.weight_decay,
                      schedule=WarmupCosineSchedule(
                          self.lr, steps, min(self.warmup_steps, steps - 1)))
        d_total = max(1, steps - int(self.gan_warmup))
        d_opt = AdamW(disc_params, weight_decay=self.weight_decay,
                      schedule=WarmupCosineSchedule(
                          self.lr, d_total, min(self.warmup_steps, d_total - 1)))

        bsz = min(int(self.batch_size), n)
        order = rng.permutation(n)
        pos = 0
        snapshot = self.params_.state_copy()
        history = []
        self.diverged_ = False

        for step in range(1, steps + 1):
            if pos + bsz > n:
                order = rng.permutation(n)
                pos = 0
            batch = data[order[pos:pos + bsz]]
            pos += bsz

            x = Tensor(batch)
            z = self.encoder_(x)
            idx, z_flat, z_q, z_st = self._quantize_t(z)
            v_hat = self.decoder_(z_st)
            gan_active = step > int(self.gan_warmup)
            logit_fake = self.disc_(v_hat) if gan_active else None
            rec = vqgan_losses(x, v_hat, z_flat, z_q, None, logit_fake,
                               beta_commit=self.beta_commit,
                               gan_weight=self.gan_weight,
                               occ_weight=self.occ_weight,
                               gan_mode=self.gan_mode, use_occ=self.use_occ)
            g_opt.zero_grad()
            rec["total"].backward()
            g_opt.step()

            d_val = 0.0
            if gan_active:
                d_opt.zero_grad()
                logit_real = self.disc_(x)
                logit_fake_d = self.disc_(Tensor(v_hat.data.copy()))
                d_loss = (softplus(-logit_real)
                          + softplus(logit_fake_d)).mean()
                d_loss.backward()
                d_opt.step()
                d_val = float(d_loss.item())

            row = {"step": step,
                   "recon": float(rec["recon"].item()),
                   "vq": float(rec["vq"].item()),
                   "occ": float(rec["occ"].item()),
                   "gan_g": float(rec["gan_g"].item()) if rec["gan_g"] is not None else 0.0,
                   "gan_d": d_val,
                   "total": float(rec["total"].item())}
            if not all(np.isfinite(val) for val in row.values()):
                self.params_.load_state(snapshot)
                self.diverged_ = True
                break
            history.append(row)
            if step % max(1, int(self.snapshot_every)) == 0:
                snapshot = self.params_.state_copy()

        self.history_ = history
        self.n_steps_ = len(history)
        self._update_codebook_stats(data)
        return self

    def _update_codebook_stats(self, data: np.ndarray):
        counts = np.zeros(self.codebook_size, dtype=np.int64)
        with no_grad():
            for i in range(data.shape[0]):
                z = self.encoder_(Tensor(data[i:i + 1]))
                flat = np.ascontiguousarray(
                    z.data[0].transpose(1, 2, 3, 0)).reshape(-1, self.embed_dim)
                counts += np.bincount(self._nearest_indices(flat),
                                      minlength=self.codebook_size)
        self.codebook_usage_ = counts
        self.dead_codes_ = int((counts == 0).sum())
