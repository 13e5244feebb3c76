"""Masked token generator over the coarse voxel code grid.

A bidirectional Transformer sees a cubic grid of discrete shape tokens in
which some cells are replaced by a MASK sentinel, plus one prepended
conditioning token derived from a prompt embedding, and predicts the true
token of every cell.  Training masks a random fraction of cells (the
fraction drawn from an arccos-shaped density that favors heavy masking) and
scores cross-entropy only on the masked ones; the prompt is occasionally
dropped for a learned null embedding so that inference can contrast
conditional and unconditional predictions (classifier-free mixing).

Generation starts from an all-MASK grid and fills it over a fixed number of
steps: every still-masked cell samples a token from a temperature-scaled
softmax, cells are ranked by the probability of their sampled token, and
the most confident ones are committed until the remaining-mask count drops
to a cosine-schedule target.  Cell temperature decays with distance from
the grid center, keeping the object core conservative and the boundary
diverse.  Committed cells are frozen for all later steps, which also makes
local re-generation possible: start from a partially masked grid and only
the masked region is ever rewritten.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ..autodiff import (AdamW, AttentionBlock, Embedding, LayerNorm, Linear,
                        ParameterStore, Tensor, WarmupCosineSchedule, cat,
                        cross_entropy, embedding, no_grad)
from ..data import CATEGORIES, resolve_prompt
from .base import StoreModelMixin
from .vqgan import TokenGrid

__all__ = ["DecodeState", "PromptEmbedding", "VoxelTokenGenerator",
           "apply_mask", "mask_schedule", "perturb_prompt",
           "radial_temperature", "sample_mask_ratio", "temperature_field"]

PROMPT_SOURCES = ("label-template", "external")


def _unit(v: np.ndarray) -> np.ndarray:
    n = float(np.linalg.norm(v))
    if n == 0.0:
        raise ValueError("cannot normalize a zero prompt vector")
    return (v / n).astype(np.float32)


@dataclass
class PromptEmbedding:
    """Conditioning vector plus the noise level used when perturbing it."""

    vector: np.ndarray
    source: str = "external"
    gamma: float = 0.0

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float32).reshape(-1)
        if v.size == 0 or not np.isfinite(v).all():
            raise ValueError("prompt vector must be non-empty and finite")
        if self.source not in PROMPT_SOURCES:
            raise ValueError(f"source must be one of {PROMPT_SOURCES}")
        g = float(self.gamma)
        if not 0.0 <= g < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {g}")
        self.vector = v
        self.gamma = g


def perturb_prompt(c: PromptEmbedding, rng) -> PromptEmbedding:
    """Blend the normalized prompt with Gaussian noise at level gamma.

    The noise is scaled to unit expected norm, the mix is re-normalized, and
    gamma=0 returns the normalized prompt untouched.
    """
    v = _unit(c.vector)
    if c.gamma > 0.0:
        d = v.size
        eps = rng.normal(size=d) / np.sqrt(d)
        v = _unit((1.0 - c.gamma) * v + c.gamma * eps)
    return PromptEmbedding(v, c.source, c.gamma)


def sample_mask_ratio(rng) -> float:
    """Mask fraction r = cos(pi/2 * u), u uniform on [0, 1): density
    (2/pi) / sqrt(1 - r^2) on (0, 1], mean 2/pi, heavy near full masking."""
    return float(np.cos(0.5 * np.pi * rng.random()))


def apply_mask(grid: TokenGrid, r: float, rng):
    """Mask ceil(r * R^3) uniformly chosen cells of a fully-known grid.

    Returns the masked copy and the sorted masked cell indices.
    """
    if grid.mask_count:
        raise ValueError("grid already contains MASK cells")
    if not 0.0 < r <= 1.0:
        raise ValueError(f"mask ratio must lie in (0, 1], got {r}")
    n = grid.tokens.size
    count = int(np.ceil(r * n))
    chosen = np.sort(rng.choice(n, size=count, replace=False))
    toks = grid.tokens.copy()
    toks[chosen] = grid.mask_id
    return TokenGrid(grid.resolution, toks, grid.n_codes), chosen


def mask_schedule(n_masked: int, steps: int) -> list:
    """Remaining-mask targets ceil(n * cos(pi/2 * t/S)) for t = 1..S.

    The final entry is always 0 (cos hits zero exactly at t = S)."""
    if n_masked < 1 or steps < 1:
        raise ValueError("need n_masked >= 1 and steps >= 1")
    out = [int(np.ceil(n_masked * np.cos(0.5 * np.pi * t / steps)))
           for t in range(1, steps + 1)]
    out[-1] = 0
    return out


def radial_temperature(cell, resolution: int, t_min: float = 0.05) -> float:
    """Sampling temperature 1 - (r/R)^2 for one cell.

    r is the distance from the cell center to the grid center; R is the
    distance of the farthest corner cell, so corners reach 0 before the
    t_min floor is applied and the center of an odd grid is exactly 1.
    """
    res = int(resolution)
    x, y, z = (int(v) for v in cell)
    for v in (x, y, z):
        if not 0 <= v < res:
            raise ValueError(f"cell {cell} outside grid of side {res}")
    half = (res - 1) / 2.0
    if half == 0.0:
        return 1.0
    r_sq = (x - half) ** 2 + (y - half) ** 2 + (z - half) ** 2
    corner_sq = 3.0 * half * half
    return max(1.0 - r_sq / corner_sq, float(t_min))


def temperature_field(resolution: int, t_min: float = 0.05) -> np.ndarray:
    """``radial_temperature`` for every cell, flattened in grid order."""
    res = int(resolution)
    if res == 1:
        return np.ones(1)
    half = (res - 1) / 2.0
    ax = (np.arange(res) - half) ** 2
    r_sq = ax[:, None, None] + ax[None, :, None] + ax[None, None, :]
    return np.maximum(1.0 - r_sq / (3.0 * half * half),
                      float(t_min)).reshape(-1)


@dataclass
class DecodeState:
    """Snapshot of iterative decoding after a given step."""

    step: int
    tokens: np.ndarray
    committed: np.ndarray
    confidence: np.ndarray


class VoxelTokenGenerator(StoreModelMixin, BaseEstimator):
    """Prompt-conditioned masked Transformer over token grids.

    Parameters
    ----------
    resolution : side of the token grid this model operates on.
    n_codes : codebook size K; the MASK sentinel is id K and the output head
        scores the K real codes only.
    dim, layers, heads : Transformer size (defaults 192/6/6).
    prompt_dim : width of prompt embeddings.
    labels : vocabulary of prompt labels; templated text ("a <label>")
        resolves onto it.  One extra learned row serves as the null prompt.
    p_uncond : probability of training a sample against the null prompt.
    train_gamma : noise level applied to prompt embeddings during training.
    t_min : floor of the radial temperature field.
    steps, batch_size, lr, weight_decay, warmup_steps : optimization budget.
    snapshot_every : divergence-rollback snapshot cadence.
    seed : init, masking, and batching randomness.
    """

    def __init__(self, resolution=4, n_codes=512, dim=192, layers=6, heads=6,
                 prompt_dim=128, labels=CATEGORIES, p_uncond=0.1,
                 train_gamma=0.1, t_min=0.05, steps=3000, batch_size=8,
                 lr=1e-3, weight_decay=1e-4, warmup_steps=100,
                 snapshot_every=200, seed=0):
        self.resolution = resolution
        self.n_codes = n_codes
        self.dim = dim
        self.layers = layers
        self.heads = heads
        self.prompt_dim = prompt_dim
        self.labels = tuple(labels)
        self.p_uncond = p_uncond
        self.train_gamma = train_gamma
        self.t_min = t_min
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.warmup_steps = warmup_steps
        self.snapshot_every = snapshot_every
        self.seed = seed

    # -- construction --------------------------------------------------------

    @property
    def n_cells(self) -> int:
        return int(self.resolution) ** 3

    @property
    def null_row(self) -> int:
        return len(self.labels)

    def _build(self, rng):
        store = ParameterStore()
        dim = int(self.dim)
        self.tok_embed_ = Embedding(store, "voxelgen.tok",
                                    int(self.n_codes) + 1, dim, rng)
        self.pos_embed_ = Embedding(store, "voxelgen.pos", self.n_cells, dim,
                                    rng)
        self.prompt_table_ = Embedding(store, "voxelgen.prompt",
                                       len(self.labels) + 1,
                                       int(self.prompt_dim), rng)
        self.prompt_proj_ = Linear(store, "voxelgen.proj",
                                   int(self.prompt_dim), dim, rng)
        self.blocks_ = [AttentionBlock(store, f"voxelgen.block{i}", dim,
                                       int(self.heads), rng)
                        for i in range(int(self.layers))]
        self.norm_ = LayerNorm(store, "voxelgen.norm", dim)
        self.head_ = Linear(store, "voxelgen.head", dim, int(self.n_codes),
                            rng)
        self.params_ = store
        self.diverged_ = False
        self.decode_forward_calls_ = 0
        self.null_evaluations_ = 0

    def _logits_t(self, tokens: np.ndarray, prompt_t: Tensor) -> Tensor:
        """(B, L) int tokens + (B, D_c) prompt rows -> (B, L, K) logits."""
        bsz, length = tokens.shape
        x = self.tok_embed_(tokens) + self.pos_embed_(np.arange(length))
        cond = self.prompt_proj_(prompt_t).reshape(bsz, 1, int(self.dim))
        x = cat([cond, x], axis=1)
        for blk in self.blocks_:
            x = blk(x)
        return self.head_(self.norm_(x)[:, 1:, :])

    def _prompt_rows_t(self, rows: np.ndarray, rng, gamma: float) -> Tensor:
        """Normalized (noisy) embeddings for table rows; differentiable."""
        v = embedding(self.prompt_table_.table, rows)
        v = v / ((v * v).sum(axis=-1, keepdims=True) + 1e-12).sqrt()
        if gamma > 0.0:
            d = int(self.prompt_dim)
            eps = rng.normal(size=(len(rows), d)) / np.sqrt(d)
            v = v * (1.0 - gamma) + Tensor(eps) * gamma
            v = v / ((v * v).sum(axis=-1, keepdims=True) + 1e-12).sqrt()
        return v

    # -- prompt provider -----------------------------------------------------

    def prompt(self, label_or_text, gamma: float = 0.0) -> PromptEmbedding:
        """Unit-norm learned embedding for a label index, label name, or
        templated text ("a <label>")."""
        check_is_fitted(self)
        if isinstance(label_or_text, (int, np.integer)):
            idx = int(label_or_text)
            if not 0 <= idx < len(self.labels):
                raise ValueError(f"label index {idx} outside vocabulary of "
                                 f"{len(self.labels)}")
        else:
            idx = resolve_prompt(str(label_or_text), self.labels)
        vec = _unit(self.prompt_table_.table.data[idx])
        return PromptEmbedding(vec, "label-template", gamma)

    def null_prompt(self, gamma: float = 0.0) -> PromptEmbedding:
        check_is_fitted(self)
        vec = _unit(self.prompt_table_.table.data[self.null_row])
        return PromptEmbedding(vec, "label-template", gamma)

    # -- training ------------------------------------------------------------

    def _check_grid(self, grid: TokenGrid, allow_mask=False) -> TokenGrid:
        if not isinstance(grid, TokenGrid):
            raise TypeError(f"expected TokenGrid, got {type(grid).__name__}")
        if grid.resolution != int(self.resolution):
            raise ValueError(f"grid side {grid.resolution} != configured "
                             f"{self.resolution}")
        if grid.n_codes != int(self.n_codes):
            raise ValueError(f"grid has {grid.n_codes} codes, model expects "
                             f"{self.n_codes}")
        if not allow_mask and grid.mask_count:
            raise ValueError("training grids must not contain MASK cells")
        return grid

    def _label_indices(self, y) -> np.ndarray:
        out = []
        for item in y:
            if isinstance(item, (int, np.integer)):
                idx = int(item)
                if not 0 <= idx < len(self.labels):
                    raise ValueError(f"label {idx} outside vocabulary")
            else:
                idx = resolve_prompt(str(item), self.labels)
            out.append(idx)
        return np.asarray(out, dtype=np.int64)

    def fit(self, X, y):
        """Train on fully-known token grids with per-grid labels."""
        grids = [self._check_grid(g) for g in X]
        labels = self._label_indices(y)
        if len(grids) != len(labels):
            raise ValueError(f"{len(grids)} grids vs {len(labels)} labels")
        if not grids:
            raise ValueError("need at least one training grid")

        rng = np.random.default_rng(self.seed)
        self._build(rng)
        steps = int(self.steps)
        opt = AdamW(self.params_, weight_decay=self.weight_decay,
                    schedule=WarmupCosineSchedule(
                        self.lr, steps, min(int(self.warmup_steps),
                                            steps - 1)))

        n = len(grids)
        bsz = min(int(self.batch_size), n)
        length = self.n_cells
        order = rng.permutation(n)
        pos = 0
        snapshot = self.params_.state_copy()
        history = []
        self.diverged_ = False

        for step in range(1, steps + 1):
            if pos + bsz > n:
                order = rng.permutation(n)
                pos = 0
            take = order[pos:pos + bsz]
            pos += bsz

            tokens = np.empty((bsz, length), dtype=np.int64)
            targets = np.empty((bsz, length), dtype=np.int64)
            weights = np.zeros((bsz, length))
            for row, i in enumerate(take):
                masked, cells = apply_mask(grids[i], sample_mask_ratio(rng),
                                           rng)
                tokens[row] = masked.tokens
                targets[row] = grids[i].tokens
                weights[row, cells] = 1.0

            drop = rng.random(bsz) < float(self.p_uncond)
            rows = np.where(drop, self.null_row, labels[take])
            prompt_t = self._prompt_rows_t(rows, rng,
                                           float(self.train_gamma))
            logits = self._logits_t(tokens, prompt_t)
            loss = cross_entropy(
                logits.reshape(bsz * length, int(self.n_codes)),
                targets.reshape(-1), weights=weights.reshape(-1))

            opt.zero_grad()
            loss.backward()
            opt.step()

            row = {"step": step, "loss": float(loss.item()),
                   "mask_frac": float(weights.mean())}
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

    # -- inference -----------------------------------------------------------

    def forward_logits(self, masked: TokenGrid, c: PromptEmbedding) -> np.ndarray:
        """(R^3, K) logits for every cell of a (possibly masked) grid."""
        check_is_fitted(self)
        self._check_grid(masked, allow_mask=True)
        vec = _unit(np.asarray(c.vector))
        if vec.size != int(self.prompt_dim):
            raise ValueError(f"prompt dim {vec.size} != configured "
                             f"{self.prompt_dim}")
        with no_grad():
            out = self._logits_t(masked.tokens[None], Tensor(vec[None]))
        return out.data[0].copy()

    def parallel_decode(self, c: PromptEmbedding, steps: int, seed: int, *,
                        cfg_scale: float = 0.0, temperature: float = 1.0,
                        initial: TokenGrid | None = None) -> TokenGrid:
        """Fill every MASK cell over ``steps`` rounds of sample-and-commit.

        Starts fully masked unless ``initial`` provides a partially known
        grid; known cells are frozen.  Each round runs one Transformer pass
        (conditional and null prompts share a single batched pass when
        ``cfg_scale`` > 0), samples all masked cells from softmax at
        temperature ``temperature * radial_temperature(cell)``, and commits
        the cells whose sampled token had the highest probability until the
        remaining-mask count reaches the cosine-schedule target.  The same
        (prompt, steps, seed) always yields the same grid; per-cell noise is
        indexed by (step, cell), so it does not depend on the mask pattern.
        """
        check_is_fitted(self)
        if steps < 1:
            raise ValueError("need at least one decode step")
        if temperature <= 0.0:
            raise ValueError("temperature must be positive")
        if cfg_scale < 0.0:
            raise ValueError("cfg_scale must be >= 0")

        res, n_codes = int(self.resolution), int(self.n_codes)
        if initial is None:
            tokens = np.full(self.n_cells, n_codes, dtype=np.int64)
        else:
            self._check_grid(initial, allow_mask=True)
            tokens = initial.tokens.copy()
        committed = tokens != n_codes
        confidence = np.zeros(self.n_cells)

        vec = _unit(np.asarray(c.vector))
        if vec.size != int(self.prompt_dim):
            raise ValueError(f"prompt dim {vec.size} != configured "
                             f"{self.prompt_dim}")
        if c.gamma > 0.0:
            pert_rng = np.random.default_rng(
                np.random.SeedSequence(seed, spawn_key=(0,)))
            vec = perturb_prompt(PromptEmbedding(vec, c.source, c.gamma),
                                 pert_rng).vector
        null_vec = _unit(self.prompt_table_.table.data[self.null_row])

        temps = float(temperature) * temperature_field(res, float(self.t_min))
        n_masked0 = int((~committed).sum())
        self.decode_forward_calls_ = 0
        self.null_evaluations_ = 0
        self.decode_trace_ = [DecodeState(0, tokens.copy(), committed.copy(),
                                          confidence.copy())]
        if n_masked0 == 0:
            return TokenGrid(res, tokens, n_codes)

        targets = mask_schedule(n_masked0, int(steps))
        for t in range(1, int(steps) + 1):
            remaining = int((~committed).sum())
            if remaining == 0:
                break
            prompts = np.stack([vec, null_vec]) if cfg_scale > 0 else vec[None]
            with no_grad():
                out = self._logits_t(np.broadcast_to(
                    tokens, (len(prompts), tokens.size)), Tensor(prompts))
            self.decode_forward_calls_ += 1
            if cfg_scale > 0:
                self.null_evaluations_ += 1
                logits = ((1.0 + cfg_scale) * out.data[0]
                          - cfg_scale * out.data[1])
            else:
                logits = out.data[0]
            if not np.isfinite(logits).all():
                raise FloatingPointError("non-finite generator logits")

            # force at least one commit per round, and empty the grid at the
            # final round regardless of the ceiling
            goal = 0 if t == int(steps) else min(targets[t - 1], remaining - 1)
            cells = np.flatnonzero(~committed)
            scaled = logits[cells] / temps[cells, None]
            step_rng = np.random.default_rng(
                np.random.SeedSequence(seed, spawn_key=(t,)))
            gumbel = step_rng.gumbel(size=(self.n_cells, n_codes))
            choice = np.argmax(scaled + gumbel[cells], axis=1)
            shift = scaled - scaled.max(axis=1, keepdims=True)
            probs = np.exp(shift)
            probs /= probs.sum(axis=1, keepdims=True)
            conf = probs[np.arange(len(cells)), choice]

            n_commit = remaining - max(goal, 0)
            take = np.lexsort((cells, -conf))[:n_commit]
            tokens[cells[take]] = choice[take]
            confidence[cells[take]] = conf[take]
            committed[cells[take]] = True
            self.decode_trace_.append(DecodeState(
                t, tokens.copy(), committed.copy(), confidence.copy()))

        if (tokens == n_codes).any():
            raise RuntimeError("decode finished with unfilled MASK cells")
        return TokenGrid(res, tokens, n_codes)

    # -- persistence ---------------------------------------------------------

    def _extra_state(self):
        return {"diverged": bool(self.diverged_)}

    def _restore(self, store, extra):
        self._build(np.random.default_rng(self.seed))
        self.params_.load_state(store.state_copy())
        self.diverged_ = bool(extra.get("diverged", False))
        self.history_ = []
        self.n_steps_ = 0
