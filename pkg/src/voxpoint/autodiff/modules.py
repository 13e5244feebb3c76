"""Layer building blocks registered against a ParameterStore.

Construction order is deterministic: every layer draws its init from the
numpy Generator handed in, so a fixed seed rebuilds identical weights.
Dense weights use truncated normal (std 0.02, clipped at two sigma), conv
weights fan-in scaling, biases start at zero, embeddings normal(0, 1/sqrt(dim)).
"""

from __future__ import annotations

import numpy as np

from .ops import conv3d, embedding, gelu, softmax
from .tensor import Tensor


def trunc_normal(rng, shape, std=0.02):
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out


class Linear:
    def __init__(self, store, name, d_in, d_out, rng, bias=True, zero_init=False):
        w = np.zeros((d_in, d_out)) if zero_init else trunc_normal(rng, (d_in, d_out))
        self.w = store.add(f"{name}.w", Tensor(w, requires_grad=True))
        self.b = store.add(f"{name}.b", Tensor(np.zeros(d_out), requires_grad=True)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.w
        return y + self.b if self.b is not None else y


class LayerNorm:
    def __init__(self, store, name, dim, eps=1e-5):
        self.g = store.add(f"{name}.g", Tensor(np.ones(dim), requires_grad=True))
        self.b = store.add(f"{name}.b", Tensor(np.zeros(dim), requires_grad=True))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        y = xc / (var + self.eps).sqrt()
        return y * self.g + self.b


class Embedding:
    def __init__(self, store, name, count, dim, rng, std=None):
        std = 1.0 / np.sqrt(dim) if std is None else std
        self.table = store.add(f"{name}.table",
                               Tensor(rng.normal(0.0, std, size=(count, dim)),
                                      requires_grad=True))

    def __call__(self, idx) -> Tensor:
        return embedding(self.table, idx)


class Conv3d:
    """Init is fan-in scaled (std = sqrt(2 / (c_in * k^3))): conv stacks lose
    signal geometrically under the flat transformer-scale init."""

    def __init__(self, store, name, c_in, c_out, k, rng, stride=1, padding=0, bias=True):
        w = trunc_normal(rng, (c_out, c_in, k, k, k),
                         std=float(np.sqrt(2.0 / (c_in * k ** 3))))
        self.w = store.add(f"{name}.w", Tensor(w, requires_grad=True))
        self.b = store.add(f"{name}.b", Tensor(np.zeros(c_out), requires_grad=True)) if bias else None
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return conv3d(x, self.w, self.b, stride=self.stride, padding=self.padding)


class AttentionBlock:
    """Pre-norm transformer block: multi-head self-attention then GELU MLP,
    both with residual connections."""

    def __init__(self, store, name, dim, heads, rng, mlp_ratio=4):
        if dim % heads != 0:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = 1.0 / np.sqrt(self.head_dim)
        self.ln1 = LayerNorm(store, f"{name}.ln1", dim)
        self.qkv = Linear(store, f"{name}.qkv", dim, 3 * dim, rng)
        self.proj = Linear(store, f"{name}.proj", dim, dim, rng)
        self.ln2 = LayerNorm(store, f"{name}.ln2", dim)
        self.fc1 = Linear(store, f"{name}.fc1", dim, mlp_ratio * dim, rng)
        self.fc2 = Linear(store, f"{name}.fc2", mlp_ratio * dim, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        bsz, length, dim = x.shape
        h = self.ln1(x)
        qkv = self.qkv(h).reshape(bsz, length, 3, self.heads, self.head_dim)
        qkv = qkv.transpose(2, 0, 3, 1, 4)            # (3, B, heads, L, hd)
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = softmax((q @ k.transpose(0, 1, 3, 2)) * self.scale, axis=-1)
        ctx = (att @ v).transpose(0, 2, 1, 3).reshape(bsz, length, dim)
        x = x + self.proj(ctx)
        h = self.ln2(x)
        return x + self.fc2(gelu(self.fc1(h)))


class MLP:
    """Plain stack of linears with GELU between (none after the last)."""

    def __init__(self, store, name, dims, rng, zero_last=False):
        self.layers = [
            Linear(store, f"{name}.{i}", dims[i], dims[i + 1], rng,
                   zero_init=(zero_last and i == len(dims) - 2))
            for i in range(len(dims) - 1)
        ]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = gelu(x)
        return x
