"""Catalog of differentiable-operator cases shared by the unit tests and
the acceptance gradient sweep.

Each case builds float64 leaves and a closure computing a scalar that
touches every output element (weighted sum against a random matrix fixed
at build time), so finite differences exercise the full jacobian row.
Builders must run under ``use_dtype(np.float64)``.
"""

import numpy as np

from voxpoint.autodiff import (AttentionBlock, LayerNorm, Linear, MLP,
                               ParameterStore, Tensor, avg_pool3d, cat,
                               conv3d, cross_entropy, embedding, gelu,
                               index_select, no_grad, softmax, softplus,
                               stop_gradient, upsample_nearest3d)


def _leaf(rng, shape, scale=1.0, offset=0.0):
    return Tensor(rng.normal(size=shape) * scale + offset, requires_grad=True,
                  dtype=np.float64)


def _weighted_closure(rng, f):
    """Scalarize ``f()`` with a weight matrix drawn once, not per call."""
    with no_grad():
        probe = f()
    wmat = Tensor(rng.normal(size=probe.shape), dtype=np.float64)
    return lambda: (f() * wmat).sum()


def conv3d_reference(x, w, b=None, stride=1, padding=0):
    """Seven-loop cross-correlation oracle for small shapes."""
    bs, c, d0, h0, w0 = x.shape
    o, _, k, _, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0)) + ((padding, padding),) * 3)
    od = (d0 + 2 * padding - k) // stride + 1
    oh = (h0 + 2 * padding - k) // stride + 1
    ow = (w0 + 2 * padding - k) // stride + 1
    out = np.zeros((bs, o, od, oh, ow), dtype=x.dtype)
    for bi in range(bs):
        for oi in range(o):
            for zi in range(od):
                for yi in range(oh):
                    for xi in range(ow):
                        patch = xp[bi, :, zi * stride:zi * stride + k,
                                   yi * stride:yi * stride + k,
                                   xi * stride:xi * stride + k]
                        out[bi, oi, zi, yi, xi] = (patch * w[oi]).sum()
            if b is not None:
                out[bi, oi] += b[oi]
    return out


def _randomize(store, rng, scale=0.3):
    # Nudge module parameters off their ones/zeros init so gradients are
    # generic; keeps float64 dtype.
    for t in store.tensors():
        t.data = t.data + rng.normal(size=t.data.shape) * scale


def op_cases():
    """Yield (name, build) pairs; build(rng) -> (fn, leaves)."""

    def simple(f, *shapes, **leafkw):
        def build(rng):
            leaves = [_leaf(rng, s, **leafkw) for s in shapes]
            return _weighted_closure(rng, lambda: f(*leaves)), leaves
        return build

    cases = [
        ("add", simple(lambda a, b: a + b, (3, 4), (3, 4))),
        ("add_broadcast", simple(lambda a, b: a + b, (3, 4), (4,))),
        ("sub", simple(lambda a, b: a - b, (3, 4), (3, 4))),
        ("mul", simple(lambda a, b: a * b, (3, 4), (3, 4))),
        ("mul_broadcast", simple(lambda a, b: a * b, (2, 3, 4), (3, 1))),
        ("div", simple(lambda a, b: a / b, (3, 4), (3, 4), offset=3.0)),
        ("neg", simple(lambda a: -a, (5,))),
        ("pow2", simple(lambda a: a ** 2, (3, 4))),
        ("pow_neg1", simple(lambda a: a ** -1, (3, 4), offset=4.0)),
        ("scalar_radd", simple(lambda a: 2.5 + a, (3,))),
        ("scalar_rsub", simple(lambda a: 1.0 - a, (3,))),
        ("matmul", simple(lambda a, b: a @ b, (3, 4), (4, 5))),
        ("matmul_batched", simple(lambda a, b: a @ b, (2, 3, 4), (2, 4, 5))),
        ("matmul_bcast_rhs", simple(lambda a, b: a @ b, (2, 3, 4), (4, 5))),
        ("reshape", simple(lambda a: a.reshape(4, 3), (3, 4))),
        ("transpose", simple(lambda a: a.transpose(1, 0, 2), (2, 3, 4))),
        ("getitem", simple(lambda a: a[1:, ::2], (4, 6))),
        ("sum_axis", simple(lambda a: a.sum(axis=1), (3, 4))),
        ("sum_keepdims", simple(lambda a: a.sum(axis=(0, 2), keepdims=True), (2, 3, 4))),
        ("mean_axis", simple(lambda a: a.mean(axis=-1), (3, 4))),
        ("exp", simple(lambda a: a.exp(), (3, 4))),
        ("log", simple(lambda a: a.log(), (3, 4), offset=4.0)),
        ("sqrt", simple(lambda a: a.sqrt(), (3, 4), offset=4.0)),
        ("abs", simple(lambda a: a.abs(), (3, 4), offset=2.0)),
        ("tanh", simple(lambda a: a.tanh(), (3, 4))),
        ("sigmoid", simple(lambda a: a.sigmoid(), (3, 4))),
        ("relu", simple(lambda a: a.relu(), (3, 4), offset=1.5)),
        ("clamp_min", simple(lambda a: a.clamp_min(0.5), (3, 4), offset=2.0)),
        ("gelu", simple(gelu, (3, 4))),
        ("softplus", simple(softplus, (3, 4))),
        ("softmax", simple(lambda a: softmax(a, axis=-1), (3, 5))),
        ("max_axis", simple(lambda a: a.max(axis=1), (3, 4))),
        ("max_neg_axis_keepdims", simple(lambda a: a.max(axis=-1, keepdims=True), (2, 3, 4))),
        ("max_all", simple(lambda a: a.max().reshape(1), (3, 4))),
        ("cat", simple(lambda a, b: cat([a, b], axis=1), (3, 2), (3, 4))),
        ("upsample_nearest", simple(lambda a: upsample_nearest3d(a, 2), (1, 2, 2, 2, 2))),
        ("avg_pool", simple(lambda a: avg_pool3d(a, 2), (1, 2, 4, 4, 4))),
    ]

    def build_ce(rng):
        logits = _leaf(rng, (6, 5))
        targets = rng.integers(0, 5, size=6)
        return (lambda: cross_entropy(logits, targets)), [logits]

    cases.append(("cross_entropy", build_ce))

    def build_ce_weighted(rng):
        logits = _leaf(rng, (6, 5))
        targets = rng.integers(0, 5, size=6)
        w = rng.random(6)
        w[0] = 0.0
        return (lambda: cross_entropy(logits, targets, weights=w)), [logits]

    cases.append(("cross_entropy_weighted", build_ce_weighted))

    def build_embedding(rng):
        table = _leaf(rng, (7, 4))
        idx = np.array([0, 3, 3, 6, 1])        # duplicates accumulate
        return _weighted_closure(rng, lambda: embedding(table, idx)), [table]

    cases.append(("embedding", build_embedding))

    def build_index_select(rng):
        t = _leaf(rng, (5, 3))
        idx = np.array([4, 0, 4])
        return _weighted_closure(rng, lambda: index_select(t, idx)), [t]

    cases.append(("index_select", build_index_select))

    def build_stop_gradient(rng):
        a = _leaf(rng, (3, 4))
        b = _leaf(rng, (3, 4))
        # b enters only through the detached branch; backward must skip it
        return _weighted_closure(rng, lambda: a * stop_gradient(b * 2.0)), [a]

    cases.append(("stop_gradient", build_stop_gradient))

    for name, stride, pad in [("conv3d_s1p1", 1, 1), ("conv3d_s2p1", 2, 1),
                              ("conv3d_s1p0", 1, 0)]:
        def build_conv(rng, stride=stride, pad=pad):
            x = _leaf(rng, (2, 2, 5, 5, 5))
            w = _leaf(rng, (3, 2, 3, 3, 3), scale=0.3)
            b = _leaf(rng, (3,))
            return _weighted_closure(
                rng, lambda: conv3d(x, w, b, stride=stride, padding=pad)), [x, w, b]
        cases.append((name, build_conv))

    def build_layernorm(rng):
        store = ParameterStore()
        ln = LayerNorm(store, "ln", 6)
        _randomize(store, rng)
        x = _leaf(rng, (3, 6))
        return _weighted_closure(rng, lambda: ln(x)), [x] + store.tensors()

    cases.append(("layer_norm", build_layernorm))

    def build_linear(rng):
        store = ParameterStore()
        lin = Linear(store, "lin", 4, 3, rng)
        _randomize(store, rng)
        x = _leaf(rng, (5, 4))
        return _weighted_closure(rng, lambda: lin(x)), [x] + store.tensors()

    cases.append(("linear", build_linear))

    def build_attention(rng):
        store = ParameterStore()
        blk = AttentionBlock(store, "blk", 8, 2, rng)
        _randomize(store, rng, scale=0.05)
        x = _leaf(rng, (2, 3, 8))
        return _weighted_closure(rng, lambda: blk(x)), [x] + store.tensors()

    cases.append(("attention_block", build_attention))

    def build_mlp(rng):
        store = ParameterStore()
        mlp = MLP(store, "mlp", (4, 8, 3), rng)
        _randomize(store, rng, scale=0.05)
        x = _leaf(rng, (5, 4))
        return _weighted_closure(rng, lambda: mlp(x)), [x] + store.tensors()

    cases.append(("mlp", build_mlp))

    return cases
