"""Neural-network operations with fused backward rules.

Everything here takes and returns :class:`~voxpoint.autodiff.tensor.Tensor`
except integer index arrays, which stay plain numpy (indices carry no
gradient).
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .tensor import Tensor

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-error linear unit, 0.5*x*(1+erf(x/sqrt(2)))."""
    d = x.data
    cdf = 0.5 * (1.0 + erf(d * _INV_SQRT2))
    out = Tensor._make((d * cdf).astype(d.dtype), (x,), None)

    def backward():
        pdf = np.exp(-0.5 * d * d) * _INV_SQRT_2PI
        x._accum(out.grad * (cdf + d * pdf))

    out._backward = backward
    return out


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)), computed as relu(x) + log(1 + exp(-|x|)).

    The rearrangement keeps the exponent non-positive, so the op never
    overflows and degrades gracefully to relu(x) for large |x|.
    """
    d = x.data
    val = np.maximum(d, 0.0) + np.log1p(np.exp(-np.abs(d)))
    out = Tensor._make(val.astype(d.dtype), (x,), None)

    def backward():
        # d/dx log(1+e^x) is the logistic sigmoid, stable in the same way.
        sig = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.clip(d, 0, None))),
                       np.exp(np.clip(d, None, 0)) / (1.0 + np.exp(np.clip(d, None, 0))))
        x._accum(out.grad * sig)

    out._backward = backward
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    d = x.data
    e = np.exp(d - d.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor._make(s, (x,), None)

    def backward():
        g = out.grad
        inner = (g * s).sum(axis=axis, keepdims=True)
        x._accum(s * (g - inner))

    out._backward = backward
    return out


def cross_entropy(logits: Tensor, targets, weights=None) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under ``logits``.

    ``weights`` (optional, per row) are normalized to sum to one, so the
    result is a weighted mean.  Rows with zero weight contribute nothing.
    """
    d = logits.data
    if d.ndim != 2:
        raise ValueError("logits must be (N, K)")
    targets = np.asarray(targets)
    if targets.shape != (d.shape[0],):
        raise ValueError("targets must be (N,)")
    n, k = d.shape
    shift = d - d.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shift).sum(axis=1, keepdims=True))
    logp = shift - lse
    if weights is None:
        wn = np.full(n, 1.0 / n, dtype=d.dtype)
    else:
        w = np.asarray(weights, dtype=d.dtype)
        tot = w.sum()
        if tot <= 0:
            raise ValueError("weights sum to zero")
        wn = w / tot
    rows = np.arange(n)
    val = -(wn * logp[rows, targets]).sum()
    out = Tensor._make(np.asarray(val, dtype=d.dtype), (logits,), None)

    def backward():
        p = np.exp(logp)
        p[rows, targets] -= 1.0
        logits._accum(out.grad * wn[:, None] * p)

    out._backward = backward
    return out


def embedding(table: Tensor, idx) -> Tensor:
    """Row lookup ``table[idx]``; gradients scatter-add back into the table."""
    idx = np.asarray(idx)
    if not np.issubdtype(idx.dtype, np.integer):
        raise TypeError("embedding indices must be integers")
    out = Tensor._make(table.data[idx], (table,), None)

    def backward():
        buf = np.zeros_like(table.data)
        np.add.at(buf, idx, out.grad)
        table._accum(buf)

    out._backward = backward
    return out


def index_select(t: Tensor, idx) -> Tensor:
    """Select rows along axis 0.  Duplicate indices accumulate gradient."""
    return embedding(t, idx)


def cat(tensors, axis: int = 0) -> Tensor:
    datas = [t.data for t in tensors]
    out = Tensor._make(np.concatenate(datas, axis=axis), tuple(tensors), None)
    sizes = [d.shape[axis] for d in datas]

    def backward():
        start = 0
        for t, size in zip(tensors, sizes):
            if t.requires_grad:
                sl = [slice(None)] * out.grad.ndim
                sl[axis] = slice(start, start + size)
                t._accum(out.grad[tuple(sl)])
            start += size

    out._backward = backward
    return out


# -- 3-D convolution ---------------------------------------------------------

def _corr3d(x, w, stride):
    """Raw cross-correlation of x (B,C,D,H,W) with w (O,C,k,k,k).

    Returns the output and the im2col matrix used, so the caller can keep
    it for the weight gradient.
    """
    b, c, d0, h0, w0 = x.shape
    o, _, k, _, _ = w.shape
    win = sliding_window_view(x, (k, k, k), axis=(2, 3, 4))
    if stride > 1:
        win = win[:, :, ::stride, ::stride, ::stride]
    _, _, od, oh, ow = win.shape[:5]
    cols = win.transpose(0, 2, 3, 4, 1, 5, 6, 7).reshape(b, od * oh * ow, c * k * k * k)
    wmat = w.reshape(o, -1)
    out = np.matmul(cols, wmat.T)                       # (B, P, O)
    out = out.transpose(0, 2, 1).reshape(b, o, od, oh, ow)
    return out, cols


def conv3d(x: Tensor, w: Tensor, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with cubic kernels over (B, C, D, H, W) volumes.

    Requires (side + 2*padding - k) to be divisible by stride so the
    transposed pass reconstructs the input extent exactly.
    """
    xd, wd = x.data, w.data
    if xd.ndim != 5 or wd.ndim != 5:
        raise ValueError("conv3d expects x (B,C,D,H,W) and w (O,C,k,k,k)")
    k = wd.shape[2]
    for side in xd.shape[2:]:
        if (side + 2 * padding - k) % stride != 0:
            raise ValueError(f"side {side} incompatible with k={k} s={stride} p={padding}")
    xp = np.pad(xd, ((0, 0), (0, 0)) + ((padding, padding),) * 3) if padding else xd
    out_data, cols = _corr3d(xp, wd, stride)
    if b is not None:
        out_data = out_data + b.data[None, :, None, None, None]
    parents = (x, w) if b is None else (x, w, b)
    out = Tensor._make(out_data, parents, None)

    def backward():
        g = out.grad
        bsz, o = g.shape[0], g.shape[1]
        gmat = g.reshape(bsz, o, -1).transpose(0, 2, 1)         # (B, P, O)
        if w.requires_grad:
            dw = np.einsum("bpo,bpt->ot", gmat, cols)
            w._accum(dw.reshape(wd.shape))
        if b is not None and b.requires_grad:
            b._accum(g.sum(axis=(0, 2, 3, 4)))
        if x.requires_grad:
            if stride > 1:
                dil = np.zeros((bsz, o) + tuple((s - 1) * stride + 1 for s in g.shape[2:]),
                               dtype=g.dtype)
                dil[:, :, ::stride, ::stride, ::stride] = g
            else:
                dil = g
            gp = np.pad(dil, ((0, 0), (0, 0)) + ((k - 1, k - 1),) * 3)
            wf = np.ascontiguousarray(wd[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
            dxp, _ = _corr3d(gp, wf, 1)
            if padding:
                sl = (slice(None), slice(None)) + (slice(padding, -padding),) * 3
                dxp = dxp[sl]
            x._accum(dxp)

    out._backward = backward
    return out


def upsample_nearest3d(x: Tensor, factor: int) -> Tensor:
    d = x.data
    if d.ndim != 5:
        raise ValueError("expects (B,C,D,H,W)")
    up = np.repeat(np.repeat(np.repeat(d, factor, axis=2), factor, axis=3), factor, axis=4)
    out = Tensor._make(up, (x,), None)
    b, c, dd, hh, ww = d.shape

    def backward():
        g = out.grad.reshape(b, c, dd, factor, hh, factor, ww, factor)
        x._accum(g.sum(axis=(3, 5, 7)))

    out._backward = backward
    return out


def avg_pool3d(x: Tensor, factor: int) -> Tensor:
    d = x.data
    b, c, dd, hh, ww = d.shape
    if dd % factor or hh % factor or ww % factor:
        raise ValueError("sides must divide the pooling factor")
    r = d.reshape(b, c, dd // factor, factor, hh // factor, factor, ww // factor, factor)
    out = Tensor._make(r.mean(axis=(3, 5, 7)), (x,), None)
    inv = 1.0 / factor ** 3

    def backward():
        g = out.grad * inv
        g = np.repeat(np.repeat(np.repeat(g, factor, axis=2), factor, axis=3), factor, axis=4)
        x._accum(g)

    out._backward = backward
    return out
