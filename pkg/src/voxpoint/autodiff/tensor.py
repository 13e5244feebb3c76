"""Reverse-mode automatic differentiation over numpy arrays.

Every operation builds a node that remembers its parent tensors and a
closure that routes the output gradient back to them.  ``backward()``
walks the recorded graph once in reverse topological order, accumulating
into ``.grad`` (summing when a tensor feeds several consumers).

Forward arithmetic delegates to numpy, whose reduction order for a fixed
shape is deterministic, so identical inputs reproduce results bitwise.
Training runs in float32; gradient checks switch the engine to float64
through ``use_dtype``.
"""

from __future__ import annotations

import contextlib

import numpy as np

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True
_CHECK_FINITE = False


def default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def use_dtype(dtype):
    """Temporarily change the dtype used for new leaf tensors."""
    global _DEFAULT_DTYPE
    prev = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


@contextlib.contextmanager
def no_grad():
    """Disable graph recording; operations return constant tensors."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled():
    return _GRAD_ENABLED


@contextlib.contextmanager
def checked():
    """Assert every gradient produced during backward is finite."""
    global _CHECK_FINITE
    prev = _CHECK_FINITE
    _CHECK_FINITE = True
    try:
        yield
    finally:
        _CHECK_FINITE = prev


def _unbroadcast(grad, shape):
    # Reduce a broadcast gradient back to the parent's shape.
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        if not np.issubdtype(arr.dtype, np.floating):
            raise TypeError(f"tensors are floating point, got {arr.dtype}")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- graph construction -------------------------------------------------

    @staticmethod
    def _make(data, parents, backward):
        """Create an interior node; collapses to a constant under no_grad."""
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(p for p in parents if p.requires_grad)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    def _accum(self, g):
        g = _unbroadcast(np.asarray(g), self.data.shape)
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad = self.grad + g

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar loss")
        if not self.requires_grad:
            raise ValueError("loss does not require grad")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()
                if _CHECK_FINITE:
                    for p in node._parents:
                        if p.grad is not None and not np.all(np.isfinite(p.grad)):
                            raise FloatingPointError("non-finite gradient")
                node._backward = None
                node._parents = ()

    def detach(self):
        """Constant view of this tensor's value; gradients stop here."""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out._parents = ()
        out._backward = None
        return out

    def zero_grad(self):
        self.grad = None

    # -- convenience --------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(()))

    def numpy(self):
        return self.data

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}{flag})"

    def __len__(self):
        return len(self.data)

    # -- arithmetic ---------------------------------------------------------

    def _coerce(self, other):
        if isinstance(other, Tensor):
            return other
        # Scalars and arrays adopt this tensor's dtype (not the global
        # default), so float64 graphs stay float64 end to end.
        return Tensor(other, dtype=self.data.dtype)

    def __add__(self, other):
        other = self._coerce(other)
        out = Tensor._make(self.data + other.data, (self, other), None)

        def backward():
            if self.requires_grad:
                self._accum(out.grad)
            if other.requires_grad:
                other._accum(out.grad)

        out._backward = backward
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Tensor._make(-self.data, (self,), None)

        def backward():
            self._accum(-out.grad)

        out._backward = backward
        return out

    def __sub__(self, other):
        other = self._coerce(other)
        out = Tensor._make(self.data - other.data, (self, other), None)

        def backward():
            if self.requires_grad:
                self._accum(out.grad)
            if other.requires_grad:
                other._accum(-out.grad)

        out._backward = backward
        return out

    def __rsub__(self, other):
        return self._coerce(other) - self

    def __mul__(self, other):
        other = self._coerce(other)
        out = Tensor._make(self.data * other.data, (self, other), None)

        def backward():
            if self.requires_grad:
                self._accum(out.grad * other.data)
            if other.requires_grad:
                other._accum(out.grad * self.data)

        out._backward = backward
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._coerce(other)
        out = Tensor._make(self.data / other.data, (self, other), None)

        def backward():
            if self.requires_grad:
                self._accum(out.grad / other.data)
            if other.requires_grad:
                other._accum(-out.grad * self.data / (other.data * other.data))

        out._backward = backward
        return out

    def __rtruediv__(self, other):
        return self._coerce(other) / self

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise TypeError("only scalar exponents are supported")
        out = Tensor._make(self.data ** p, (self,), None)

        def backward():
            self._accum(out.grad * p * self.data ** (p - 1))

        out._backward = backward
        return out

    def __matmul__(self, other):
        other = self._coerce(other)
        a, b = self.data, other.data
        if a.ndim < 2 or b.ndim < 2:
            raise ValueError("matmul operands must have rank >= 2")
        out = Tensor._make(np.matmul(a, b), (self, other), None)

        def backward():
            g = out.grad
            if self.requires_grad:
                self._accum(np.matmul(g, np.swapaxes(b, -1, -2)))
            if other.requires_grad:
                other._accum(np.matmul(np.swapaxes(a, -1, -2), g))

        out._backward = backward
        return out

    # -- shape ops ----------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        orig = self.data.shape
        out = Tensor._make(self.data.reshape(shape), (self,), None)

        def backward():
            self._accum(out.grad.reshape(orig))

        out._backward = backward
        return out

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)
        out = Tensor._make(self.data.transpose(axes), (self,), None)

        def backward():
            self._accum(out.grad.transpose(inv))

        out._backward = backward
        return out

    def __getitem__(self, key):
        def has_fancy(k):
            if isinstance(k, (np.ndarray, list)):
                return True
            if isinstance(k, tuple):
                return any(isinstance(e, (np.ndarray, list)) for e in k)
            return False

        if has_fancy(key):
            raise TypeError("array indexing is not differentiable here; "
                            "use ops.index_select or ops.embedding")
        out = Tensor._make(self.data[key], (self,), None)

        def backward():
            buf = np.zeros_like(self.data)
            buf[key] = out.grad
            self._accum(buf)

        out._backward = backward
        return out

    # -- reductions ---------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        out = Tensor._make(self.data.sum(axis=axis, keepdims=keepdims), (self,), None)
        shape = self.data.shape

        def backward():
            g = out.grad
            if axis is not None and not keepdims:
                ax = (axis,) if isinstance(axis, int) else tuple(axis)
                ax = tuple(a % len(shape) for a in ax)
                g = np.expand_dims(g, ax)
            self._accum(np.broadcast_to(g, shape))

        out._backward = backward
        return out

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod(
            [self.data.shape[a] for a in ((axis,) if isinstance(axis, int) else axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    def max(self, axis=None, keepdims=False):
        """Maximum reduction over one axis (or all).  Ties route the whole
        gradient to the first maximal entry, matching argmax."""
        out = Tensor._make(self.data.max(axis=axis, keepdims=keepdims),
                           (self,), None)

        def backward():
            g = out.grad
            mask = np.zeros_like(self.data)
            if axis is None:
                mask[np.unravel_index(int(self.data.argmax()),
                                      self.data.shape)] = 1.0
                self._accum(mask * g)
                return
            idx = np.expand_dims(self.data.argmax(axis=axis), axis)
            np.put_along_axis(mask, idx, 1.0, axis=axis)
            self._accum(mask * (g if keepdims else np.expand_dims(g, axis)))

        out._backward = backward
        return out

    # -- pointwise nonlinearities -------------------------------------------

    def exp(self):
        out = Tensor._make(np.exp(self.data), (self,), None)

        def backward():
            self._accum(out.grad * out.data)

        out._backward = backward
        return out

    def log(self):
        out = Tensor._make(np.log(self.data), (self,), None)

        def backward():
            self._accum(out.grad / self.data)

        out._backward = backward
        return out

    def sqrt(self):
        out = Tensor._make(np.sqrt(self.data), (self,), None)

        def backward():
            self._accum(out.grad * 0.5 / out.data)

        out._backward = backward
        return out

    def abs(self):
        out = Tensor._make(np.abs(self.data), (self,), None)

        def backward():
            self._accum(out.grad * np.sign(self.data))

        out._backward = backward
        return out

    def tanh(self):
        out = Tensor._make(np.tanh(self.data), (self,), None)

        def backward():
            self._accum(out.grad * (1.0 - out.data * out.data))

        out._backward = backward
        return out

    def sigmoid(self):
        # stable: sigma(x) = exp(-softplus(-x)) piecewise via np.where
        x = self.data
        out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                            np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        out = Tensor._make(out_data.astype(x.dtype), (self,), None)

        def backward():
            self._accum(out.grad * out.data * (1.0 - out.data))

        out._backward = backward
        return out

    def relu(self):
        out = Tensor._make(np.maximum(self.data, 0), (self,), None)

        def backward():
            self._accum(out.grad * (self.data > 0))

        out._backward = backward
        return out

    def clamp_min(self, lo):
        out = Tensor._make(np.maximum(self.data, lo), (self,), None)

        def backward():
            self._accum(out.grad * (self.data > lo))

        out._backward = backward
        return out


def stop_gradient(t):
    """Identity in the forward pass, zero gradient in the backward pass."""
    return t.detach() if isinstance(t, Tensor) else Tensor(t)


def as_tensor(x, requires_grad=False):
    return x if isinstance(x, Tensor) else Tensor(x, requires_grad=requires_grad)
