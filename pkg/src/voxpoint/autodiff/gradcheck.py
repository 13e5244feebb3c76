"""Central-difference gradient verification.

``fd_check`` evaluates a scalar-producing closure, backpropagates, then
perturbs sampled entries of each leaf tensor in place and compares the
analytic gradient against (f(x+eps) - f(x-eps)) / (2 eps).  Run it under
``use_dtype(np.float64)``; float32 rounding swamps the tolerance.
"""

from __future__ import annotations

import numpy as np

from .tensor import no_grad


def fd_check(fn, leaves, eps=1e-5, rtol=1e-4, floor=1e-3,
             max_entries=8, rng=None):
    """Check d fn / d leaf for every tensor in ``leaves``.

    Relative error uses max(floor, |analytic|, |numeric|) as denominator,
    so near-zero gradients are compared absolutely at floor * rtol.

    Returns the worst relative error seen.  Raises AssertionError with
    the offending leaf and index on failure.
    """
    rng = rng or np.random.default_rng(0)
    for t in leaves:
        t.grad = None
    loss = fn()
    if loss.data.dtype != np.float64:
        raise AssertionError("gradient checks must run in float64")
    loss.backward()
    analytic = []
    for t in leaves:
        if t.grad is None:
            raise AssertionError("leaf received no gradient")
        analytic.append(t.grad.copy())
    worst = 0.0
    for li, t in enumerate(leaves):
        flat = t.data.reshape(-1)
        n = flat.size
        if n <= max_entries:
            idxs = np.arange(n)
        else:
            idxs = rng.choice(n, size=max_entries, replace=False)
        for i in idxs:
            x0 = flat[i]
            with no_grad():
                flat[i] = x0 + eps
                fp = fn().item()
                flat[i] = x0 - eps
                fm = fn().item()
                flat[i] = x0
            num = (fp - fm) / (2.0 * eps)
            ana = float(analytic[li].reshape(-1)[i])
            rel = abs(ana - num) / max(floor, abs(ana), abs(num))
            worst = max(worst, rel)
            if rel >= rtol:
                raise AssertionError(
                    f"gradient mismatch at leaf {li} index {i}: "
                    f"analytic {ana:.8e} numeric {num:.8e} rel {rel:.3e}")
    return worst
