"""Finite-difference gradient checking.

The numeric oracle never touches the reverse-mode machinery: it calls
the function under test at perturbed inputs and forms central
differences in float64.  Comparisons use an elementwise relative error
with a floored denominator so near-zero gradients do not blow up the
ratio.
"""

from __future__ import annotations

import numpy as np

from .tensor import DTensor, backward, no_grad

DEFAULT_EPS = 1e-5
REL_FLOOR = 1e-6


def finite_difference_gradient(f, x, eps=DEFAULT_EPS):
    """Central-difference gradient of scalar f at ndarray x (float64).

    f takes an ndarray and returns a python float (or 0-d array).
    """
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f(x))
        flat[i] = orig - eps
        lo = float(f(x))
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad


def max_relative_error(a, b, floor=REL_FLOOR):
    """max_i |a_i - b_i| / max(floor, |a_i|, |b_i|)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(floor, np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / denom))


def check_gradients(build, arrays, eps=DEFAULT_EPS, floor=REL_FLOOR):
    """Compare reverse-mode and numeric gradients of a scalar function.

    ``build`` maps a list of DTensors to a scalar DTensor.  ``arrays``
    is the list of float64 input ndarrays to differentiate against.
    Returns the maximum relative error over all inputs and elements.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    tensors = [DTensor(a.copy(), requires_grad=True, dtype=np.float64) for a in arrays]
    out = build(tensors)
    backward(out)
    worst = 0.0
    for i, (t, base) in enumerate(zip(tensors, arrays)):
        def scalar_f(x, i=i):
            probe = [DTensor(a.copy(), dtype=np.float64) for a in arrays]
            probe[i] = DTensor(np.asarray(x, dtype=np.float64), dtype=np.float64)
            with no_grad():
                return float(build(probe).data)

        numeric = finite_difference_gradient(scalar_f, base, eps=eps)
        analytic = t.grad if t.grad is not None else np.zeros_like(base)
        worst = max(worst, max_relative_error(analytic, numeric, floor=floor))
    return worst
