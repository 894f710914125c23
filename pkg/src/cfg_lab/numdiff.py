"""Finite-difference oracles.

These are the independent checks that the analytic gradients elsewhere in
the package are tested against; nothing here may call back into the
backprop code.
"""

from __future__ import annotations

from typing import Callable

import numpy as np


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function at x.

    (f(x + h e_i) - f(x - h e_i)) / (2 h), one coordinate at a time.
    """
    if h <= 0.0:
        raise ValueError("h must be positive")
    x = np.asarray(x, dtype=np.float64)
    flat = x.ravel()
    grad = np.empty_like(flat)
    for i in range(flat.size):
        bump = np.zeros_like(flat)
        bump[i] = h
        hi = float(f((flat + bump).reshape(x.shape)))
        lo = float(f((flat - bump).reshape(x.shape)))
        grad[i] = (hi - lo) / (2.0 * h)
    return grad.reshape(x.shape)


def finite_diff_params(loss: Callable[[], float], params: list[np.ndarray], h: float = 1e-5) -> list[np.ndarray]:
    """Central-difference gradients of a closure over a list of parameter
    arrays, perturbing each entry in place and restoring it."""
    grads = []
    for p in params:
        g = np.empty_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = p[idx]
            p[idx] = orig + h
            hi = float(loss())
            p[idx] = orig - h
            lo = float(loss())
            p[idx] = orig
            g[idx] = (hi - lo) / (2.0 * h)
        grads.append(g)
    return grads
