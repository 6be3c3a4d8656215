"""Shared test utilities: finite-difference oracles."""

import numpy as np


def central_difference(f, x, h=1e-5):
    """Central finite-difference gradient of a scalar function of an array."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = grad.reshape(-1)
    xf = x.reshape(-1)
    for i in range(xf.size):
        bump = np.zeros_like(xf)
        bump[i] = h
        hi = f((xf + bump).reshape(x.shape))
        lo = f((xf - bump).reshape(x.shape))
        flat[i] = (hi - lo) / (2 * h)
    return grad


def relative_error(a, b):
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    denom = max(np.linalg.norm(b), 1e-12)
    return np.linalg.norm(a - b) / denom
