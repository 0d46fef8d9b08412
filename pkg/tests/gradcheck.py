"""Shared finite-difference oracles for gradient tests."""

import numpy as np


def numeric_grad(f, x, h=1e-5):
    """Central-difference gradient of scalar f at x (any array shape)."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.ravel()
    gflat = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f(x)
        flat[i] = orig - h
        down = f(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return g


def assert_grad_close(analytic, numeric, rtol=1e-4, atol=1e-6):
    np.testing.assert_allclose(analytic, numeric, rtol=rtol, atol=atol)


def max_grad_error(analytic, numeric, atol=1e-6):
    """max over entries of |a - n| / max(|n|, atol)."""
    a = np.asarray(analytic).ravel()
    n = np.asarray(numeric).ravel()
    return float(np.max(np.abs(a - n) / np.maximum(np.abs(n), atol)))
