"""Shared test oracles: finite differences and gradient comparison."""

import numpy as np
import pytest


def finite_difference(fn, arrays, step=1e-5):
    """Central-difference gradients of scalar fn(*arrays) w.r.t. each array.

    fn must be a pure function of the numpy inputs; arrays are mutated in
    place during probing and restored afterwards.
    """
    grads = []
    for arr in arrays:
        grad = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = fn(*arrays)
            flat[i] = orig - step
            lo = fn(*arrays)
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * step)
        grads.append(grad)
    return grads


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-8)
    return float(np.linalg.norm(analytic - numeric) / scale)


def assert_grad_close(analytic, numeric, tol=1e-4):
    err = relative_error(np.asarray(analytic), np.asarray(numeric))
    assert err < tol, f"gradient mismatch: relative error {err:.3e} >= {tol}"


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
