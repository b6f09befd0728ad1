"""Central finite-difference gradient oracle shared by the test suite.

Kept independent of the autodiff engine: it only evaluates black-box scalar
functions of numpy arrays, so it cannot inherit a bug from the code it
checks.
"""

import numpy as np


def numerical_grad(fn, arrays, index, eps=1e-5):
    """d fn / d arrays[index] by central differences, elementwise.

    fn takes a list of numpy arrays and returns a float. Only the array at
    `index` is perturbed; the rest pass through untouched.
    """
    base = [a.copy() for a in arrays]
    target = base[index]
    grad = np.zeros_like(target)
    flat = target.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = fn(base)
        flat[i] = orig - eps
        fm = fn(base)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def rel_error(analytic, numeric):
    """Max-norm relative disagreement between two gradient arrays."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = max(np.abs(numeric).max(initial=0.0), np.abs(analytic).max(initial=0.0), 1e-8)
    return np.abs(analytic - numeric).max(initial=0.0) / denom
