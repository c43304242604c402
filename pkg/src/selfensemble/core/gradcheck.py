"""Central finite-difference gradient estimates, used to verify ``backward``."""

import numpy as np


def numerical_gradient(fn, array, eps=1e-3):
    """Estimate d fn() / d array by central differences, perturbing in place.

    ``fn`` must be a zero-argument callable returning a float that reads
    ``array`` each time it is called.
    """
    grad = np.zeros(array.shape, dtype=np.float64)
    flat = array.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = fn()
        flat[i] = orig - eps
        down = fn()
        flat[i] = orig
        out[i] = (up - down) / (2.0 * eps)
    return grad


def relative_error(analytic, numeric):
    """Norm-wise relative error; 0 when both gradients vanish."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale == 0:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)
