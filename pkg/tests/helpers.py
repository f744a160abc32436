"""Shared test utilities: the central finite-difference oracle and a
relative-error metric for gradient checks."""

import numpy as np


def numeric_grad(scalar_fn, leaf, h=1e-5):
    """Central finite differences of ``scalar_fn`` w.r.t. ``leaf``.

    ``scalar_fn`` must rebuild its computation from the current contents
    of ``leaf`` (a float64 array mutated in place) and return a float.
    """
    grad = np.zeros_like(leaf)
    flat_x = leaf.ravel()
    flat_g = grad.ravel()
    for i in range(leaf.size):
        orig = flat_x[i]
        flat_x[i] = orig + h
        fp = scalar_fn()
        flat_x[i] = orig - h
        fm = scalar_fn()
        flat_x[i] = orig
        flat_g[i] = (fp - fm) / (2.0 * h)
    return grad


def rel_err(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-8)
    return float(np.abs(analytic - numeric).max() / scale)
