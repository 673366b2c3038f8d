"""Huber robustification as residual reweighting.

The robustified residual r~ satisfies r~^2 = rho(r) with rho quadratic inside
|r| <= delta and linear (2*delta*|r| - delta^2) outside, so it drops straight
into sum-of-squares solvers.
"""

import numpy as np

from ..errors import RigfitError
from . import dual as dm
from .dual import Dual


def _values(x):
    return x.val if isinstance(x, Dual) else np.asarray(x, dtype=float)


def huber(residual, delta):
    """Elementwise robustified residual; works on ndarrays and Duals."""
    if delta <= 0:
        raise RigfitError("huber delta must be positive")
    v = _values(residual)
    inside = np.abs(v) <= delta
    absr = dm.where(v >= 0, residual, -residual)
    # sqrt argument is >= delta^2 on the outside branch; clamp the unused
    # inside lane so the derivative stays finite
    arg = dm.where(inside, np.full_like(v, delta * delta), 2.0 * delta * absr - delta * delta)
    robust = dm.where(v >= 0, dm.sqrt(arg), -dm.sqrt(arg))
    return dm.where(inside, residual, robust)


def huber_norm(r2d, delta):
    """Robustify 2-vector residuals (K,2) by their Euclidean norm.

    Returns r * sqrt(rho(|r|))/|r| so each pair's squared sum equals rho(|r|).
    """
    if delta <= 0:
        raise RigfitError("huber delta must be positive")
    n2 = dm.norm2(r2d, axis=-1)
    n2v = _values(n2)
    inside = n2v <= delta * delta
    safe_n2 = dm.where(inside, np.full_like(n2v, delta * delta), n2)
    n = dm.sqrt(safe_n2)
    w2 = (2.0 * delta * n - delta * delta) / safe_n2
    w = dm.where(inside, np.ones_like(n2v), dm.sqrt(w2))
    w = w.reshape(w.shape + (1,)) if isinstance(w, Dual) else w[..., None]
    return r2d * w


def huber_cost(r, delta):
    """rho(r) summed over elements (plain arrays)."""
    a = np.abs(np.asarray(r, dtype=float))
    return float(np.sum(np.where(a <= delta, a * a, 2.0 * delta * a - delta**2)))
