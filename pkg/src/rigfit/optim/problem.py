"""Residual problems and Jacobian evaluation.

A residual evaluator is a pure function mapping a flat parameter vector to a
residual vector. It must accept either a plain ndarray or a ``Dual`` seeded on
the free dimensions; derivative propagation then yields the Jacobian in one
forward pass. Finite differences are kept as a cross-check mode only.
"""

import numpy as np

from ..errors import NumericError
from .dual import Dual, value


class ResidualProblem:
    """Wraps a residual evaluator with a parameter layout.

    derivative mode: "forward" (dual-number propagation) or "fd" (central
    finite differences, test oracle).
    """

    def __init__(self, fn, layout, mode="forward", fd_step=1e-6):
        if mode not in ("forward", "fd"):
            raise ValueError(f"unknown derivative mode {mode!r}")
        self.fn = fn
        self.layout = layout
        self.mode = mode
        self.fd_step = fd_step

    def residuals(self, x):
        r = value(self.fn(np.asarray(x, dtype=float)))
        return np.atleast_1d(r)

    def jacobian(self, x):
        """Residual Jacobian with zero columns for frozen blocks."""
        x = np.asarray(x, dtype=float)
        if not np.all(np.isfinite(x)):
            raise NumericError("parameter vector contains non-finite values")
        if self.mode == "fd":
            return self._jacobian_fd(x)
        free = self.layout.free_indices()
        out = self.fn(Dual.seed(x, free))
        J = np.zeros((np.size(value(out)), self.layout.total))
        if isinstance(out, Dual):
            if not np.all(np.isfinite(out.val)):
                raise NumericError("residuals are non-finite")
            J[:, free] = out.eps.reshape(-1, len(free))
        return J

    def _jacobian_fd(self, x):
        r0 = self.residuals(x)
        J = np.zeros((r0.size, self.layout.total))
        for i in self.layout.free_indices():
            h = self.fd_step * max(1.0, abs(x[i]))
            xp = x.copy()
            xp[i] += h
            xm = x.copy()
            xm[i] -= h
            J[:, i] = (self.residuals(xp) - self.residuals(xm)) / (2.0 * h)
        return J

    def cost(self, x):
        r = self.residuals(x)
        return 0.5 * float(r @ r)
