"""First-order (Adam) and Levenberg-Marquardt solvers on residual problems.

Both minimize the scalar cost 0.5 * sum(r_i^2), are deterministic, and report
a trace of accepted costs. Problems only need ``residuals(x)``/``jacobian(x)``
methods, so structured problems (e.g. block-assembled Jacobians) plug in the
same way as a plain ResidualProblem.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from ..errors import NumericError

# the dense problems here are tiny (a few hundred parameters); BLAS thread
# fan-out costs far more than it saves, so pin the pools to one thread
try:
    import threadpoolctl

    threadpoolctl.threadpool_limits(limits=1, user_api="blas")
except Exception:  # pragma: no cover - best effort
    pass


@dataclass
class FirstOrderConfig:
    step: float = 1e-2
    iters: int = 300
    tol: float = 1e-8
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class LMConfig:
    max_iters: int = 100
    lam_init: float = 1e-3
    lam_up: float = 10.0
    lam_down: float = 1.0 / 3.0
    tol: float = 1e-10          # relative cost improvement
    gtol: float = 1e-10         # infinity norm of the gradient
    xtol: float = 1e-14         # relative step size
    lam_max: float = 1e12


@dataclass
class SolveResult:
    x: np.ndarray
    cost: float
    cost_trace: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    message: str = ""


def _cost_of(r):
    return 0.5 * float(r @ r)


def solve_first_order(problem, x0, config=None):
    """Adam-style descent; returns the best-so-far iterate."""
    cfg = config or FirstOrderConfig()
    x = np.asarray(x0, dtype=float).copy()
    free = problem.layout.free_mask() if hasattr(problem, "layout") else np.ones(x.size, bool)
    r = problem.residuals(x)
    cost = _cost_of(r)
    if not np.isfinite(cost):
        raise NumericError("initial cost is non-finite")
    best_x, best_cost = x.copy(), cost
    trace = [cost]
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    prev = cost
    for it in range(1, cfg.iters + 1):
        # stop check first so tol=inf returns x0 untouched
        if it > 1:
            rel = (prev - cost) / max(abs(prev), 1e-300)
            prev = cost
        else:
            rel = np.inf
        if rel < cfg.tol:
            return SolveResult(best_x, best_cost, trace, it - 1, True, "tolerance reached")
        J = problem.jacobian(x)
        g = J.T @ r
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g
        mhat = m / (1.0 - cfg.beta1**it)
        vhat = v / (1.0 - cfg.beta2**it)
        step = cfg.step * mhat / (np.sqrt(vhat) + cfg.eps)
        step[~free] = 0.0
        x = x - step
        r = problem.residuals(x)
        cost = _cost_of(r)
        if not np.isfinite(cost):
            return SolveResult(best_x, best_cost, trace, it, False,
                               "diverged to non-finite cost")
        trace.append(cost)
        if cost < best_cost:
            best_cost, best_x = cost, x.copy()
    return SolveResult(best_x, best_cost, trace, cfg.iters, False, "iteration cap")


def solve_lm(problem, x0, config=None):
    """Levenberg-Marquardt with multiplicative damping.

    Steps are accepted only when the cost decreases, so the accepted-cost
    sequence is strictly decreasing. Normal-equation solve failures raise the
    damping instead of aborting.
    """
    cfg = config or LMConfig()
    x = np.asarray(x0, dtype=float).copy()
    r = problem.residuals(x)
    cost = _cost_of(r)
    if not np.isfinite(cost):
        raise NumericError("initial cost is non-finite")
    trace = [cost]
    lam = cfg.lam_init
    accepted = 0
    message = "iteration cap"
    converged = False
    for _ in range(cfg.max_iters):
        J = problem.jacobian(x)
        g = J.T @ r
        if np.max(np.abs(g)) < cfg.gtol:
            converged, message = True, "gradient below tolerance"
            break
        JtJ = J.T @ J
        stepped = False
        while lam <= cfg.lam_max:
            H = JtJ + lam * np.eye(x.size)
            try:
                c, low = scipy.linalg.cho_factor(H, check_finite=False)
                delta = scipy.linalg.cho_solve((c, low), -g, check_finite=False)
            except scipy.linalg.LinAlgError:
                lam *= cfg.lam_up
                continue
            x_new = x + delta
            try:
                r_new = problem.residuals(x_new)
                cost_new = _cost_of(r_new)
            except FloatingPointError:
                cost_new = np.inf
            if np.isfinite(cost_new) and cost_new < cost:
                step_rel = np.linalg.norm(delta) / max(np.linalg.norm(x), 1.0)
                rel_impr = (cost - cost_new) / max(cost, 1e-300)
                x, r, cost = x_new, r_new, cost_new
                trace.append(cost)
                accepted += 1
                lam = max(lam * cfg.lam_down, 1e-14)
                stepped = True
                if rel_impr < cfg.tol:
                    converged, message = True, "cost improvement below tolerance"
                elif step_rel < cfg.xtol:
                    converged, message = True, "step below tolerance"
                break
            lam *= cfg.lam_up
        if not stepped:
            converged, message = False, "damping exhausted (no descent step)"
            break
        if converged:
            break
    return SolveResult(x, cost, trace, accepted, converged, message)
