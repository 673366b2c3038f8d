"""Pose plausibility terms: Gaussian-mixture prior, joint limits, L2.

The mixture prior is evaluated over the non-root pose subvector (global
placement is not anatomical). Covariances are stored with a precomputed
Cholesky factor and log-determinant; the negative log-likelihood uses
log-sum-exp for stability and propagates dual derivatives.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import DegenerateInputError, DimensionMismatchError
from .optim import dual as dm
from .optim.dual import Dual

_LOG2PI = np.log(2.0 * np.pi)
COV_REG = 1e-6


@dataclass
class GmmPrior:
    weights: np.ndarray      # (K,) simplex
    means: np.ndarray        # (K,D)
    covariances: np.ndarray  # (K,D,D) symmetric positive definite
    fit_trace: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.means = np.asarray(self.means, dtype=float)
        self.covariances = np.asarray(self.covariances, dtype=float)
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise DegenerateInputError("mixture weights must form a simplex")
        self._chols = []
        self._logdets = np.empty(self.k)
        for k in range(self.k):
            try:
                L = scipy.linalg.cholesky(self.covariances[k], lower=True)
            except scipy.linalg.LinAlgError as e:
                raise DegenerateInputError(f"covariance {k} is not PD") from e
            self._chols.append(L)
            self._logdets[k] = 2.0 * np.sum(np.log(np.diag(L)))
        # constants of each component log-density, and a global lower bound
        # on the nll (density <= sum_k w_k * peak_k everywhere)
        self._log_norm = -0.5 * (self.dim * _LOG2PI + self._logdets)
        with np.errstate(divide="ignore"):
            logw = np.log(self.weights)
        self._logw = logw
        peaks = logw + self._log_norm
        m = peaks.max()
        self.nll_lower_bound = -(m + np.log(np.sum(np.exp(peaks - m))))

    @property
    def k(self):
        return self.weights.shape[0]

    @property
    def dim(self):
        return self.means.shape[1]

    def component_log_density(self, x):
        """Per-component log w_k + log N(x; mu_k, Sigma_k); x may be Dual."""
        parts = []
        for k in range(self.k):
            diff = x - self.means[k]
            L = self._chols[k]
            if isinstance(diff, Dual):
                y_val = scipy.linalg.solve_triangular(L, diff.val, lower=True)
                y_eps = scipy.linalg.solve_triangular(L, diff.eps, lower=True)
                y = Dual(y_val, y_eps)
            else:
                y = scipy.linalg.solve_triangular(L, diff, lower=True)
            maha = dm.norm2(y, axis=0) if isinstance(y, Dual) else float(y @ y)
            parts.append(self._logw[k] + self._log_norm[k] - 0.5 * maha)
        return parts

    def sample(self, n, rng):
        comp = rng.choice(self.k, size=n, p=self.weights)
        out = np.empty((n, self.dim))
        for k in range(self.k):
            m = comp == k
            if m.any():
                z = rng.standard_normal((int(m.sum()), self.dim))
                out[m] = self.means[k] + z @ self._chols[k].T
        return out


def gmm_nll(prior, x):
    """-log sum_k w_k N(x; mu_k, Sigma_k) in nats; x may be Dual."""
    xv = x.val if isinstance(x, Dual) else np.asarray(x, dtype=float)
    if xv.shape != (prior.dim,):
        raise DimensionMismatchError(
            f"pose subvector has dim {xv.shape}, prior expects ({prior.dim},)")
    parts = prior.component_log_density(x)
    if isinstance(x, Dual):
        stacked = dm.concat([p.reshape((1,)) for p in parts])
        return -dm.logsumexp(stacked)
    return float(-dm.logsumexp(np.array(parts)))


def _kmeans(samples, k, rng, iters=25):
    """Seeded k-means++ initialization followed by Lloyd iterations."""
    n = samples.shape[0]
    centers = np.empty((k, samples.shape[1]))
    centers[0] = samples[rng.integers(n)]
    d2 = np.sum((samples - centers[0]) ** 2, axis=1)
    for i in range(1, k):
        p = d2 / d2.sum() if d2.sum() > 0 else np.full(n, 1.0 / n)
        centers[i] = samples[rng.choice(n, p=p)]
        d2 = np.minimum(d2, np.sum((samples - centers[i]) ** 2, axis=1))
    assign = np.zeros(n, dtype=int)
    for it in range(iters):
        dists = np.linalg.norm(samples[:, None] - centers[None], axis=2)
        new_assign = dists.argmin(axis=1)
        if it > 0 and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for i in range(k):
            m = assign == i
            if m.any():
                centers[i] = samples[m].mean(axis=0)
    return centers, assign


def fit_gmm(samples, k, seed, max_iters=100, tol=0.0, reg=COV_REG):
    """EM from k-means initialization; per-iteration log-likelihood recorded.

    The mean training log-likelihood is appended to ``fit_trace`` after every
    EM iteration and is nondecreasing.
    """
    samples = np.asarray(samples, dtype=float)
    n, d = samples.shape
    if not np.all(np.isfinite(samples)):
        raise DegenerateInputError("samples contain non-finite values")
    if n < 10 * k:
        raise DegenerateInputError(f"need at least {10 * k} samples for K={k}")
    if np.max(samples.std(axis=0)) < 1e-12:
        raise DegenerateInputError("all samples identical")
    rng = np.random.Generator(np.random.Philox(key=seed))
    centers, assign = _kmeans(samples, k, rng)
    weights = np.bincount(assign, minlength=k).astype(float)
    weights = np.maximum(weights, 1.0)
    weights /= weights.sum()
    covs = np.empty((k, d, d))
    for i in range(k):
        m = assign == i
        pts = samples[m] if m.sum() >= 2 else samples
        diff = pts - pts.mean(axis=0)
        covs[i] = diff.T @ diff / len(pts) + reg * np.eye(d)
    means = centers
    trace = []
    prev_ll = -np.inf
    for _ in range(max_iters):
        # E-step: log responsibilities via cholesky solves
        log_r = np.empty((n, k))
        for i in range(k):
            L = scipy.linalg.cholesky(covs[i], lower=True)
            y = scipy.linalg.solve_triangular(L, (samples - means[i]).T, lower=True)
            maha = np.sum(y * y, axis=0)
            logdet = 2.0 * np.sum(np.log(np.diag(L)))
            log_r[:, i] = np.log(weights[i]) - 0.5 * (d * _LOG2PI + logdet + maha)
        m = log_r.max(axis=1, keepdims=True)
        lse = m[:, 0] + np.log(np.sum(np.exp(log_r - m), axis=1))
        ll = float(lse.mean())
        trace.append(ll)
        resp = np.exp(log_r - lse[:, None])
        # M-step
        nk = resp.sum(axis=0) + 1e-300
        weights = nk / n
        means = (resp.T @ samples) / nk[:, None]
        for i in range(k):
            diff = samples - means[i]
            covs[i] = (resp[:, i, None] * diff).T @ diff / nk[i] + reg * np.eye(d)
        if ll - prev_ll < tol and np.isfinite(prev_ll):
            break
        prev_ll = ll
    weights = weights / weights.sum()
    prior = GmmPrior(weights=weights, means=means, covariances=covs)
    prior.fit_trace = trace
    return prior


def joint_limit_penalty(rig, params):
    """Sum over joint axes of squared hinge violations of the limit box."""
    params.validate(rig)
    lo = rig.joint_limits[..., 0]
    hi = rig.joint_limits[..., 1]
    over = np.maximum(0.0, params.pose - hi)
    under = np.maximum(0.0, lo - params.pose)
    return float(np.sum(over * over) + np.sum(under * under))


def joint_limit_residuals(pose, limits):
    """Per-axis hinge residuals (flattened); squared sum = penalty. Dual-safe."""
    lo = limits[..., 0]
    hi = limits[..., 1]
    over = dm.hinge(pose - hi)
    under = dm.hinge(lo - pose)
    # lo < hi means at most one side is active, so (over+under)^2 = over^2+under^2
    return (over + under).ravel()


def pose_subvector(pose):
    """Non-root pose rows flattened; accepts (J,3) arrays or Duals."""
    return pose[1:].ravel()


def make_default_prior(rig, seed=0, k=8, n_samples=600, max_iters=40):
    """Desk-scale prior: EM fit over poses drawn by the synthetic sampler."""
    from .synth import sample_params  # local import to avoid a cycle

    rng_seed = np.random.SeedSequence([seed, 0x9E37]).generate_state(1)[0]
    samples = np.stack([
        np.asarray(pose_subvector(
            sample_params(rig, seed=int(rng_seed) + i).pose))
        for i in range(n_samples)
    ])
    return fit_gmm(samples, k=k, seed=seed, max_iters=max_iters, tol=1e-8)
