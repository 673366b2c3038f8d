"""Vectorized forward-mode dual numbers.

A ``Dual`` carries an array of values plus, for every element, the partial
derivatives with respect to a fixed set of seed directions. ``val`` has an
arbitrary shape ``S`` and ``eps`` has shape ``S + (n_dirs,)``. All arithmetic
propagates derivatives with numpy broadcasting, so whole residual vectors can
be differentiated in one pass.

Plain ndarrays/scalars mix freely with ``Dual`` operands (they are treated as
constants). Use the module-level math helpers (``sin``, ``sqrt``, ``where``,
...) instead of the numpy ufuncs so code works on both kinds of input.
"""

import numpy as np


class Dual:
    __slots__ = ("val", "eps")

    # opt out of numpy ufunc dispatch so ndarray <op> Dual defers to the
    # reflected operators below instead of broadcasting over an object array
    __array_ufunc__ = None

    def __init__(self, val, eps):
        self.val = val
        self.eps = eps

    @property
    def ndirs(self):
        return self.eps.shape[-1]

    @property
    def shape(self):
        return np.shape(self.val)

    @classmethod
    def seed(cls, x, free_indices):
        """Seed a 1-D parameter vector: unit derivative per free index."""
        x = np.asarray(x, dtype=float)
        eps = np.zeros(x.shape + (len(free_indices),))
        eps[free_indices, np.arange(len(free_indices))] = 1.0
        return cls(x.copy(), eps)

    @classmethod
    def constant(cls, x, ndirs):
        x = np.asarray(x, dtype=float)
        return cls(x, np.zeros(x.shape + (ndirs,)))

    def __repr__(self):
        return f"Dual(shape={self.shape}, ndirs={self.ndirs})"

    # -- shape plumbing ----------------------------------------------------

    def __getitem__(self, key):
        # expand Ellipsis against the value shape so it never swallows the
        # trailing derivative axis of eps
        if not isinstance(key, tuple):
            key = (key,)
        if any(k is Ellipsis for k in key):
            i = next(i for i, k in enumerate(key) if k is Ellipsis)
            fill = (slice(None),) * (np.ndim(self.val) - (len(key) - 1))
            key = key[:i] + fill + key[i + 1:]
        return Dual(self.val[key], self.eps[key])

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return Dual(self.val.reshape(shape), self.eps.reshape(shape + (self.ndirs,)))

    def ravel(self):
        return self.reshape((int(np.prod(self.shape)),) if self.shape else (1,))

    def sum(self, axis=None):
        if axis is None:
            return Dual(np.asarray(self.val.sum()),
                        self.eps.reshape(-1, self.ndirs).sum(axis=0))
        axis = axis % self.val.ndim
        return Dual(self.val.sum(axis=axis), self.eps.sum(axis=axis))

    # -- arithmetic --------------------------------------------------------

    def __neg__(self):
        return Dual(-self.val, -self.eps)

    def __add__(self, other):
        if isinstance(other, Dual):
            return Dual(self.val + other.val, self.eps + other.eps)
        return Dual(self.val + other, _tile_eps(self.eps, np.shape(self.val + other)))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Dual):
            return Dual(self.val - other.val, self.eps - other.eps)
        return Dual(self.val - other, _tile_eps(self.eps, np.shape(self.val - other)))

    def __rsub__(self, other):
        return Dual(other - self.val, _tile_eps(-self.eps, np.shape(other - self.val)))

    def __mul__(self, other):
        if isinstance(other, Dual):
            return Dual(
                self.val * other.val,
                self.val[..., None] * other.eps + other.val[..., None] * self.eps,
            )
        other = np.asarray(other)
        return Dual(self.val * other, self.eps * other[..., None])

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Dual):
            inv = 1.0 / other.val
            val = self.val * inv
            return Dual(val, (self.eps - val[..., None] * other.eps) * inv[..., None])
        other = np.asarray(other)
        return Dual(self.val / other, self.eps / other[..., None])

    def __rtruediv__(self, other):
        inv = 1.0 / self.val
        val = other * inv
        return Dual(val, -val[..., None] * inv[..., None] * self.eps)

    def __pow__(self, p):
        return Dual(self.val**p, (p * self.val ** (p - 1))[..., None] * self.eps)


def _tile_eps(eps, shape):
    """Broadcast an eps block to a new value shape (for add with broadcast)."""
    target = shape + (eps.shape[-1],)
    if eps.shape == target:
        return eps
    return np.broadcast_to(eps, target).copy()


def value(x):
    return x.val if isinstance(x, Dual) else np.asarray(x, dtype=float)


def is_dual(x):
    return isinstance(x, Dual)


def _unary(x, f, df):
    if isinstance(x, Dual):
        return Dual(f(x.val), df(x.val)[..., None] * x.eps)
    return f(np.asarray(x, dtype=float))


def sin(x):
    return _unary(x, np.sin, np.cos)


def cos(x):
    return _unary(x, np.cos, lambda v: -np.sin(v))


def exp(x):
    return _unary(x, np.exp, np.exp)


def log(x):
    return _unary(x, np.log, lambda v: 1.0 / v)


def sqrt(x):
    return _unary(x, np.sqrt, lambda v: 0.5 / np.sqrt(v))


def where(cond, a, b):
    """Elementwise select on a plain boolean mask; derivative follows branch."""
    cond = np.asarray(cond)
    if not (isinstance(a, Dual) or isinstance(b, Dual)):
        return np.where(cond, a, b)
    n = a.ndirs if isinstance(a, Dual) else b.ndirs
    av, ae = (a.val, a.eps) if isinstance(a, Dual) else (np.asarray(a, float), None)
    bv, be = (b.val, b.eps) if isinstance(b, Dual) else (np.asarray(b, float), None)
    val = np.where(cond, av, bv)
    if ae is None:
        ae = np.zeros(np.shape(av) + (n,))
    if be is None:
        be = np.zeros(np.shape(bv) + (n,))
    shape = val.shape + (n,)
    eps = np.where(cond[..., None], np.broadcast_to(ae, shape), np.broadcast_to(be, shape))
    return Dual(val, eps)


def hinge(x):
    """max(0, x), derivative 0 on the inactive side."""
    if isinstance(x, Dual):
        return where(x.val > 0, x, np.zeros_like(x.val))
    return np.maximum(0.0, x)


def concat(parts):
    """Concatenate 1-D duals/arrays into one residual vector."""
    parts = [p for p in parts if p is not None and (np.size(value(p)) > 0)]
    if not any(isinstance(p, Dual) for p in parts):
        return np.concatenate([np.atleast_1d(np.asarray(p, float)) for p in parts])
    n = next(p.ndirs for p in parts if isinstance(p, Dual))
    vals, epss = [], []
    for p in parts:
        if isinstance(p, Dual):
            flat = p.ravel()
            vals.append(np.atleast_1d(flat.val))
            epss.append(flat.eps.reshape(-1, n))
        else:
            arr = np.atleast_1d(np.asarray(p, float)).ravel()
            vals.append(arr)
            epss.append(np.zeros((arr.size, n)))
    return Dual(np.concatenate(vals), np.concatenate(epss, axis=0))


def concat_rows(parts):
    """Concatenate 2-D duals/arrays along axis 0."""
    parts = [p for p in parts if np.size(value(p)) > 0]
    if not any(isinstance(p, Dual) for p in parts):
        return np.concatenate([np.asarray(p, float) for p in parts], axis=0)
    n = next(p.ndirs for p in parts if isinstance(p, Dual))
    duals = [p if isinstance(p, Dual) else Dual.constant(p, n) for p in parts]
    return Dual(np.concatenate([d.val for d in duals], axis=0),
                np.concatenate([d.eps for d in duals], axis=0))


def stack_last(parts):
    """Stack scalars-per-point into the last axis, e.g. (u, v) -> (K, 2)."""
    if not any(isinstance(p, Dual) for p in parts):
        return np.stack(parts, axis=-1)
    n = next(p.ndirs for p in parts if isinstance(p, Dual))
    duals = [p if isinstance(p, Dual) else Dual.constant(p, n) for p in parts]
    val = np.stack([d.val for d in duals], axis=-1)
    eps = np.stack([d.eps for d in duals], axis=-2)
    return Dual(val, eps)


def rotate(R, X):
    """Apply a 3x3 rotation to points of shape (..., 3); either may be Dual."""
    if not isinstance(R, Dual) and not isinstance(X, Dual):
        return np.asarray(X) @ np.asarray(R).T
    cols = []
    for i in range(3):
        acc = None
        for j in range(3):
            term = R[i, j] * X[..., j] if isinstance(R, Dual) else X[..., j] * R[i, j]
            acc = term if acc is None else acc + term
        cols.append(acc)
    return stack_last(cols)


def matmul(A, B):
    """2-D matrix product where either factor may be Dual."""
    if not isinstance(A, Dual) and not isinstance(B, Dual):
        return np.asarray(A) @ np.asarray(B)
    Av, Ae = (A.val, A.eps) if isinstance(A, Dual) else (np.asarray(A, float), None)
    Bv, Be = (B.val, B.eps) if isinstance(B, Dual) else (np.asarray(B, float), None)
    val = Av @ Bv
    n = Ae.shape[-1] if Ae is not None else Be.shape[-1]
    eps = np.zeros(val.shape + (n,))
    if Ae is not None:
        eps += np.einsum("ikn,kj->ijn", Ae, Bv)
    if Be is not None:
        eps += np.einsum("ik,kjn->ijn", Av, Be)
    return Dual(val, eps)


def norm2(x, axis=-1):
    """Squared Euclidean norm along an axis."""
    return (x * x).sum(axis=axis)


def logsumexp(x):
    """Stable log-sum-exp of a 1-D dual/array."""
    if not isinstance(x, Dual):
        m = np.max(x)
        return m + np.log(np.sum(np.exp(x - m)))
    m = float(np.max(x.val))
    e = exp(x - m)
    return log(e.sum()) + m
