"""Numpy fallback implementations of the hot kernels.

Same signatures as the compiled backend (``rigfit.kernels._core``). The
``*_dual`` variants additionally propagate forward-mode derivative blocks:
``x_eps`` arrays carry one trailing axis with one entry per seed direction.
"""

import numpy as np

BACKEND_NAME = "pure"

# series/closed-form switch for the Rodrigues coefficients, on theta^2
_T2_SMALL = 1e-6


def _rot_coeffs(t2):
    """sin(t)/t and (1-cos(t))/t^2 as smooth functions of t2 = t^2."""
    t2 = np.asarray(t2, dtype=float)
    small = t2 < _T2_SMALL
    t2s = np.where(small, 1.0, t2)  # avoid 0-division in the closed form
    th = np.sqrt(t2s)
    f = np.where(small, 1.0 - t2 / 6.0 + t2 * t2 / 120.0, np.sin(th) / th)
    g = np.where(small, 0.5 - t2 / 24.0 + t2 * t2 / 720.0, (1.0 - np.cos(th)) / t2s)
    return f, g


def _rot_coeff_derivs(t2):
    """d/dt2 of the two Rodrigues coefficients."""
    t2 = np.asarray(t2, dtype=float)
    small = t2 < _T2_SMALL
    t2s = np.where(small, 1.0, t2)
    th = np.sqrt(t2s)
    sin, cos = np.sin(th), np.cos(th)
    df = np.where(small, -1.0 / 6.0 + t2 / 60.0, (th * cos - sin) / (2.0 * t2s * th))
    dg = np.where(small, -1.0 / 24.0 + t2 / 360.0, sin / (2.0 * t2s * th) - (1.0 - cos) / (t2s * t2s))
    return df, dg


def _skew(aa):
    J = aa.shape[0]
    K = np.zeros((J, 3, 3))
    K[:, 0, 1] = -aa[:, 2]
    K[:, 0, 2] = aa[:, 1]
    K[:, 1, 0] = aa[:, 2]
    K[:, 1, 2] = -aa[:, 0]
    K[:, 2, 0] = -aa[:, 1]
    K[:, 2, 1] = aa[:, 0]
    return K


def rodrigues(aa):
    """Axis-angle batch (J,3) to rotation matrices (J,3,3)."""
    aa = np.ascontiguousarray(aa, dtype=float)
    t2 = np.einsum("ji,ji->j", aa, aa)
    f, g = _rot_coeffs(t2)
    K = _skew(aa)
    K2 = np.einsum("jab,jbc->jac", K, K)
    R = np.eye(3)[None] + f[:, None, None] * K + g[:, None, None] * K2
    return R


def rodrigues_dual(aa, aa_eps):
    """Rodrigues with derivative propagation; aa_eps is (J,3,N)."""
    aa = np.ascontiguousarray(aa, dtype=float)
    aa_eps = np.ascontiguousarray(aa_eps, dtype=float)
    t2 = np.einsum("ji,ji->j", aa, aa)
    t2_eps = 2.0 * np.einsum("ji,jin->jn", aa, aa_eps)
    f, g = _rot_coeffs(t2)
    df, dg = _rot_coeff_derivs(t2)
    K = _skew(aa)
    K_eps = np.zeros(aa_eps.shape[:1] + (3, 3) + aa_eps.shape[-1:])
    K_eps[:, 0, 1] = -aa_eps[:, 2]
    K_eps[:, 0, 2] = aa_eps[:, 1]
    K_eps[:, 1, 0] = aa_eps[:, 2]
    K_eps[:, 1, 2] = -aa_eps[:, 0]
    K_eps[:, 2, 0] = -aa_eps[:, 1]
    K_eps[:, 2, 1] = aa_eps[:, 0]
    K2 = np.einsum("jab,jbc->jac", K, K)
    K2_eps = np.einsum("jabn,jbc->jacn", K_eps, K) + np.einsum("jab,jbcn->jacn", K, K_eps)
    R = np.eye(3)[None] + f[:, None, None] * K + g[:, None, None] * K2
    R_eps = (
        (df[:, None] * t2_eps)[:, None, None, :] * K[..., None]
        + f[:, None, None, None] * K_eps
        + (dg[:, None] * t2_eps)[:, None, None, :] * K2[..., None]
        + g[:, None, None, None] * K2_eps
    )
    return R, R_eps


def fk_chain(parents, offsets, R_local, root_t):
    """Compose local transforms down the tree.

    parents[0] must be -1; offsets are the already-scaled parent-frame bone
    vectors. Returns global rotations (J,3,3) and joint positions (J,3).
    """
    J = len(parents)
    Rg = np.empty((J, 3, 3))
    tg = np.empty((J, 3))
    Rg[0] = R_local[0]
    tg[0] = root_t
    for j in range(1, J):
        p = parents[j]
        Rg[j] = Rg[p] @ R_local[j]
        tg[j] = Rg[p] @ offsets[j] + tg[p]
    return Rg, tg


def fk_chain_dual(parents, offsets, off_eps, R_local, Rl_eps, root_t, rt_eps):
    J = len(parents)
    N = off_eps.shape[-1]
    Rg = np.empty((J, 3, 3))
    tg = np.empty((J, 3))
    Rg_eps = np.empty((J, 3, 3, N))
    tg_eps = np.empty((J, 3, N))
    Rg[0] = R_local[0]
    Rg_eps[0] = Rl_eps[0]
    tg[0] = root_t
    tg_eps[0] = rt_eps
    for j in range(1, J):
        p = parents[j]
        Rg[j] = Rg[p] @ R_local[j]
        Rg_eps[j] = np.einsum("abn,bc->acn", Rg_eps[p], R_local[j]) + np.einsum(
            "ab,bcn->acn", Rg[p], Rl_eps[j]
        )
        tg[j] = Rg[p] @ offsets[j] + tg[p]
        tg_eps[j] = (
            np.einsum("abn,b->an", Rg_eps[p], offsets[j])
            + Rg[p] @ off_eps[j]
            + tg_eps[p]
        )
    return Rg, Rg_eps, tg, tg_eps


def lbs(widx, wval, Rg, tg, vloc):
    """Linear blend skinning: v = sum_k w_k (Rg[k] v_loc + tg[k])."""
    out = np.zeros_like(vloc, dtype=float)
    for w in range(widx.shape[1]):
        idx = widx[:, w]
        contrib = np.einsum("vab,vb->va", Rg[idx], vloc) + tg[idx]
        out += wval[:, w, None] * contrib
    return out


def lbs_dual(widx, wval, Rg, Rg_eps, tg, tg_eps, vloc, vloc_eps):
    V = vloc.shape[0]
    N = Rg_eps.shape[-1]
    out = np.zeros((V, 3))
    out_eps = np.zeros((V, 3, N))
    for w in range(widx.shape[1]):
        idx = widx[:, w]
        Rsel = Rg[idx]
        contrib = np.einsum("vab,vb->va", Rsel, vloc) + tg[idx]
        contrib_eps = (
            np.einsum("vabn,vb->van", Rg_eps[idx], vloc)
            + np.einsum("vab,vbn->van", Rsel, vloc_eps)
            + tg_eps[idx]
        )
        out += wval[:, w, None] * contrib
        out_eps += wval[:, w, None, None] * contrib_eps
    return out, out_eps
