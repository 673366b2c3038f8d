# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: Rodrigues, FK tree composition, and skinning,
each with a forward-mode derivative variant. Mirrors kernels._pure."""

import numpy as np

cimport numpy as cnp
from libc.math cimport cos, sin, sqrt

cnp.import_array()

BACKEND_NAME = "cython"

cdef double T2_SMALL = 1e-6


cdef inline void _coeffs(double t2, double* f, double* g) noexcept nogil:
    cdef double th
    if t2 < T2_SMALL:
        f[0] = 1.0 - t2 / 6.0 + t2 * t2 / 120.0
        g[0] = 0.5 - t2 / 24.0 + t2 * t2 / 720.0
    else:
        th = sqrt(t2)
        f[0] = sin(th) / th
        g[0] = (1.0 - cos(th)) / t2


cdef inline void _coeff_derivs(double t2, double* df, double* dg) noexcept nogil:
    cdef double th, s, c
    if t2 < T2_SMALL:
        df[0] = -1.0 / 6.0 + t2 / 60.0
        dg[0] = -1.0 / 24.0 + t2 / 360.0
    else:
        th = sqrt(t2)
        s = sin(th)
        c = cos(th)
        df[0] = (th * c - s) / (2.0 * t2 * th)
        dg[0] = s / (2.0 * t2 * th) - (1.0 - c) / (t2 * t2)


cdef inline void _fill_R(double x, double y, double z, double f, double g,
                         double* R) noexcept nogil:
    # R = I + f*K + g*K^2 for K = skew([x, y, z])
    R[0] = 1.0 + g * (-z * z - y * y)
    R[1] = -f * z + g * (x * y)
    R[2] = f * y + g * (x * z)
    R[3] = f * z + g * (x * y)
    R[4] = 1.0 + g * (-z * z - x * x)
    R[5] = -f * x + g * (y * z)
    R[6] = -f * y + g * (x * z)
    R[7] = f * x + g * (y * z)
    R[8] = 1.0 + g * (-y * y - x * x)


def rodrigues(aa):
    aa = np.ascontiguousarray(aa, dtype=np.float64)
    cdef const double[:, ::1] a = aa
    cdef Py_ssize_t J = a.shape[0], j
    out = np.empty((J, 3, 3))
    cdef double[:, :, ::1] R = out
    cdef double t2, f, g
    for j in range(J):
        t2 = a[j, 0] * a[j, 0] + a[j, 1] * a[j, 1] + a[j, 2] * a[j, 2]
        _coeffs(t2, &f, &g)
        _fill_R(a[j, 0], a[j, 1], a[j, 2], f, g, &R[j, 0, 0])
    return out


def rodrigues_dual(aa, aa_eps):
    aa = np.ascontiguousarray(aa, dtype=np.float64)
    aa_eps = np.ascontiguousarray(aa_eps, dtype=np.float64)
    cdef const double[:, ::1] a = aa
    cdef const double[:, :, ::1] ae = aa_eps
    cdef Py_ssize_t J = a.shape[0], N = ae.shape[2], j, n
    val = np.empty((J, 3, 3))
    eps = np.empty((J, 3, 3, N))
    cdef double[:, :, ::1] R = val
    cdef double[:, :, :, ::1] Re = eps
    cdef double t2, f, g, df, dg, x, y, z, dx, dy, dz, dt2, fd, gd
    for j in range(J):
        x = a[j, 0]; y = a[j, 1]; z = a[j, 2]
        t2 = x * x + y * y + z * z
        _coeffs(t2, &f, &g)
        _coeff_derivs(t2, &df, &dg)
        _fill_R(x, y, z, f, g, &R[j, 0, 0])
        for n in range(N):
            dx = ae[j, 0, n]; dy = ae[j, 1, n]; dz = ae[j, 2, n]
            dt2 = 2.0 * (x * dx + y * dy + z * dz)
            fd = df * dt2
            gd = dg * dt2
            # d(I + f*K + g*K^2) with dK from (dx, dy, dz)
            Re[j, 0, 0, n] = gd * (-z * z - y * y) + g * (-2.0 * z * dz - 2.0 * y * dy)
            Re[j, 0, 1, n] = -fd * z - f * dz + gd * (x * y) + g * (dx * y + x * dy)
            Re[j, 0, 2, n] = fd * y + f * dy + gd * (x * z) + g * (dx * z + x * dz)
            Re[j, 1, 0, n] = fd * z + f * dz + gd * (x * y) + g * (dx * y + x * dy)
            Re[j, 1, 1, n] = gd * (-z * z - x * x) + g * (-2.0 * z * dz - 2.0 * x * dx)
            Re[j, 1, 2, n] = -fd * x - f * dx + gd * (y * z) + g * (dy * z + y * dz)
            Re[j, 2, 0, n] = -fd * y - f * dy + gd * (x * z) + g * (dx * z + x * dz)
            Re[j, 2, 1, n] = fd * x + f * dx + gd * (y * z) + g * (dy * z + y * dz)
            Re[j, 2, 2, n] = gd * (-y * y - x * x) + g * (-2.0 * y * dy - 2.0 * x * dx)
    return val, eps


def fk_chain(parents, offsets, R_local, root_t):
    parents = np.ascontiguousarray(parents, dtype=np.int64)
    offsets = np.ascontiguousarray(offsets, dtype=np.float64)
    R_local = np.ascontiguousarray(R_local, dtype=np.float64)
    root_t = np.ascontiguousarray(root_t, dtype=np.float64)
    cdef const long long[::1] par = parents
    cdef const double[:, ::1] off = offsets
    cdef const double[:, :, ::1] Rl = R_local
    cdef const double[::1] rt = root_t
    cdef Py_ssize_t J = par.shape[0], j, p, a, b, c
    Rg_arr = np.empty((J, 3, 3))
    tg_arr = np.empty((J, 3))
    cdef double[:, :, ::1] Rg = Rg_arr
    cdef double[:, ::1] tg = tg_arr
    cdef double acc
    for a in range(3):
        tg[0, a] = rt[a]
        for b in range(3):
            Rg[0, a, b] = Rl[0, a, b]
    for j in range(1, J):
        p = par[j]
        for a in range(3):
            for b in range(3):
                acc = 0.0
                for c in range(3):
                    acc += Rg[p, a, c] * Rl[j, c, b]
                Rg[j, a, b] = acc
            acc = 0.0
            for c in range(3):
                acc += Rg[p, a, c] * off[j, c]
            tg[j, a] = acc + tg[p, a]
    return Rg_arr, tg_arr


def fk_chain_dual(parents, offsets, off_eps, R_local, Rl_eps, root_t, rt_eps):
    parents = np.ascontiguousarray(parents, dtype=np.int64)
    offsets = np.ascontiguousarray(offsets, dtype=np.float64)
    off_eps = np.ascontiguousarray(off_eps, dtype=np.float64)
    R_local = np.ascontiguousarray(R_local, dtype=np.float64)
    Rl_eps = np.ascontiguousarray(Rl_eps, dtype=np.float64)
    root_t = np.ascontiguousarray(root_t, dtype=np.float64)
    rt_eps = np.ascontiguousarray(rt_eps, dtype=np.float64)
    cdef const long long[::1] par = parents
    cdef const double[:, ::1] off = offsets
    cdef const double[:, :, ::1] offe = off_eps
    cdef const double[:, :, ::1] Rl = R_local
    cdef const double[:, :, :, ::1] Rle = Rl_eps
    cdef const double[::1] rt = root_t
    cdef const double[:, ::1] rte = rt_eps
    cdef Py_ssize_t J = par.shape[0], N = offe.shape[2], j, p, a, b, c, n
    Rg_arr = np.empty((J, 3, 3))
    tg_arr = np.empty((J, 3))
    Rge_arr = np.empty((J, 3, 3, N))
    tge_arr = np.empty((J, 3, N))
    cdef double[:, :, ::1] Rg = Rg_arr
    cdef double[:, ::1] tg = tg_arr
    cdef double[:, :, :, ::1] Rge = Rge_arr
    cdef double[:, :, ::1] tge = tge_arr
    cdef double acc
    for a in range(3):
        tg[0, a] = rt[a]
        for n in range(N):
            tge[0, a, n] = rte[a, n]
        for b in range(3):
            Rg[0, a, b] = Rl[0, a, b]
            for n in range(N):
                Rge[0, a, b, n] = Rle[0, a, b, n]
    for j in range(1, J):
        p = par[j]
        for a in range(3):
            for b in range(3):
                acc = 0.0
                for c in range(3):
                    acc += Rg[p, a, c] * Rl[j, c, b]
                Rg[j, a, b] = acc
                for n in range(N):
                    acc = 0.0
                    for c in range(3):
                        acc += Rge[p, a, c, n] * Rl[j, c, b] + Rg[p, a, c] * Rle[j, c, b, n]
                    Rge[j, a, b, n] = acc
            acc = 0.0
            for c in range(3):
                acc += Rg[p, a, c] * off[j, c]
            tg[j, a] = acc + tg[p, a]
            for n in range(N):
                acc = 0.0
                for c in range(3):
                    acc += Rge[p, a, c, n] * off[j, c] + Rg[p, a, c] * offe[j, c, n]
                tge[j, a, n] = acc + tge[p, a, n]
    return Rg_arr, Rge_arr, tg_arr, tge_arr


def lbs(widx, wval, Rg, tg, vloc):
    widx = np.ascontiguousarray(widx, dtype=np.int64)
    wval = np.ascontiguousarray(wval, dtype=np.float64)
    Rg = np.ascontiguousarray(Rg, dtype=np.float64)
    tg = np.ascontiguousarray(tg, dtype=np.float64)
    vloc = np.ascontiguousarray(vloc, dtype=np.float64)
    cdef const long long[:, ::1] wi = widx
    cdef const double[:, ::1] wv = wval
    cdef const double[:, :, ::1] R = Rg
    cdef const double[:, ::1] t = tg
    cdef const double[:, ::1] vl = vloc
    cdef Py_ssize_t V = wi.shape[0], W = wi.shape[1], v, w, a, c
    cdef long long k
    out_arr = np.zeros((V, 3))
    cdef double[:, ::1] out = out_arr
    cdef double acc, weight
    for v in range(V):
        for w in range(W):
            weight = wv[v, w]
            if weight == 0.0:
                continue
            k = wi[v, w]
            for a in range(3):
                acc = t[k, a]
                for c in range(3):
                    acc += R[k, a, c] * vl[v, c]
                out[v, a] += weight * acc
    return out_arr


def lbs_dual(widx, wval, Rg, Rg_eps, tg, tg_eps, vloc, vloc_eps):
    widx = np.ascontiguousarray(widx, dtype=np.int64)
    wval = np.ascontiguousarray(wval, dtype=np.float64)
    Rg = np.ascontiguousarray(Rg, dtype=np.float64)
    Rg_eps = np.ascontiguousarray(Rg_eps, dtype=np.float64)
    tg = np.ascontiguousarray(tg, dtype=np.float64)
    tg_eps = np.ascontiguousarray(tg_eps, dtype=np.float64)
    vloc = np.ascontiguousarray(vloc, dtype=np.float64)
    vloc_eps = np.ascontiguousarray(vloc_eps, dtype=np.float64)
    cdef const long long[:, ::1] wi = widx
    cdef const double[:, ::1] wv = wval
    cdef const double[:, :, ::1] R = Rg
    cdef const double[:, :, :, ::1] Re = Rg_eps
    cdef const double[:, ::1] t = tg
    cdef const double[:, :, ::1] te = tg_eps
    cdef const double[:, ::1] vl = vloc
    cdef const double[:, :, ::1] vle = vloc_eps
    cdef Py_ssize_t V = wi.shape[0], W = wi.shape[1], N = Re.shape[3]
    cdef Py_ssize_t v, w, a, c, n
    cdef long long k
    out_arr = np.zeros((V, 3))
    oute_arr = np.zeros((V, 3, N))
    cdef double[:, ::1] out = out_arr
    cdef double[:, :, ::1] oute = oute_arr
    cdef double acc, weight
    for v in range(V):
        for w in range(W):
            weight = wv[v, w]
            if weight == 0.0:
                continue
            k = wi[v, w]
            for a in range(3):
                acc = t[k, a]
                for c in range(3):
                    acc += R[k, a, c] * vl[v, c]
                out[v, a] += weight * acc
                for n in range(N):
                    acc = te[k, a, n]
                    for c in range(3):
                        acc += Re[k, a, c, n] * vl[v, c] + R[k, a, c] * vle[v, c, n]
                    oute[v, a, n] += weight * acc
    return out_arr, oute_arr
