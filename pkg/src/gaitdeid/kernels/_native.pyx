# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the kernels in ``_fallback``; same signatures."""
import numpy as np
cimport numpy as cnp

cdef double MASS_GUARD = 1e-6


def frame_moments(x):
    cdef const double[:, :, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t L = xv.shape[0], H = xv.shape[1], W = xv.shape[2]
    out = np.empty((L, 6), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef Py_ssize_t l, i, j
    cdef double v, m, sr, sc, D, rb, cb, rr, cc, vr, vc, cv, dr, dc
    for l in range(L):
        m = 0.0
        sr = 0.0
        sc = 0.0
        for i in range(H):
            rr = (i + 0.5) / H
            for j in range(W):
                v = xv[l, i, j]
                m += v
                sr += v * rr
                sc += v * ((j + 0.5) / W)
        D = m + MASS_GUARD
        rb = sr / D
        cb = sc / D
        vr = 0.0
        vc = 0.0
        cv = 0.0
        for i in range(H):
            dr = (i + 0.5) / H - rb
            for j in range(W):
                v = xv[l, i, j]
                dc = (j + 0.5) / W - cb
                vr += v * dr * dr
                vc += v * dc * dc
                cv += v * dr * dc
        o[l, 0] = m / (H * W)
        o[l, 1] = rb
        o[l, 2] = cb
        o[l, 3] = vr / D
        o[l, 4] = vc / D
        o[l, 5] = cv / D
    return out


def frame_moments_grad(x, g):
    cdef const double[:, :, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef const double[:, ::1] gv = np.ascontiguousarray(g, dtype=np.float64)
    cdef const double[:, ::1] f = frame_moments(np.asarray(xv))
    cdef Py_ssize_t L = xv.shape[0], H = xv.shape[1], W = xv.shape[2]
    out = np.empty((L, H, W), dtype=np.float64)
    cdef double[:, :, ::1] o = out
    cdef Py_ssize_t l, i, j
    cdef double m, D, rb, cb, vr, vc, cv, dr, dc, d = MASS_GUARD, HW = H * W
    cdef double g0, g1, g2, g3, g4, g5
    for l in range(L):
        m = 0.0
        for i in range(H):
            for j in range(W):
                m += xv[l, i, j]
        D = m + d
        rb = f[l, 1]
        cb = f[l, 2]
        vr = f[l, 3]
        vc = f[l, 4]
        cv = f[l, 5]
        g0 = gv[l, 0]
        g1 = gv[l, 1]
        g2 = gv[l, 2]
        g3 = gv[l, 3]
        g4 = gv[l, 4]
        g5 = gv[l, 5]
        for i in range(H):
            dr = (i + 0.5) / H - rb
            for j in range(W):
                dc = (j + 0.5) / W - cb
                o[l, i, j] = (
                    g0 / HW
                    + g1 * dr / D
                    + g2 * dc / D
                    + g3 * (dr * dr - 2.0 * rb * d * dr / D - vr) / D
                    + g4 * (dc * dc - 2.0 * cb * d * dc / D - vc) / D
                    + g5 * (dr * dc - dr * cb * d / D - dc * rb * d / D - cv) / D
                )
    return out


def contour_mask(x):
    arr = np.asarray(x)
    cdef const cnp.uint8_t[:, :, ::1] b = np.ascontiguousarray(arr >= 0.5, dtype=np.uint8)
    cdef Py_ssize_t L = b.shape[0], H = b.shape[1], W = b.shape[2]
    out = np.zeros((L, H, W), dtype=np.uint8)
    cdef cnp.uint8_t[:, :, ::1] o = out
    cdef Py_ssize_t l, i, j
    cdef int c, u, dn, lf, rt, dil, ero
    for l in range(L):
        for i in range(H):
            for j in range(W):
                c = b[l, i, j]
                u = b[l, i - 1, j] if i > 0 else 0
                dn = b[l, i + 1, j] if i < H - 1 else 0
                lf = b[l, i, j - 1] if j > 0 else 0
                rt = b[l, i, j + 1] if j < W - 1 else 0
                dil = c | u | dn | lf | rt
                ero = c & u & dn & lf & rt
                o[l, i, j] = dil ^ ero
    return out
