# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels. Same signatures as ``_pykernels``."""

import numpy as np

from libc.math cimport ceil, exp, floor, sqrt
from scipy.linalg.cython_lapack cimport dgesvd

cdef double MAHALANOBIS_CUTOFF_SQ = 9.0


def weighted_dlt(P, uv, w):
    cdef const double[:, :, ::1] Pv = np.ascontiguousarray(P, dtype=np.float64)
    cdef const double[:, :, ::1] uvv = np.ascontiguousarray(uv, dtype=np.float64)
    cdef const double[::1] wv = np.ascontiguousarray(w, dtype=np.float64)
    cdef Py_ssize_t S = uvv.shape[0], N = uvv.shape[1]
    if N < 2:
        raise ValueError("weighted_dlt needs at least two views")
    if Pv.shape[0] != N or wv.shape[0] != N:
        raise ValueError("P, uv and w disagree on the number of views")

    X = np.empty((S, 4), dtype=np.float64)
    sv = np.empty((S, 4), dtype=np.float64)
    cdef double[:, ::1] Xv = X
    cdef double[:, ::1] svv = sv

    cdef int m = <int>(2 * N), n = 4, lda = m, ldu = 1, ldvt = 4, info = 0, lwork = -1
    # column-major A: element (row, col) at a[row + col*m]
    cdef double[::1] a = np.empty(4 * m, dtype=np.float64)
    cdef double[::1] s = np.empty(4, dtype=np.float64)
    cdef double[::1] vt = np.empty(16, dtype=np.float64)
    cdef double udummy = 0.0
    cdef double wquery = 0.0
    cdef char jobu = b'N'
    cdef char jobvt = b'A'

    dgesvd(&jobu, &jobvt, &m, &n, &a[0], &lda, &s[0], &udummy, &ldu, &vt[0], &ldvt,
           &wquery, &lwork, &info)
    lwork = <int>wquery + 1
    cdef double[::1] work = np.empty(lwork, dtype=np.float64)

    cdef Py_ssize_t t, i, col, r0, r1
    cdef double u, v, norm0, norm1, scale0, scale1, x
    with nogil:
        for t in range(S):
            for i in range(N):
                u = uvv[t, i, 0]
                v = uvv[t, i, 1]
                r0 = 2 * i
                r1 = 2 * i + 1
                norm0 = 0.0
                norm1 = 0.0
                for col in range(4):
                    x = u * Pv[i, 2, col] - Pv[i, 0, col]
                    a[r0 + col * m] = x
                    norm0 += x * x
                    x = v * Pv[i, 2, col] - Pv[i, 1, col]
                    a[r1 + col * m] = x
                    norm1 += x * x
                norm0 = sqrt(norm0)
                norm1 = sqrt(norm1)
                scale0 = wv[i] / norm0 if norm0 > 0.0 else 0.0
                scale1 = wv[i] / norm1 if norm1 > 0.0 else 0.0
                for col in range(4):
                    a[r0 + col * m] *= scale0
                    a[r1 + col * m] *= scale1

            dgesvd(&jobu, &jobvt, &m, &n, &a[0], &lda, &s[0], &udummy, &ldu, &vt[0], &ldvt,
                   &work[0], &lwork, &info)
            if info != 0:
                break
            for col in range(4):
                Xv[t, col] = vt[3 + col * 4]
                svv[t, col] = s[col]
    if info != 0:
        raise np.linalg.LinAlgError("dgesvd did not converge (info=%d)" % info)
    return X, sv


def render_gaussian(double[:, ::1] grid, double u0, double v0, double stride,
                    double mu_u, double mu_v, double a, double b, double c,
                    double amplitude):
    if amplitude <= 0.0:
        return
    cdef Py_ssize_t H = grid.shape[0], W = grid.shape[1]
    cdef double det = a * c - b * b
    cdef double ia = c / det, ib = -b / det, ic = a / det
    cdef double hu = 3.0 * sqrt(a), hv = 3.0 * sqrt(c)
    cdef double fk_lo = floor((mu_u - hu - u0) / stride - 0.5)
    cdef double fk_hi = ceil((mu_u + hu - u0) / stride - 0.5)
    cdef double fr_lo = floor((mu_v - hv - v0) / stride - 0.5)
    cdef double fr_hi = ceil((mu_v + hv - v0) / stride - 0.5)
    if fk_hi < 0 or fr_hi < 0 or fk_lo > W - 1 or fr_lo > H - 1:
        return
    cdef Py_ssize_t k_lo = <Py_ssize_t>fk_lo if fk_lo > 0 else 0
    cdef Py_ssize_t k_hi = <Py_ssize_t>fk_hi if fk_hi < W - 1 else W - 1
    cdef Py_ssize_t r_lo = <Py_ssize_t>fr_lo if fr_lo > 0 else 0
    cdef Py_ssize_t r_hi = <Py_ssize_t>fr_hi if fr_hi < H - 1 else H - 1

    cdef Py_ssize_t r, k
    cdef double du, dv, m2, val
    with nogil:
        for r in range(r_lo, r_hi + 1):
            dv = v0 + stride * (r + 0.5) - mu_v
            for k in range(k_lo, k_hi + 1):
                du = u0 + stride * (k + 0.5) - mu_u
                m2 = ia * du * du + 2.0 * ib * du * dv + ic * dv * dv
                if m2 <= MAHALANOBIS_CUTOFF_SQ:
                    val = amplitude * exp(-0.5 * m2)
                    if val > grid[r, k]:
                        grid[r, k] = val


def peak_covariance(const double[:, ::1] grid, Py_ssize_t row, Py_ssize_t col, double threshold):
    cdef Py_ssize_t H = grid.shape[0], W = grid.shape[1]
    cdef Py_ssize_t r, k, K = 0
    cdef double sxx = 0.0, sxy = 0.0, syy = 0.0, c, dx, dy
    with nogil:
        for r in range(H):
            dy = <double>(r - row)
            for k in range(W):
                c = grid[r, k]
                if c >= threshold:
                    dx = <double>(k - col)
                    sxx += c * dx * dx
                    sxy += c * dx * dy
                    syy += c * dy * dy
                    K += 1
    if K == 0:
        return 0.0, 0.0, 0.0, 0
    return sxx / K, sxy / K, syy / K, K


def fuse(const double[::1] det, const double[::1] fb, double alpha, double beta,
         double[::1] out, bint clamp):
    cdef Py_ssize_t n = det.shape[0], i
    cdef double s = 1.0 / (1.0 - alpha - beta), v
    if fb.shape[0] != n or out.shape[0] != n:
        raise ValueError("fuse: array sizes differ")
    with nogil:
        for i in range(n):
            v = det[i] + s * fb[i] * (alpha + beta * det[i])
            if clamp:
                if v > 1.0:
                    v = 1.0
                elif v < 0.0:
                    v = 0.0
            out[i] = v
    return np.asarray(out)
