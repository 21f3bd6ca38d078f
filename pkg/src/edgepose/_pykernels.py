"""Pure numpy implementations of the hot kernels.

Signatures mirror ``_ckernels.pyx`` exactly; ``edgepose.kernels`` picks one
of the two at import time.
"""

from __future__ import annotations

import numpy as np

MAHALANOBIS_CUTOFF_SQ = 9.0


def weighted_dlt(P, uv, w):
    """Batched confidence-weighted DLT.

    P is (N, 3, 4), uv is (S, N, 2), w is (N,). Returns the right singular
    vector of the smallest singular value for each of the S systems as an
    (S, 4) array, together with all singular values (S, 4), descending.
    """
    P = np.ascontiguousarray(P, dtype=np.float64)
    uv = np.ascontiguousarray(uv, dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    S, N = uv.shape[0], uv.shape[1]
    if N < 2:
        raise ValueError("weighted_dlt needs at least two views")

    A = np.empty((S, 2 * N, 4))
    A[:, 0::2, :] = uv[:, :, 0, None] * P[None, :, 2, :] - P[None, :, 0, :]
    A[:, 1::2, :] = uv[:, :, 1, None] * P[None, :, 2, :] - P[None, :, 1, :]

    norms = np.linalg.norm(A, axis=2)
    scale = np.where(norms > 0.0, np.repeat(w, 2)[None, :] / np.where(norms > 0.0, norms, 1.0), 0.0)
    A *= scale[:, :, None]

    _, s, vh = np.linalg.svd(A, full_matrices=False)
    return np.ascontiguousarray(vh[:, -1, :]), np.ascontiguousarray(s)


def render_gaussian(grid, u0, v0, stride, mu_u, mu_v, a, b, c, amplitude):
    """Max-composite an unnormalised Gaussian blob into ``grid`` in place.

    Covariance is [[a, b], [b, c]] in px^2 and must be positive definite.
    Cell (r, k) has its centre at (u0 + stride*(k+0.5), v0 + stride*(r+0.5)).
    """
    if amplitude <= 0.0:
        return
    H, W = grid.shape
    det = a * c - b * b
    ia, ib, ic = c / det, -b / det, a / det
    hu = 3.0 * np.sqrt(a)
    hv = 3.0 * np.sqrt(c)
    k_lo = max(0, int(np.floor((mu_u - hu - u0) / stride - 0.5)))
    k_hi = min(W - 1, int(np.ceil((mu_u + hu - u0) / stride - 0.5)))
    r_lo = max(0, int(np.floor((mu_v - hv - v0) / stride - 0.5)))
    r_hi = min(H - 1, int(np.ceil((mu_v + hv - v0) / stride - 0.5)))
    if k_lo > k_hi or r_lo > r_hi:
        return

    du = u0 + stride * (np.arange(k_lo, k_hi + 1) + 0.5) - mu_u
    dv = v0 + stride * (np.arange(r_lo, r_hi + 1) + 0.5) - mu_v
    m2 = ia * du[None, :] ** 2 + 2.0 * ib * du[None, :] * dv[:, None] + ic * dv[:, None] ** 2
    val = np.where(m2 <= MAHALANOBIS_CUTOFF_SQ, amplitude * np.exp(-0.5 * m2), 0.0)
    window = grid[r_lo : r_hi + 1, k_lo : k_hi + 1]
    np.maximum(window, val, out=window)


def peak_covariance(grid, row, col, threshold):
    """Confidence-weighted second moments about the peak cell, in cell units.

    Returns (sxx, sxy, syy, K) where K counts cells with value >= threshold.
    """
    rows, cols = np.nonzero(grid >= threshold)
    K = rows.size
    if K == 0:
        return 0.0, 0.0, 0.0, 0
    c = grid[rows, cols]
    dx = cols - col
    dy = rows - row
    sxx = float(np.sum(c * dx * dx)) / K
    sxy = float(np.sum(c * dx * dy)) / K
    syy = float(np.sum(c * dy * dy)) / K
    return sxx, sxy, syy, K


def fuse(det, fb, alpha, beta, out, clamp):
    """Detection/feedback fusion on flat contiguous arrays, written to ``out``.

    Uses det + s*fb*(alpha + beta*det), which equals
    s*((1-alpha-beta)*det + alpha*fb + beta*fb*det) with s = 1/(1-alpha-beta)
    but keeps zero feedback an exact fixed point.
    """
    s = 1.0 / (1.0 - alpha - beta)
    np.multiply(det, beta, out=out)
    out += alpha
    out *= fb
    out *= s
    out += det
    if clamp:
        np.clip(out, 0.0, 1.0, out=out)
    return out
