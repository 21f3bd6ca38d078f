"""Slow, obviously-correct reference implementations used as test oracles.

Nothing here imports the kernels under test.
"""

from __future__ import annotations

import itertools

import numpy as np


def brute_covariance(grid, row, col, threshold, stride):
    """Loop-by-loop weighted second moment about (row, col), divided by the contributing-cell count."""
    H, W = len(grid), len(grid[0])
    sxx = sxy = syy = 0.0
    K = 0
    for r in range(H):
        for k in range(W):
            v = grid[r][k]
            if v >= threshold:
                dx, dy = k - col, r - row
                sxx += v * dx * dx
                sxy += v * dx * dy
                syy += v * dy * dy
                K += 1
    if K == 0 or sxx + syy <= 0:
        return np.eye(2) * (stride / 2.0) ** 2, K
    return np.array([[sxx, sxy], [sxy, syy]]) * stride * stride / K, K


def naive_dlt(Ps, uvs, weights):
    """Weighted DLT with an explicit per-row loop and a full SVD."""
    rows = []
    for P, (u, v), c in zip(Ps, uvs, weights):
        for r in (u * P[2] - P[0], v * P[2] - P[1]):
            n = np.sqrt(sum(x * x for x in r))
            rows.append(r * (c / n))
    _, _, vt = np.linalg.svd(np.array(rows))
    X = vt[-1]
    return X[:3] / X[3]


def monte_carlo_triangulation(Ps, means, covs, weights, n, rng):
    """Sample every view's 2D Gaussian, triangulate each draw, return sample mean and covariance."""
    draws = [rng.multivariate_normal(m, c, size=n) for m, c in zip(means, covs)]
    # naive_dlt vectorised over the draws; same algebra
    uv = np.stack(draws, axis=1)  # (n, V, 2)
    P = np.asarray(Ps)
    A = np.empty((n, 2 * len(Ps), 4))
    A[:, 0::2] = uv[:, :, 0, None] * P[None, :, 2] - P[None, :, 0]
    A[:, 1::2] = uv[:, :, 1, None] * P[None, :, 2] - P[None, :, 1]
    A *= (np.repeat(weights, 2)[None, :] / np.linalg.norm(A, axis=2))[:, :, None]
    _, _, vt = np.linalg.svd(A)
    X = vt[:, -1]
    pts = X[:, :3] / X[:, 3:]
    return pts.mean(axis=0), np.cov(pts.T)


def exhaustive_grouping(costs_by_view):
    """Best joint assignment of persons across views by exhaustive search.

    ``costs_by_view[v]`` is an (n, n) matrix of costs between the persons of
    view 0 and view v (v >= 1). Returns, for every view v >= 1, the
    permutation p with person i of view 0 matched to p[i] of view v that
    minimises the summed cost.
    """
    out = []
    for C in costs_by_view:
        n = C.shape[0]
        best = min(itertools.permutations(range(n)), key=lambda p: sum(C[i, p[i]] for i in range(n)))
        out.append(best)
    return out


def point_line_distance(x, line):
    return abs(line[0] * x[0] + line[1] * x[1] + line[2]) / np.hypot(line[0], line[1])
