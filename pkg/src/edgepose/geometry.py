"""Pinhole cameras, (weighted) DLT triangulation and unscented propagation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from edgepose import kernels
from edgepose.errors import (
    CholeskyFailure,
    DegenerateGeometry,
    DegenerateProjection,
    HomogeneousDivide,
    InsufficientViews,
    MapFailure,
)

W_EPS = 1e-12
SV_TIE_RTOL = 1e-9
COV_JITTER = 1e-9

_CAMERA_FIELDS = {"id", "P", "width", "height"}


@dataclass(frozen=True, eq=False)
class Camera:
    id: int
    P: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        P = np.array(self.P, dtype=np.float64)
        if P.shape != (3, 4) or not np.all(np.isfinite(P)):
            raise ValueError(f"camera {self.id}: P must be a finite 3x4 matrix")
        if np.linalg.matrix_rank(P[:, :3]) != 3:
            raise ValueError(f"camera {self.id}: left 3x3 block of P is singular")
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"camera {self.id}: image size must be positive")
        P.setflags(write=False)
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "id", int(self.id))
        c = -np.linalg.solve(P[:, :3], P[:, 3])
        c.setflags(write=False)
        object.__setattr__(self, "_center", c)

    @classmethod
    def from_krt(cls, id: int, K, R, t, width: int, height: int) -> "Camera":
        K, R = np.asarray(K, float), np.asarray(R, float)
        t = np.asarray(t, float).reshape(3, 1)
        return cls(id, K @ np.hstack([R, t]), width, height)

    @classmethod
    def look_at(cls, id: int, center, target, focal: float, width: int, height: int, up=(0.0, 0.0, 1.0)) -> "Camera":
        """Camera at ``center`` whose optical axis points at ``target``; image y points down."""
        center = np.asarray(center, float)
        z = np.asarray(target, float) - center
        z /= np.linalg.norm(z)
        x = np.cross(z, np.asarray(up, float))
        if np.linalg.norm(x) < 1e-9:
            x = np.cross(z, [1.0, 0.0, 0.0])
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        R = np.stack([x, y, z])
        K = np.array([[focal, 0.0, width / 2.0], [0.0, focal, height / 2.0], [0.0, 0.0, 1.0]])
        return cls.from_krt(id, K, R, -R @ center, width, height)

    @property
    def center(self) -> np.ndarray:
        """Camera centre in world coordinates (null space of P)."""
        return self._center

    def in_image(self, uv) -> np.ndarray:
        uv = np.asarray(uv, float)
        return (uv[..., 0] >= 0) & (uv[..., 0] < self.width) & (uv[..., 1] >= 0) & (uv[..., 1] < self.height)

    def to_dict(self) -> dict:
        return {"id": self.id, "P": self.P.tolist(), "width": self.width, "height": self.height}

    def __eq__(self, other):
        if not isinstance(other, Camera):
            return NotImplemented
        return (self.id, self.width, self.height) == (other.id, other.width, other.height) and np.array_equal(
            self.P, other.P
        )

    def __hash__(self):
        return hash((self.id, self.width, self.height))


@dataclass
class Gaussian2D:
    mean: np.ndarray
    cov: np.ndarray


@dataclass
class Gaussian3D:
    mean: np.ndarray
    cov: np.ndarray


@dataclass(frozen=True)
class UTParams:
    """Scaled unscented transform parameters (spread, prior-knowledge, tertiary)."""

    alpha: float = 1e-3
    beta: float = 2.0
    kappa: float = 0.0


def load_cameras(path) -> list[Camera]:
    with open(path) as fh:
        records = json.load(fh)
    return cameras_from_records(records)


def cameras_from_records(records) -> list[Camera]:
    if not isinstance(records, list):
        raise ValueError("camera file must hold a JSON array of camera records")
    cams = []
    for rec in records:
        if not isinstance(rec, dict):
            raise ValueError("camera record must be an object")
        keys = set(rec)
        if keys != _CAMERA_FIELDS:
            extra, missing = sorted(keys - _CAMERA_FIELDS), sorted(_CAMERA_FIELDS - keys)
            raise ValueError(f"camera record fields wrong (unknown={extra}, missing={missing})")
        if not all(isinstance(rec[k], int) and not isinstance(rec[k], bool) for k in ("id", "width", "height")):
            raise ValueError("camera id, width and height must be integers")
        cams.append(Camera(rec["id"], rec["P"], rec["width"], rec["height"]))
    ids = [c.id for c in cams]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate camera ids")
    return cams


def save_cameras(cameras: Sequence[Camera], path) -> None:
    Path(path).write_text(json.dumps([c.to_dict() for c in cameras], indent=1) + "\n")


def project(cam: Camera, x) -> np.ndarray:
    """Dehomogenised pixel coordinates of a world point."""
    h = cam.P @ np.append(np.asarray(x, dtype=np.float64), 1.0)
    if abs(h[2]) <= W_EPS:
        raise DegenerateProjection(f"point {x} is on the principal plane of camera {cam.id}")
    return h[:2] / h[2]


def project_many(cam: Camera, X) -> tuple[np.ndarray, np.ndarray]:
    """Project (n, 3) points. Returns (uv, w); uv is NaN where |w| <= 1e-12."""
    X = np.asarray(X, dtype=np.float64)
    h = X @ cam.P[:, :3].T + cam.P[:, 3]
    w = h[..., 2]
    ok = np.abs(w) > W_EPS
    uv = np.full(X.shape[:-1] + (2,), np.nan)
    uv[ok] = h[ok, :2] / w[ok, None]
    return uv, w


def _dehomogenize(X: np.ndarray, sv: np.ndarray) -> np.ndarray:
    ties = (sv[:, 2] - sv[:, 3]) <= SV_TIE_RTOL * sv[:, 0]
    if np.any(ties):
        raise DegenerateGeometry("smallest two singular values coincide (parallel or identical rays)")
    w = X[:, 3]
    if np.any(np.abs(w) <= W_EPS):
        raise HomogeneousDivide("triangulated point is at infinity")
    return X[:, :3] / w[:, None]


def _usable_views(cams: Sequence[Camera], weights) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0):
        raise ValueError("DLT weights must be non-negative")
    keep = np.flatnonzero(w > 0)
    if keep.size < 2:
        raise InsufficientViews(f"{keep.size} usable views, need 2")
    centers = np.stack([cams[i].center for i in keep])
    if np.max(np.abs(centers - centers[0])) < 1e-12:
        raise DegenerateGeometry("all usable views share one camera centre")
    return keep, np.stack([cams[i].P for i in keep]), w[keep]


def triangulate_dlt(observations: Sequence[tuple[Camera, np.ndarray]], weights=None) -> np.ndarray:
    """Triangulate one point from (camera, pixel) pairs.

    Row pairs of the DLT system are scaled by ``c_i / ||a_row||``; with all
    weights equal this is the plain normalised DLT. Views with zero weight are
    dropped before the system is built.
    """
    cams = [cam for cam, _ in observations]
    if weights is None:
        weights = np.ones(len(cams))
    if len(weights) != len(cams):
        raise ValueError("one weight per observation required")
    if len(cams) < 2:
        raise InsufficientViews(f"{len(cams)} observations, need 2")
    keep, P, w = _usable_views(cams, weights)
    uv = np.stack([np.asarray(observations[i][1], dtype=np.float64) for i in keep])
    X, sv = kernels.weighted_dlt(P, uv[None], w)
    return _dehomogenize(X, sv)[0]


def _sqrt_cov(cov: np.ndarray) -> np.ndarray:
    if not cov.any():
        return np.zeros_like(cov)  # a point mass: every sigma point sits on the mean
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        pass
    try:
        return np.linalg.cholesky(cov + COV_JITTER * np.eye(cov.shape[0]))
    except np.linalg.LinAlgError:
        raise CholeskyFailure("covariance is not positive semi-definite") from None


def sigma_points(mean, cov, params: UTParams = UTParams()):
    """Scaled sigma points (2n+1, n) and the mean/covariance weights."""
    mean = np.asarray(mean, dtype=np.float64)
    cov = np.asarray(cov, dtype=np.float64)
    n = mean.shape[0]
    if cov.shape != (n, n):
        raise ValueError("covariance shape does not match mean")
    asym = np.abs(cov - cov.T)
    if np.any(asym > 1e-12 + 1e-9 * np.abs(cov.T)):
        raise CholeskyFailure("covariance is not symmetric")
    lam = params.alpha**2 * (n + params.kappa) - n
    L = _sqrt_cov(cov) * np.sqrt(n + lam)
    chi = np.empty((2 * n + 1, n))
    chi[0] = mean
    chi[1 : n + 1] = mean + L.T
    chi[n + 1 :] = mean - L.T
    wm = np.full(2 * n + 1, 0.5 / (n + lam))
    wc = wm.copy()
    wm[0] = lam / (n + lam)
    wc[0] = wm[0] + 1.0 - params.alpha**2 + params.beta
    return chi, wm, wc


def unscented_transform(
    mean,
    cov,
    f: Callable[[np.ndarray], np.ndarray],
    params: UTParams = UTParams(),
    vectorized: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Propagate N(mean, cov) through ``f`` with the scaled unscented transform.

    With ``vectorized=True``, ``f`` maps a (2n+1, n) stack of sigma points to
    (2n+1, m) in one call. Exceptions raised by ``f`` are re-raised as
    MapFailure.

    Moments are accumulated as deviations from the central sample. This is
    algebraically the textbook weighted sum but avoids cancelling the
    O(1/alpha^2) central weights against each other.
    """
    chi, wm, wc = sigma_points(mean, cov, params)
    try:
        Y = np.asarray(f(chi) if vectorized else [np.atleast_1d(f(x)) for x in chi], dtype=np.float64)
    except Exception as err:
        raise MapFailure(f"mapping failed on a sigma point: {err}") from err
    dev = Y[1:] - Y[0]
    shift = wm[1:] @ dev
    y_mean = Y[0] + shift
    y_cov = (dev.T * wm[1:]) @ dev + (params.beta - params.alpha**2) * np.outer(shift, shift)
    return y_mean, 0.5 * (y_cov + y_cov.T)


def triangulate_joint(observations: Sequence[tuple[Camera, Gaussian2D, float]], params: UTParams = UTParams()) -> Gaussian3D:
    """3D Gaussian of one joint from per-view 2D Gaussians and confidences.

    Stacks the 2D means, puts the 2D covariances on a block diagonal and pushes
    the sigma points through the weighted DLT. Confidences are held fixed.
    """
    cams = [o[0] for o in observations]
    conf = np.array([o[2] for o in observations], dtype=np.float64)
    if len(cams) < 2:
        raise InsufficientViews(f"{len(cams)} observations, need 2")
    keep, P, w = _usable_views(cams, conf)
    n_views = keep.size
    mu = np.concatenate([np.asarray(observations[i][1].mean, dtype=np.float64) for i in keep])
    cov = np.zeros((2 * n_views, 2 * n_views))
    for k, i in enumerate(keep):
        cov[2 * k : 2 * k + 2, 2 * k : 2 * k + 2] = observations[i][1].cov

    # surface DLT failures at the mean with their own error types
    X0, sv0 = kernels.weighted_dlt(P, mu.reshape(1, n_views, 2), w)
    _dehomogenize(X0, sv0)

    def tri(stack):
        X, sv = kernels.weighted_dlt(P, stack.reshape(-1, n_views, 2), w)
        return _dehomogenize(X, sv)

    mean, cov3 = unscented_transform(mu, 0.5 * (cov + cov.T), tri, params, vectorized=True)
    return Gaussian3D(mean, cov3)


def fundamental_matrix(cam_a: Camera, cam_b: Camera) -> np.ndarray:
    """F with x_b^T F x_a = 0 for corresponding pixels."""
    C = np.append(cam_a.center, 1.0)
    e_b = cam_b.P @ C
    ex = np.array([[0.0, -e_b[2], e_b[1]], [e_b[2], 0.0, -e_b[0]], [-e_b[1], e_b[0], 0.0]])
    return ex @ cam_b.P @ np.linalg.pinv(cam_a.P)


@dataclass
class CameraRig:
    """Cameras indexed by id, with cached pairwise fundamental matrices."""

    cameras: list[Camera]
    _F: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.by_id = {c.id: c for c in self.cameras}

    def __getitem__(self, cam_id: int) -> Camera:
        return self.by_id[cam_id]

    def __iter__(self):
        return iter(self.cameras)

    def __len__(self):
        return len(self.cameras)

    def F(self, a: int, b: int) -> np.ndarray:
        key = (a, b)
        if key not in self._F:
            self._F[key] = fundamental_matrix(self.by_id[a], self.by_id[b])
        return self._F[key]
