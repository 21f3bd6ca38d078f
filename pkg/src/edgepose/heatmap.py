"""Joint heatmaps: peak and covariance extraction, Gaussian rendering, fusion."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from edgepose import kernels
from edgepose.errors import GainDomain

DEFAULT_ALPHA = 0.15
DEFAULT_BETA = 0.75


@dataclass(frozen=True)
class HeatmapConfig:
    width: int = 64
    height: int = 64
    stride: float = 4.0
    # absolute peak value a detection needs to count as valid
    confidence_threshold: float = 0.1
    # cells contribute to the covariance when value >= ratio * peak value
    contribution_ratio: float = 0.1

    @property
    def crop_size(self) -> tuple[float, float]:
        return self.width * self.stride, self.height * self.stride


@dataclass(eq=False)
class Heatmap:
    """J channels of H x W confidences sharing one crop placement.

    ``origin`` is the full-image pixel position of the crop's top-left corner;
    cell (r, k) is centred at origin + stride * (k + 0.5, r + 0.5).
    """

    data: np.ndarray
    origin: np.ndarray
    stride: float

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise ValueError("heatmap data must be (J, H, W)")
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(2)
        if not self.stride > 0:
            raise ValueError("stride must be positive")

    @classmethod
    def zeros(cls, n_joints: int, height: int, width: int, origin=(0.0, 0.0), stride: float = 4.0) -> "Heatmap":
        return cls(np.zeros((n_joints, height, width)), origin, stride)

    @classmethod
    def zeros_like(cls, other: "Heatmap") -> "Heatmap":
        return cls(np.zeros_like(other.data), other.origin.copy(), other.stride)

    @property
    def n_joints(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[1], self.data.shape[2]

    def cell_center(self, row: int, col: int) -> np.ndarray:
        return self.origin + self.stride * np.array([col + 0.5, row + 0.5])

    def congruent(self, other: "Heatmap") -> bool:
        return (
            self.data.shape == other.data.shape
            and np.array_equal(self.origin, other.origin)
            and self.stride == other.stride
        )

    def copy(self) -> "Heatmap":
        return Heatmap(self.data.copy(), self.origin.copy(), self.stride)


@dataclass
class JointDetection2D:
    joint: int
    position: np.ndarray
    confidence: float
    cov: np.ndarray
    valid: bool


def fallback_covariance(stride: float) -> np.ndarray:
    return np.eye(2) * (stride / 2.0) ** 2


def extract_covariance(channel: np.ndarray, peak_cell: tuple[int, int], peak_conf: float, stride: float,
                       contribution_ratio: float = 0.1) -> np.ndarray:
    """Empirical joint covariance (px^2) about the peak cell.

    Every cell whose value is at least ``contribution_ratio * peak_conf``
    contributes its offset from the peak, weighted by its value, and the sums
    are divided by the number of contributing cells. When nothing spreads
    (no contributing cell, or only the peak itself) the one-cell quantisation
    floor is returned instead.
    """
    row, col = peak_cell
    sxx, sxy, syy, K = kernels.peak_covariance(
        np.ascontiguousarray(channel, dtype=np.float64), int(row), int(col), contribution_ratio * peak_conf
    )
    if K == 0 or sxx + syy <= 0.0:
        return fallback_covariance(stride)
    cov = np.array([[sxx, sxy], [sxy, syy]]) * stride**2
    return 0.5 * (cov + cov.T)


def extract_peak(hm: Heatmap, joint: int, confidence_threshold: float = 0.1,
                 contribution_ratio: float = 0.1) -> JointDetection2D:
    channel = hm.data[joint]
    flat = int(np.argmax(channel))
    row, col = divmod(flat, channel.shape[1])
    conf = float(channel[row, col])
    cov = extract_covariance(channel, (row, col), conf, hm.stride, contribution_ratio)
    return JointDetection2D(
        joint=joint,
        position=hm.cell_center(row, col),
        confidence=conf,
        cov=cov,
        valid=conf >= confidence_threshold,
    )


def extract_all(hm: Heatmap, cfg: HeatmapConfig = HeatmapConfig()) -> list[JointDetection2D]:
    return [extract_peak(hm, j, cfg.confidence_threshold, cfg.contribution_ratio) for j in range(hm.n_joints)]


def render_gaussian(hm: Heatmap, joint: int, mean, cov, amplitude: float) -> None:
    """Max-composite ``amplitude * exp(-0.5 d^T cov^-1 d)`` into one channel.

    Cells farther than 3 sigma (Mahalanobis) are left alone. A singular
    covariance gets 1 px^2 added to its diagonal.
    """
    if not 0.0 <= amplitude <= 1.0:
        raise ValueError("amplitude must lie in [0, 1]")
    cov = np.asarray(cov, dtype=np.float64)
    a, b, c = cov[0, 0], 0.5 * (cov[0, 1] + cov[1, 0]), cov[1, 1]
    if a * c - b * b <= 1e-12 * max(a * c, 1.0) or a <= 0 or c <= 0:
        a, c = a + 1.0, c + 1.0
    mean = np.asarray(mean, dtype=np.float64)
    kernels.render_gaussian(hm.data[joint], hm.origin[0], hm.origin[1], hm.stride,
                            mean[0], mean[1], a, b, c, float(amplitude))


def fuse(det: Heatmap, fb: Heatmap, alpha: float = DEFAULT_ALPHA, beta: float = DEFAULT_BETA,
         clamp: bool = True) -> Heatmap:
    """Fuse detection and feedback heatmaps.

    s * ((1-a-b) * det + a * fb + b * fb * det) with s = 1/(1-a-b), clamped to
    [0, 1] unless ``clamp`` is False.
    """
    if alpha < 0 or beta < 0 or alpha + beta >= 1.0:
        raise GainDomain(f"need alpha, beta >= 0 and alpha + beta < 1 (got {alpha}, {beta})")
    if not det.congruent(fb):
        raise ValueError("detection and feedback heatmaps are not congruent")
    out = np.empty_like(det.data)
    kernels.fuse(det.data.reshape(-1), fb.data.reshape(-1), float(alpha), float(beta), out.reshape(-1), clamp)
    return Heatmap(out, det.origin.copy(), det.stride)


def dump_pgm(hm: Heatmap, directory, prefix: str = "heatmap") -> list[Path]:
    """Write each channel as an 8-bit binary PGM plus a JSON sidecar with the crop placement."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    H, W = hm.shape
    paths = []
    for j in range(hm.n_joints):
        img = np.clip(np.rint(hm.data[j] * 255.0), 0, 255).astype(np.uint8)
        path = directory / f"{prefix}_{j:02d}.pgm"
        path.write_bytes(b"P5\n%d %d\n255\n" % (W, H) + img.tobytes(order="C"))
        paths.append(path)
    sidecar = directory / f"{prefix}.json"
    sidecar.write_text(json.dumps({"origin": hm.origin.tolist(), "stride": hm.stride}))
    paths.append(sidecar)
    return paths


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if m is None:
        raise ValueError("not a binary PGM")
    W, H, maxval = (int(g) for g in m.groups())
    data = np.frombuffer(raw[m.end() : m.end() + W * H], dtype=np.uint8).reshape(H, W)
    return data.astype(np.float64) / maxval
