"""Pose metrics (MPJPE, JDR, PCP, reprojection error) and their per-class accumulation."""

from __future__ import annotations

import math

import numpy as np

from edgepose.errors import NoValidJoints
from edgepose.skeleton import JOINT_CLASSES, SkeletonTopology

CLASS_COLUMNS = JOINT_CLASSES + ("avg",)
HEAD_FALLBACK_PX = 10.0


def joint_errors(est: np.ndarray, est_valid: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Euclidean error per joint, NaN where the estimate is invalid."""
    err = np.linalg.norm(np.asarray(est) - np.asarray(gt), axis=-1)
    return np.where(est_valid, err, np.nan)


def _by_class(values: np.ndarray, topology: SkeletonTopology) -> dict[str, float]:
    out = {}
    for cls in JOINT_CLASSES:
        idx = [j for j in range(topology.n_joints) if topology.class_of(j) == cls]
        v = values[idx]
        v = v[~np.isnan(v)]
        out[cls] = float(v.mean()) if v.size else math.nan
    v = values[~np.isnan(values)]
    out["avg"] = float(v.mean()) if v.size else math.nan
    return out


def mpjpe(est: np.ndarray, est_valid: np.ndarray, gt: np.ndarray, topology: SkeletonTopology) -> dict[str, float]:
    """Mean per-joint position error in millimetres, per joint class and averaged over all valid joints."""
    err = joint_errors(est, est_valid, gt) * 1000.0
    if np.all(np.isnan(err)):
        raise NoValidJoints("no valid joint to compare")
    return _by_class(err, topology)


def head_threshold(gt_uv: np.ndarray, topology: SkeletonTopology, fallback_px: float = HEAD_FALLBACK_PX) -> float:
    """Half the projected head-to-nose segment, or the fixed fallback for headless topologies."""
    names = topology.joint_names
    if "head" in names and "nose" in names:
        d = float(np.linalg.norm(gt_uv[names.index("head")] - gt_uv[names.index("nose")]))
        if np.isfinite(d) and d > 0:
            return 0.5 * d
    return fallback_px


def jdr_hits(est_uv: np.ndarray, est_valid: np.ndarray, gt_uv: np.ndarray, threshold: float) -> np.ndarray:
    """Per-joint detection hit (strictly closer than ``threshold``); invalid detections miss."""
    d = np.linalg.norm(np.asarray(est_uv) - np.asarray(gt_uv), axis=-1)
    return np.asarray(est_valid, bool) & (d < threshold)


def jdr(est_uv, est_valid, gt_uv, threshold: float, topology: SkeletonTopology, gt_mask=None) -> dict[str, float]:
    """Joint detection rate (%) per joint class; ``gt_mask`` limits which joints are scored."""
    hits = jdr_hits(est_uv, est_valid, gt_uv, threshold).astype(float) * 100.0
    if gt_mask is not None:
        hits = np.where(gt_mask, hits, np.nan)
    return _by_class(hits, topology)


def limb_correct(est: np.ndarray, est_valid: np.ndarray, gt: np.ndarray, topology: SkeletonTopology) -> np.ndarray:
    """Per bone: mean endpoint error strictly below half the true limb length. Missing endpoints are wrong."""
    out = np.zeros(len(topology.bones), dtype=bool)
    for b, (p, c) in enumerate(topology.bones):
        if not (est_valid[p] and est_valid[c]):
            continue
        e = 0.5 * (np.linalg.norm(est[p] - gt[p]) + np.linalg.norm(est[c] - gt[c]))
        out[b] = e < 0.5 * np.linalg.norm(gt[p] - gt[c])
    return out


def pcp(est, est_valid, gt, topology: SkeletonTopology) -> dict[str, float]:
    """Percentage of correct parts per limb plus the average over limbs."""
    ok = limb_correct(np.asarray(est), np.asarray(est_valid, bool), np.asarray(gt), topology)
    out = {topology.bone_name(b): 100.0 * float(ok[b]) for b in range(len(ok))}
    out["avg"] = 100.0 * float(ok.mean()) if len(ok) else math.nan
    return out


class ClassAccumulator:
    """Pooled per-joint sums that reduce to per-class means."""

    def __init__(self, n: int):
        self.sum = np.zeros(n)
        self.count = np.zeros(n, dtype=np.int64)

    def add(self, values: np.ndarray, mask: np.ndarray | None = None) -> None:
        values = np.asarray(values, dtype=np.float64)
        m = ~np.isnan(values)
        if mask is not None:
            m &= np.asarray(mask, bool)
        self.sum[m] += values[m]
        self.count[m] += 1

    def by_class(self, topology: SkeletonTopology) -> dict[str, float]:
        out = {}
        groups = {cls: [j for j in range(topology.n_joints) if topology.class_of(j) == cls] for cls in JOINT_CLASSES}
        groups["avg"] = list(range(topology.n_joints))
        for cls, idx in groups.items():
            n = int(self.count[idx].sum())
            out[cls] = float(self.sum[idx].sum() / n) if n else math.nan
        return out

    def total(self) -> tuple[float, int]:
        return float(self.sum.sum()), int(self.count.sum())


class LimbAccumulator:
    def __init__(self, n_bones: int):
        self.correct = np.zeros(n_bones, dtype=np.int64)
        self.total = np.zeros(n_bones, dtype=np.int64)

    def add(self, ok: np.ndarray) -> None:
        self.correct += ok.astype(np.int64)
        self.total += 1

    def report(self, topology: SkeletonTopology) -> dict[str, float]:
        out = {}
        for b in range(len(self.total)):
            out[topology.bone_name(b)] = 100.0 * self.correct[b] / self.total[b] if self.total[b] else math.nan
        n = int(self.total.sum())
        out["avg"] = 100.0 * float(self.correct.sum()) / n if n else math.nan
        return out
