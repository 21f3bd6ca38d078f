"""Fusion backend: association, triangulation, skeleton optimisation and feedback."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from edgepose import skeleton as sk
from edgepose.association import DEFAULT_EPIPOLAR_THRESHOLD, FrameSet, match_across_views
from edgepose.errors import DegenerateProjection, EdgePoseError, GeometryError
from edgepose.geometry import CameraRig, Gaussian2D, UTParams, project_many, triangulate_joint, unscented_transform
from edgepose.protocol import FeedbackMessage, FeedbackPerson, PersonPose
from edgepose.sensor import padded_bbox
from edgepose.skeleton import LMSettings, Skeleton3D, SkeletonTopology

COLD_START_DELAY_S = 0.1
DELAY_MIN_SAMPLES = 10
DELAY_SMOOTHING = 0.1


@dataclass(frozen=True)
class BackendConfig:
    epipolar_threshold: float = DEFAULT_EPIPOLAR_THRESHOLD
    track_gate_m: float = 0.5
    track_expiry: int = 15
    process_noise: float = sk.PROCESS_NOISE
    ut: UTParams = UTParams()
    lm: LMSettings = LMSettings()


@dataclass
class PersonTrack:
    person_id: int
    skeleton: Skeleton3D
    last_update_us: int
    misses: int = 0


@dataclass
class BackendStats:
    framesets: int = 0
    groups: int = 0
    skeletons: int = 0
    person_failures: int = 0
    joint_failures: int = 0
    tracks_created: int = 0
    tracks_expired: int = 0


def _root_position(means: np.ndarray, valid: np.ndarray, root: int) -> np.ndarray | None:
    if valid[root]:
        return means[root]
    if valid.any():
        return means[valid].mean(axis=0)
    return None


class Backend:
    """Owns the person tracks; processes one frame set at a time."""

    def __init__(self, rig: CameraRig, topology: SkeletonTopology, config: BackendConfig = BackendConfig()):
        self.rig = rig
        self.topology = topology
        self.config = config
        self.tracks: dict[int, PersonTrack] = {}
        self._next_id = 0
        self.stats = BackendStats()

    def triangulate_group(self, fs: FrameSet, group) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Per-joint 3D Gaussians for one cross-view group; joints seen in < 2 views are invalid."""
        J = self.topology.n_joints
        means = np.zeros((J, 3))
        covs = np.zeros((J, 3, 3))
        valid = np.zeros(J, dtype=bool)
        people: list[tuple[object, PersonPose]] = [(self.rig[c], fs.entries[c].persons[i]) for c, i in group]
        cov2 = [p.cov_matrices() for _, p in people]
        for j in range(J):
            obs = [
                (cam, Gaussian2D(p.uv[j], cov2[k][j]), float(p.confidence[j]))
                for k, (cam, p) in enumerate(people)
                if p.valid[j]
            ]
            if len(obs) < 2:
                continue
            try:
                g = triangulate_joint(obs, self.config.ut)
            except EdgePoseError:
                self.stats.joint_failures += 1
                continue
            if not (np.all(np.isfinite(g.mean)) and np.all(np.isfinite(g.cov))):
                self.stats.joint_failures += 1
                continue
            means[j], covs[j], valid[j] = g.mean, g.cov, True
        return means, covs, valid

    def _associate(self, candidates: list[tuple[int, np.ndarray]], t_us: int) -> dict[int, int]:
        """Greedy nearest-root matching of candidates (index, root) to tracks within the gate."""
        pairs = []
        root = self.topology.root
        for tid, tr in self.tracks.items():
            pred = sk.predict(tr.skeleton, max(0.0, (t_us - tr.skeleton.timestamp_us) * 1e-6), self.config.process_noise)
            r = _root_position(pred.means, pred.valid, root)
            if r is None:
                continue
            for ci, c_root in candidates:
                d = float(np.linalg.norm(c_root - r))
                if d < self.config.track_gate_m:
                    pairs.append((d, tid, ci))
        pairs.sort()
        used_t, used_c, out = set(), set(), {}
        for _, tid, ci in pairs:
            if tid in used_t or ci in used_c:
                continue
            used_t.add(tid)
            used_c.add(ci)
            out[ci] = tid
        return out

    def process_frameset(self, fs: FrameSet) -> list[Skeleton3D]:
        self.stats.framesets += 1
        t_us = fs.timestamp_us
        match = match_across_views(fs, self.rig, self.config.epipolar_threshold)
        self.stats.groups += len(match.groups)

        tri = []
        for group in match.groups:
            means, covs, valid = self.triangulate_group(fs, group)
            r = _root_position(means, valid, self.topology.root)
            if r is not None:
                tri.append((means, covs, valid, r))
        assoc = self._associate([(i, t[3]) for i, t in enumerate(tri)], t_us)

        out: list[Skeleton3D] = []
        seen: set[int] = set()
        for i, (means, covs, valid, _) in enumerate(tri):
            tid = assoc.get(i)
            prev = self.tracks[tid].skeleton if tid is not None else None
            try:
                skel = self._optimize_person(means, covs, valid, prev, t_us)
            except (EdgePoseError, np.linalg.LinAlgError):
                self.stats.person_failures += 1
                continue
            if tid is None:
                tid = self._next_id
                self._next_id += 1
                self.stats.tracks_created += 1
                self.tracks[tid] = PersonTrack(tid, skel, t_us)
            skel.person_id = tid
            tr = self.tracks[tid]
            if prev is not None:
                try:
                    skel = sk.update_velocity(prev, skel)
                except EdgePoseError:
                    pass
            tr.skeleton, tr.last_update_us, tr.misses = skel, t_us, 0
            seen.add(tid)
            out.append(skel)

        for tid in list(self.tracks):
            if tid in seen:
                continue
            self.tracks[tid].misses += 1
            if self.tracks[tid].misses >= self.config.track_expiry:
                del self.tracks[tid]
                self.stats.tracks_expired += 1
        out.sort(key=lambda s: s.person_id)
        self.stats.skeletons += len(out)
        return out

    def _optimize_person(self, means, covs, valid, prev: Skeleton3D | None, t_us: int) -> Skeleton3D:
        graph = sk.build_graph(means, covs, valid, self.topology)
        init = means.copy()
        if prev is not None and t_us > prev.timestamp_us:
            pred = sk.predict(prev, (t_us - prev.timestamp_us) * 1e-6, self.config.process_noise)
            use = pred.valid & valid
            init[use] = pred.means[use]
        res = sk.optimize(graph, init, self.config.lm)
        J = self.topology.n_joints
        out_means = np.zeros((J, 3))
        out_covs = np.zeros((J, 3, 3))
        out_valid = np.zeros(J, dtype=bool)
        out_means[res.joints] = res.means
        out_covs[res.joints] = res.covs
        out_valid[res.joints] = True
        return Skeleton3D(-1, t_us, out_means, out_covs, out_valid)


# ------------------------------------------------------------------ feedback


def reproject(skel: Skeleton3D, cam, ut: UTParams = UTParams()) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Unscented reprojection of every valid joint into one camera.

    Returns (uv (J, 2), cov (J, 2, 2), visible (J,)); joints behind the
    camera or outside the image are not visible.
    """
    J = skel.n_joints
    uv = np.zeros((J, 2))
    cov = np.zeros((J, 2, 2))
    vis = np.zeros(J, dtype=bool)
    def f(chi):
        Y, w = project_many(cam, chi)
        if np.any(w <= 0):
            raise DegenerateProjection("sigma point behind the camera")
        return Y

    for j in np.flatnonzero(skel.valid):
        try:
            mean, c = unscented_transform(skel.means[j], 0.5 * (skel.covs[j] + skel.covs[j].T), f, ut, vectorized=True)
        except GeometryError:
            continue
        if not cam.in_image(mean):
            continue
        uv[j], cov[j], vis[j] = mean, c, True
    return uv, cov, vis


def make_feedback(skeletons: list[Skeleton3D], rig: CameraRig, dt: float, source_us: int, emit_us: int,
                  process_noise: float = sk.PROCESS_NOISE, ut: UTParams = UTParams()) -> list[FeedbackMessage]:
    """Predict each skeleton ``dt`` ahead and reproject it into every camera.

    One message per camera that sees at least one joint; cameras with no
    visible joint get nothing.
    """
    if isinstance(skeletons, Skeleton3D):
        skeletons = [skeletons]
    predicted = [sk.predict(s, dt, process_noise) for s in skeletons]
    out = []
    for cam in rig:
        persons = []
        for s in predicted:
            uv, cov, vis = reproject(s, cam, ut)
            if not vis.any():
                continue
            persons.append(
                FeedbackPerson(
                    person_id=s.person_id,
                    bbox=padded_bbox(uv[vis]),
                    valid=vis,
                    uv=np.where(vis[:, None], uv, 0.0),
                    cov=np.stack([cov[:, 0, 0], cov[:, 0, 1], cov[:, 1, 1]], axis=1),
                )
            )
        if persons:
            out.append(FeedbackMessage(cam.id, int(source_us), int(max(emit_us, source_us)), persons))
    return out


# --------------------------------------------------------- delay estimate


@dataclass
class DelayEstimator:
    """Exponential moving average of capture-to-feedback delay, in seconds.

    The average is seeded with the first sample. Until ``min_samples`` have
    been seen the cold-start default is reported.
    """

    smoothing: float = DELAY_SMOOTHING
    min_samples: int = DELAY_MIN_SAMPLES
    cold_start_s: float = COLD_START_DELAY_S
    n: int = 0
    ema: float = 0.0

    def add(self, delay_s: float) -> None:
        self.ema = delay_s if self.n == 0 else (1 - self.smoothing) * self.ema + self.smoothing * delay_s
        self.n += 1

    @property
    def warm(self) -> bool:
        return self.n >= self.min_samples

    def estimate(self) -> float:
        return self.ema if self.warm else self.cold_start_s


def estimate_delay(samples, smoothing: float = DELAY_SMOOTHING) -> float:
    """EMA over (emit - capture) delays in seconds; cold-start default under 10 samples."""
    est = DelayEstimator(smoothing)
    for s in samples:
        est.add(float(s))
    return est.estimate()


def prediction_horizon(delay_s: float, uplink_s: float, frame_period_s: float | None) -> float:
    """Time from a frame set's capture to the sensor capture that will use its feedback.

    Feedback reaches the sensors ``delay + downlink`` after capture (the
    downlink is taken equal to the measured uplink) and is consumed at the
    next capture, so the horizon is rounded up to the frame grid.
    """
    arrive = max(0.0, delay_s + uplink_s)
    if not frame_period_s:
        return arrive
    return math.ceil(arrive / frame_period_s - 1e-9) * frame_period_s
