"""Simulated smart edge sensor: synthetic detection heatmaps, feedback fusion, 2D pose messages."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from edgepose import heatmap as hmap
from edgepose.association import match_feedback_to_detection
from edgepose.errors import ConfigError
from edgepose.geometry import Camera, project_many
from edgepose.heatmap import Heatmap, HeatmapConfig
from edgepose.protocol import FeedbackMessage, FeedbackPerson, PersonPose, PoseMessage

DEFAULT_STALENESS_US = 150_000
BBOX_PAD = 0.1


# ------------------------------------------------------------------ scene


@dataclass(frozen=True)
class OcclusionEvent:
    person: int
    joints: tuple[int, ...]
    t0: float
    t1: float
    mode: str = "hidden"  # or "displaced"
    offset: tuple[float, float] = (0.0, 0.0)
    amplitude: float = 0.4
    cameras: tuple[int, ...] | None = None  # None: every camera

    def __post_init__(self):
        if self.mode not in ("hidden", "displaced"):
            raise ConfigError(f"unknown occlusion mode {self.mode!r}")
        if not 0.0 <= self.amplitude <= 1.0 or self.t1 < self.t0:
            raise ConfigError("occlusion needs t0 <= t1 and amplitude in [0, 1]")

    def active(self, person: int, t: float, cam_id: int) -> bool:
        return (
            person == self.person
            and self.t0 <= t <= self.t1
            and (self.cameras is None or cam_id in self.cameras)
        )

    def to_dict(self) -> dict:
        d = {"person": self.person, "joints": list(self.joints), "t0": self.t0, "t1": self.t1, "mode": self.mode}
        if self.mode == "displaced":
            d["offset"] = list(self.offset)
            d["amplitude"] = self.amplitude
        if self.cameras is not None:
            d["cameras"] = list(self.cameras)
        return d

    @classmethod
    def from_dict(cls, d: dict, joint_names: Sequence[str] | None = None) -> "OcclusionEvent":
        allowed = {"person", "joints", "t0", "t1", "mode", "offset", "amplitude", "cameras"}
        if not isinstance(d, dict) or set(d) - allowed or not {"person", "joints", "t0", "t1"} <= set(d):
            raise ConfigError(f"bad occlusion record {d!r}")
        joints = []
        for j in d["joints"]:
            if isinstance(j, str):
                if joint_names is None or j not in joint_names:
                    raise ConfigError(f"unknown joint {j!r} in occlusion")
                j = list(joint_names).index(j)
            joints.append(int(j))
        cams = d.get("cameras")
        return cls(
            person=int(d["person"]),
            joints=tuple(joints),
            t0=float(d["t0"]),
            t1=float(d["t1"]),
            mode=d.get("mode", "hidden"),
            offset=tuple(float(o) for o in d.get("offset", (0.0, 0.0))),
            amplitude=float(d.get("amplitude", 0.4)),
            cameras=None if cams is None else tuple(int(c) for c in cams),
        )


@dataclass
class PersonScript:
    id: int
    times: np.ndarray  # (K,) seconds, increasing
    joints: np.ndarray  # (K, J, 3) meters

    def at(self, t: float) -> np.ndarray | None:
        """Linearly interpolated joints, or None outside the scripted interval."""
        ts = self.times
        if t < ts[0] - 1e-9 or t > ts[-1] + 1e-9:
            return None
        k = int(np.searchsorted(ts, t))
        if k < len(ts) and abs(ts[k] - t) <= 1e-9:
            return self.joints[k].copy()
        if k > 0 and abs(ts[k - 1] - t) <= 1e-9:
            return self.joints[k - 1].copy()
        k = min(max(k, 1), len(ts) - 1)
        a = (t - ts[k - 1]) / (ts[k] - ts[k - 1])
        return (1 - a) * self.joints[k - 1] + a * self.joints[k]


@dataclass
class Scene:
    fps: float
    duration_s: float
    persons: list[PersonScript]
    occlusions: list[OcclusionEvent] = field(default_factory=list)

    @property
    def n_frames(self) -> int:
        return int(np.floor(self.duration_s * self.fps + 1e-9))

    def frame_time(self, k: int) -> float:
        return k / self.fps

    def ground_truth(self, t: float) -> dict[int, np.ndarray]:
        out = {}
        for p in self.persons:
            x = p.at(t)
            if x is not None:
                out[p.id] = x
        return out

    def to_dict(self) -> dict:
        return {
            "fps": self.fps,
            "duration_s": self.duration_s,
            "persons": [
                {"id": p.id, "keyframes": [{"t": float(t), "joints": x.tolist()} for t, x in zip(p.times, p.joints)]}
                for p in self.persons
            ],
            "occlusions": [o.to_dict() for o in self.occlusions],
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")

    @classmethod
    def from_dict(cls, doc: dict, joint_names: Sequence[str] | None = None) -> "Scene":
        if not isinstance(doc, dict) or set(doc) - {"fps", "duration_s", "persons", "occlusions"}:
            raise ConfigError("scene script has unknown fields")
        try:
            persons = []
            for p in doc["persons"]:
                if set(p) != {"id", "keyframes"}:
                    raise ConfigError("person record needs exactly id and keyframes")
                kfs = sorted(p["keyframes"], key=lambda k: k["t"])
                times = np.array([float(k["t"]) for k in kfs])
                joints = np.array([k["joints"] for k in kfs], dtype=np.float64)
                if joints.ndim != 3 or joints.shape[2] != 3 or np.any(np.diff(times) <= 0):
                    raise ConfigError(f"person {p['id']}: keyframes need increasing t and (J, 3) joints")
                persons.append(PersonScript(int(p["id"]), times, joints))
            occ = [OcclusionEvent.from_dict(o, joint_names) for o in doc.get("occlusions", [])]
            scene = cls(float(doc["fps"]), float(doc["duration_s"]), persons, occ)
        except (KeyError, TypeError, ValueError) as err:
            raise ConfigError(f"malformed scene script: {err}") from None
        if scene.fps <= 0 or scene.duration_s <= 0 or not persons:
            raise ConfigError("scene needs fps > 0, duration > 0 and at least one person")
        return scene

    @classmethod
    def load(cls, path, joint_names: Sequence[str] | None = None) -> "Scene":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as err:
            raise ConfigError(f"cannot read scene {path}: {err}") from None
        return cls.from_dict(doc, joint_names)


# ----------------------------------------------------------------- sensor


@dataclass(frozen=True)
class ObservationModel:
    blob_sigma: float = 6.0  # px
    peak_jitter_sigma: float = 0.0  # px, truncated at 3 sigma radius
    confidence_range: tuple[float, float] = (0.85, 1.0)
    occlusion_events: tuple[OcclusionEvent, ...] = ()
    false_negative_rate: float = 0.0
    clock_offset_us: int = 0
    clock_drift_ppm: float = 0.0

    def __post_init__(self):
        lo, hi = self.confidence_range
        if not self.blob_sigma > 0 or self.peak_jitter_sigma < 0:
            raise ConfigError("blob_sigma must be positive and jitter non-negative")
        if not 0.0 <= lo <= hi <= 1.0 or not 0.0 <= self.false_negative_rate <= 1.0:
            raise ConfigError("confidence range and false-negative rate must lie in [0, 1]")


@dataclass(frozen=True)
class SensorConfig:
    heatmap: HeatmapConfig = HeatmapConfig()
    alpha: float = hmap.DEFAULT_ALPHA
    beta: float = hmap.DEFAULT_BETA
    staleness_us: int = DEFAULT_STALENESS_US
    min_iou: float = 0.3
    # below real detections so a rendered prior never outranks a fresh peak
    feedback_amplitude: float = 0.5
    # px^2 added isotropically to every reprojected covariance before rendering;
    # None falls back to (stride/2)^2
    feedback_cov_floor: float | None = 144.0
    # locate peaks on the unclamped fused map, rescaled so its peak equals the clamped confidence
    peak_from_unclamped: bool = True

    def cov_floor(self) -> float:
        if self.feedback_cov_floor is not None:
            return self.feedback_cov_floor
        return (self.heatmap.stride / 2.0) ** 2


@dataclass
class Observation:
    person_id: int
    heatmap: Heatmap
    bbox: np.ndarray  # x, y, w, h


@dataclass
class _StoredFeedback:
    person: FeedbackPerson
    source_us: int
    receipt_us: int


def padded_bbox(uv: np.ndarray, pad: float = BBOX_PAD) -> np.ndarray:
    """[x, y, w, h] of the points' extent, grown by ``pad`` of the extent on each side."""
    lo = uv.min(axis=0)
    hi = uv.max(axis=0)
    ext = np.maximum(hi - lo, 1.0)
    lo = lo - pad * ext
    return np.array([lo[0], lo[1], ext[0] * (1 + 2 * pad), ext[1] * (1 + 2 * pad)])


def _quantize(x, decimals: int):
    # decimal rounding gives the shortest float repr, which keeps messages small
    return np.round(np.asarray(x, dtype=np.float64), decimals) + 0.0


def _quantize_cov(cov: np.ndarray) -> np.ndarray:
    """Round (J, 3) covariance triples to 0.01 px^2, keeping each one PSD."""
    q = np.round(cov, 2)
    q[:, 0] = np.maximum(q[:, 0], 0.0)
    q[:, 2] = np.maximum(q[:, 2], 0.0)
    lim = np.round(np.floor(np.sqrt(q[:, 0] * q[:, 2]) * 100.0) / 100.0, 2)
    q[:, 1] = np.clip(q[:, 1], -lim, lim)
    return q + 0.0  # no negative zeros on the wire


class SensorNode:
    """One camera's edge node. Sequential, deterministic given its seed."""

    def __init__(self, camera: Camera, n_joints: int, model: ObservationModel = ObservationModel(),
                 config: SensorConfig = SensorConfig(), seed: int = 0):
        self.camera = camera
        self.n_joints = n_joints
        self.model = model
        self.config = config
        self.seed = seed
        self._rng = np.random.default_rng([seed, camera.id])
        self._feedback: dict[int, _StoredFeedback] = {}
        self._last_bbox: dict[int, np.ndarray] = {}
        self.feedback_used = 0
        self.feedback_stale = 0

    # -- clock

    def local_time_us(self, t: float) -> int:
        true_us = t * 1e6
        return int(round(true_us + self.model.clock_offset_us + self.model.clock_drift_ppm * 1e-6 * true_us))

    # -- detection

    def observe(self, gt: dict[int, np.ndarray], t: float) -> list[Observation]:
        """Render detection heatmaps for each person visible in this camera."""
        cfg = self.config.heatmap
        m = self.model
        J = self.n_joints
        out = []
        for pid in sorted(gt):
            # draws happen for every person so noise realisations never depend on visibility
            missed = self._rng.random() < m.false_negative_rate
            jitter = self._rng.normal(0.0, 1.0, size=(J, 2)) * m.peak_jitter_sigma
            amps = self._rng.uniform(m.confidence_range[0], m.confidence_range[1], size=J)
            if m.peak_jitter_sigma > 0:
                r = np.linalg.norm(jitter, axis=1, keepdims=True)
                jitter *= np.minimum(1.0, 3.0 * m.peak_jitter_sigma / np.maximum(r, 1e-300))

            uv, w = project_many(self.camera, gt[pid])
            inside = (w > 0) & self.camera.in_image(uv)
            if missed or not inside.any():
                continue
            bbox = padded_bbox(uv[inside])
            centre = self._last_bbox.get(pid, bbox)
            centre = centre[:2] + 0.5 * centre[2:]
            crop_w, crop_h = cfg.crop_size
            origin = np.round(centre - 0.5 * np.array([crop_w, crop_h]))
            hm = Heatmap.zeros(J, cfg.height, cfg.width, origin, cfg.stride)
            blob = np.eye(2) * m.blob_sigma**2
            for j in range(J):
                if not inside[j]:
                    continue
                pos, amp = uv[j] + jitter[j], amps[j]
                for ev in m.occlusion_events:
                    if j in ev.joints and ev.active(pid, t, self.camera.id):
                        if ev.mode == "hidden":
                            amp = 0.0
                        else:
                            pos = pos + np.asarray(ev.offset)
                            amp = min(amp, ev.amplitude)
                if amp > 0:
                    hmap.render_gaussian(hm, j, pos, blob, float(amp))
            out.append(Observation(pid, hm, bbox))
        return out

    # -- feedback

    def receive_feedback(self, msg: FeedbackMessage, now_us: int) -> None:
        """Buffer feedback latest-wins per person."""
        if msg.camera_id != self.camera.id:
            return
        for p in msg.persons:
            prev = self._feedback.get(p.person_id)
            if prev is None or msg.source_timestamp_us >= prev.source_us:
                self._feedback[p.person_id] = _StoredFeedback(p, msg.source_timestamp_us, now_us)

    def _fresh_feedback(self, now_us: int) -> list[_StoredFeedback]:
        fresh = []
        for pid in sorted(self._feedback):
            fb = self._feedback[pid]
            if now_us - fb.source_us <= self.config.staleness_us:
                fresh.append(fb)
            else:
                self.feedback_stale += 1
                del self._feedback[pid]
        return fresh

    def render_feedback(self, fb: FeedbackPerson, like: Heatmap) -> Heatmap:
        H = Heatmap.zeros_like(like)
        floor = np.eye(2) * self.config.cov_floor()
        covs = fb.cov_matrices()
        for j in np.flatnonzero(fb.valid):
            if j < H.n_joints:
                hmap.render_gaussian(H, int(j), fb.uv[j], covs[j] + floor, self.config.feedback_amplitude)
        return H

    # -- extraction

    def _extract(self, hm: Heatmap) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        cfg = self.config.heatmap
        J = hm.n_joints
        uv = np.zeros((J, 2))
        conf = np.zeros(J)
        cov = np.zeros((J, 3))
        valid = np.zeros(J, dtype=bool)
        for det in hmap.extract_all(hm, cfg):
            j = det.joint
            uv[j] = det.position
            conf[j] = det.confidence
            cov[j] = det.cov[0, 0], det.cov[0, 1], det.cov[1, 1]
            valid[j] = det.valid
        return uv, conf, cov, valid

    def _fused(self, det: Heatmap, fb: Heatmap) -> Heatmap:
        c = self.config
        if not c.peak_from_unclamped:
            return hmap.fuse(det, fb, c.alpha, c.beta)
        raw = hmap.fuse(det, fb, c.alpha, c.beta, clamp=False)
        peak = raw.data.max(axis=(1, 2), keepdims=True)
        scale = np.where(peak > 1.0, 1.0 / np.where(peak > 0, peak, 1.0), 1.0)
        raw.data *= scale
        np.clip(raw.data, 0.0, 1.0, out=raw.data)
        return raw

    def sense_and_publish(self, gt: dict[int, np.ndarray], t: float) -> PoseMessage:
        now_us = self.local_time_us(t)
        observations = self.observe(gt, t)
        fresh = self._fresh_feedback(now_us) if self._feedback else []
        fb_for = {}
        if fresh and observations:
            pairs = match_feedback_to_detection(
                [f.person.bbox for f in fresh], [o.bbox for o in observations], self.config.min_iou
            )
            fb_for = {k: fresh[i].person for i, k in pairs}

        persons = []
        for k, obs in enumerate(observations):
            hm = obs.heatmap
            if k in fb_for:
                hm = self._fused(hm, self.render_feedback(fb_for[k], hm))
                self.feedback_used += 1
            uv, conf, cov, valid = self._extract(hm)
            bbox = padded_bbox(uv[valid]) if valid.any() else obs.bbox
            self._last_bbox[obs.person_id] = bbox
            persons.append(
                PersonPose(
                    local_track_id=obs.person_id,
                    bbox=_quantize(bbox, 1),
                    valid=valid,
                    uv=_quantize(uv, 1),  # 0.1 px, well under detection noise
                    confidence=np.clip(_quantize(conf, 3), 0.0, 1.0),
                    cov=_quantize_cov(cov),
                )
            )
        return PoseMessage(self.camera.id, now_us, persons)

