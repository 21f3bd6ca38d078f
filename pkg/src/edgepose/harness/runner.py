"""Deterministic discrete-event simulation of sensors, links and backend.

Simulated time is integer microseconds. Backend processing occupies a fixed
simulated duration so results never depend on the host's speed; the real
wall-clock cost of each frame set is measured separately and kept out of
the metrics.
"""

from __future__ import annotations

import math
import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from edgepose import protocol
from edgepose.association import FrameSynchronizer
from edgepose.backend import Backend, BackendConfig, DelayEstimator, make_feedback, prediction_horizon
from edgepose.errors import ConfigError, EdgePoseError
from edgepose.geometry import CameraRig, load_cameras, project_many
from edgepose.harness import scenes
from edgepose.harness.config import ScenarioConfig
from edgepose.harness.metrics import (
    HEAD_FALLBACK_PX,
    ClassAccumulator,
    LimbAccumulator,
    head_threshold,
    jdr_hits,
    joint_errors,
    limb_correct,
)
from edgepose.heatmap import HeatmapConfig
from edgepose.protocol import LatencyModel
from edgepose.sensor import ObservationModel, Scene, SensorConfig, SensorNode
from edgepose.skeleton import SkeletonTopology

DEFAULT_PROCESSING_MS = 10.0
GT_MATCH_GATE_M = 1.0


@dataclass
class MetricsReport:
    meta: dict = field(default_factory=dict)
    frames: int = 0
    mpjpe_mm: dict = field(default_factory=dict)
    jdr_pct: dict = field(default_factory=dict)
    jdr_occluded_pct: float | None = None
    reproj_px: dict = field(default_factory=dict)
    pcp_pct: dict = field(default_factory=dict)
    messages: dict = field(default_factory=dict)
    sync: dict = field(default_factory=dict)
    backend: dict = field(default_factory=dict)
    feedback: dict = field(default_factory=dict)
    partial: bool = False
    errors: list = field(default_factory=list)
    series: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return _clean(
            {
                "meta": self.meta,
                "frames": self.frames,
                "mpjpe_mm": self.mpjpe_mm,
                "jdr_pct": self.jdr_pct,
                "jdr_occluded_pct": self.jdr_occluded_pct,
                "reproj_px": self.reproj_px,
                "pcp_pct": self.pcp_pct,
                "messages": self.messages,
                "sync": self.sync,
                "backend": self.backend,
                "feedback": self.feedback,
                "partial": self.partial,
                "errors": self.errors,
                "series": self.series,
            }
        )

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(**d)


def _clean(x):
    """JSON-safe copy: NaN/inf become None, numpy scalars become Python numbers."""
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else None
    return x


@dataclass
class RunResult:
    report: MetricsReport
    skeleton_lines: list[bytes]
    timing: dict


# ------------------------------------------------------------ construction


def build_topology(cfg: ScenarioConfig) -> SkeletonTopology:
    if cfg.topology is None:
        return SkeletonTopology.default()
    try:
        return SkeletonTopology.load(cfg.resolve(cfg.topology))
    except (OSError, ValueError, KeyError) as err:
        raise ConfigError(f"bad topology file: {err}") from None


def build_cameras(cfg: ScenarioConfig):
    if isinstance(cfg.cameras, str):
        try:
            return load_cameras(cfg.resolve(cfg.cameras))
        except (OSError, ValueError, KeyError, TypeError) as err:
            raise ConfigError(f"bad cameras file: {err}") from None
    try:
        return scenes.ring_cameras(**cfg.cameras["ring"])
    except TypeError as err:
        raise ConfigError(f"bad ring camera spec: {err}") from None


def build_scene(cfg: ScenarioConfig, topology: SkeletonTopology, n_cams: int) -> Scene:
    if isinstance(cfg.scene, str):
        scene = Scene.load(cfg.resolve(cfg.scene), topology.joint_names)
    else:
        spec = dict(cfg.scene)
        gen = spec.pop("generator")
        try:
            if gen == "walker":
                fps = spec.pop("fps", 30.0)
                duration = spec.pop("duration_s", 10.0)
                scene = Scene(fps, duration, [scenes.circle_walk(topology, fps=fps, duration_s=duration, **spec)])
            elif gen == "occlusion":
                scene = scenes.occlusion_scene(topology, n_cams=n_cams, **spec)
            else:
                scene = scenes.multi_person_scene(topology, **spec)
        except TypeError as err:
            raise ConfigError(f"bad scene generator spec: {err}") from None
    if cfg.duration_s is not None:
        scene.duration_s = min(scene.duration_s, cfg.duration_s)
    return scene


def _camera_value(v, i):
    return v[i] if isinstance(v, (list, tuple)) else v


def build_sensors(cfg: ScenarioConfig, cams, scene: Scene, n_joints: int) -> list[SensorNode]:
    obs = dict(cfg.observation)
    hm = HeatmapConfig(**cfg.heatmap)
    s = cfg.sensor
    try:
        sensor_cfg = SensorConfig(
            heatmap=hm,
            alpha=cfg.fusion.get("alpha", 0.15),
            beta=cfg.fusion.get("beta", 0.75),
            staleness_us=int(round(s.get("staleness_ms", 150.0) * 1000)),
            min_iou=s.get("min_iou", 0.3),
            feedback_amplitude=s.get("feedback_amplitude", SensorConfig.feedback_amplitude),
            feedback_cov_floor=s.get("feedback_cov_floor", SensorConfig.feedback_cov_floor),
            peak_from_unclamped=s.get("peak_from_unclamped", True),
        )
        nodes = []
        for i, cam in enumerate(cams):
            model = ObservationModel(
                blob_sigma=obs.get("blob_sigma", 6.0),
                peak_jitter_sigma=obs.get("peak_jitter_sigma", 0.0),
                confidence_range=tuple(obs.get("confidence_range", (0.85, 1.0))),
                occlusion_events=tuple(scene.occlusions),
                false_negative_rate=obs.get("false_negative_rate", 0.0),
                clock_offset_us=int(_camera_value(obs.get("clock_offset_us", 0), i)),
                clock_drift_ppm=float(_camera_value(obs.get("clock_drift_ppm", 0.0), i)),
            )
            nodes.append(SensorNode(cam, n_joints, model, sensor_cfg, seed=cfg.seed))
    except (TypeError, ValueError, IndexError) as err:
        raise ConfigError(f"bad sensor / observation settings: {err}") from None
    return nodes


# -------------------------------------------------------------------- run


class _Run:
    def __init__(self, cfg: ScenarioConfig, feedback: bool, transport: str):
        self.cfg = cfg
        self.feedback_on = feedback
        self.topology = build_topology(cfg)
        self.cams = build_cameras(cfg)
        self.rig = CameraRig(self.cams)
        self.scene = build_scene(cfg, self.topology, len(self.cams))
        self.sensors = build_sensors(cfg, self.cams, self.scene, self.topology.n_joints)
        try:
            latency = LatencyModel(**cfg.latency)
        except (TypeError, ValueError) as err:
            raise ConfigError(f"bad latency model: {err}") from None
        self.links = [protocol.transport(transport, latency, seed=(cfg.seed << 8) + 2 * i) for i in range(len(self.cams))]
        fps = self.scene.fps
        self.period_us = 1e6 / fps
        window = cfg.sync.get("window_ms", 0.5e3 / fps)
        max_wait = cfg.sync.get("max_wait_ms", 1e3 / fps)
        self.sync = FrameSynchronizer(len(self.cams), int(round(window * 1000)), int(round(max_wait * 1000)))
        b = cfg.backend
        self.backend = Backend(
            self.rig,
            self.topology,
            BackendConfig(
                epipolar_threshold=b.get("epipolar_threshold_px", 25.0),
                track_gate_m=b.get("track_gate_m", 0.5),
                track_expiry=b.get("track_expiry", 15),
            ),
        )
        self.proc_us = int(round(b.get("processing_ms", DEFAULT_PROCESSING_MS) * 1000))
        self.delay = DelayEstimator()
        self.uplink = DelayEstimator()
        m = cfg.metrics
        self.jdr_threshold = m.get("jdr_threshold_px")
        self.head_fallback = m.get("head_fallback_px", HEAD_FALLBACK_PX)

        J = self.topology.n_joints
        self.acc_jdr = ClassAccumulator(J)
        self.acc_occ = ClassAccumulator(J)
        self.acc_mpjpe = ClassAccumulator(J)
        self.acc_reproj = ClassAccumulator(J)
        self.acc_pcp = LimbAccumulator(len(self.topology.bones))
        self.frame_of_stamp: dict[tuple[int, int], int] = {}
        self.series: dict[int, dict] = {}
        self.skeleton_lines: list[bytes] = []
        self.wall_ms: list[float] = []
        self.errors: list[str] = []
        self.failed: set[int] = set()
        self.msg_bytes: list[int] = []
        self.person_msg_bytes: list[float] = []
        self.fb_bytes = 0
        self.fb_msgs = 0
        self.decode_errors = 0
        self.unmatched_outputs = 0

    # -- per-event work

    def _capture(self, k: int, now_us: int) -> None:
        t = self.scene.frame_time(k)
        gt = self.scene.ground_truth(t)
        row = self.series.setdefault(k, {"frame": k, "t_s": t})
        hits_total = [0, 0]
        for i, node in enumerate(self.sensors):
            if i in self.failed:
                continue
            try:
                msg = node.sense_and_publish(gt, t)
                payload = protocol.encode(msg)
                self.links[i].up.send(payload, now_us)
            except Exception as err:  # a failing node is reported, the run goes on
                self.failed.add(i)
                self.errors.append(f"sensor {node.camera.id} failed at frame {k}: {type(err).__name__}: {err}")
                continue
            self.frame_of_stamp[(msg.camera_id, msg.capture_timestamp_us)] = k
            self.msg_bytes.append(len(payload))
            if msg.persons:
                self.person_msg_bytes.append(len(payload) / len(msg.persons))
            self._score_2d(node, msg, gt, t, hits_total)
        row["jdr_pct"] = 100.0 * hits_total[0] / hits_total[1] if hits_total[1] else math.nan

    def _score_2d(self, node: SensorNode, msg, gt, t, hits_total) -> None:
        cam = node.camera
        reported = {p.local_track_id: p for p in msg.persons}
        for pid in sorted(gt):
            gt_uv, w = project_many(cam, gt[pid])
            mask = (w > 0) & cam.in_image(gt_uv)
            if not mask.any():
                continue
            thr = self.jdr_threshold or head_threshold(gt_uv, self.topology, self.head_fallback)
            p = reported.get(pid)
            if p is None:
                hits = np.zeros(len(mask), dtype=bool)
            else:
                hits = jdr_hits(p.uv, p.valid, gt_uv, thr)
            self.acc_jdr.add(hits * 100.0, mask)
            occluded = np.zeros(len(mask), dtype=bool)
            for ev in node.model.occlusion_events:
                if ev.active(pid, t, cam.id):
                    occluded[list(ev.joints)] = True
            self.acc_occ.add(hits * 100.0, mask & occluded)
            hits_total[0] += int(hits[mask].sum())
            hits_total[1] += int(mask.sum())

    def _score_3d(self, fs, skels) -> int:
        anchor = min(fs.entries.values(), key=lambda m: m.capture_timestamp_us)
        k = self.frame_of_stamp.get((anchor.camera_id, anchor.capture_timestamp_us))
        if k is None:
            return -1
        gt = self.scene.ground_truth(self.scene.frame_time(k))
        pairs = []
        for si, s in enumerate(skels):
            for pid, X in gt.items():
                e = joint_errors(s.means, s.valid, X)
                if np.any(~np.isnan(e)):
                    d = float(np.nanmean(e))
                    if d < GT_MATCH_GATE_M:
                        pairs.append((d, si, pid))
        pairs.sort()
        used_s, used_g = set(), set()
        errs = []
        for _, si, pid in pairs:
            if si in used_s or pid in used_g:
                continue
            used_s.add(si)
            used_g.add(pid)
            s, X = skels[si], gt[pid]
            e = joint_errors(s.means, s.valid, X) * 1000.0
            self.acc_mpjpe.add(e)
            errs.append(e[~np.isnan(e)])
            self.acc_pcp.add(limb_correct(s.means, s.valid, X, self.topology))
            for cam in self.cams:
                gt_uv, w = project_many(cam, X)
                est_uv, we = project_many(cam, s.means)
                ok = (w > 0) & cam.in_image(gt_uv) & s.valid & (we > 0)
                self.acc_reproj.add(np.linalg.norm(est_uv - gt_uv, axis=1), ok)
        self.unmatched_outputs += len(skels) - len(used_s)
        row = self.series.setdefault(k, {"frame": k, "t_s": self.scene.frame_time(k)})
        row["persons_out"] = len(skels)
        row["mpjpe_mm"] = float(np.mean(np.concatenate(errs))) if errs and np.concatenate(errs).size else math.nan
        return k

    def _complete(self, fs, skels, done_us: int) -> None:
        k = self._score_3d(fs, skels)
        if k >= 0:
            self.series[k]["emit_us"] = done_us
        for s in skels:
            self.skeleton_lines.append(protocol.encode(s))
        self.delay.add((done_us - fs.timestamp_us) * 1e-6)
        # feedback waits until the pipeline delay is measured and a velocity exists to predict with
        publish = [s for s in skels if s.velocity_valid.any()]
        if not self.feedback_on or not publish or not self.delay.warm:
            return
        dt = prediction_horizon(self.delay.estimate(), self.uplink.estimate() if self.uplink.warm else 0.0,
                                self.period_us * 1e-6)
        for msg in make_feedback(publish, self.rig, dt, fs.timestamp_us, done_us, self.backend.config.process_noise):
            payload = protocol.encode(msg)
            i = self.cams.index(self.rig[msg.camera_id])
            self.links[i].down.send(payload, done_us)
            self.fb_bytes += len(payload)
            self.fb_msgs += 1

    # -- loop

    def run(self) -> RunResult:
        n_frames = self.scene.n_frames
        cap_us = [int(round(k * self.period_us)) for k in range(n_frames)]
        k = 0
        pending = deque()
        in_flight = None
        ups = [ln.up for ln in self.links]
        downs = [ln.down for ln in self.links]
        while True:
            cands = [cap_us[k]] if k < n_frames else []
            cands += [t for t in (ch.next_delivery_us() for ch in ups + downs) if t is not None]
            d = self.sync.next_deadline()
            if d is not None:
                cands.append(d)
            if in_flight is not None:
                cands.append(in_flight[0])
            if not cands:
                break
            now = min(cands)

            for i, ch in enumerate(downs):
                for payload, t in ch.poll(now):
                    try:
                        msg = protocol.decode(payload)
                    except EdgePoseError:
                        self.decode_errors += 1
                        continue
                    node = self.sensors[i]
                    node.receive_feedback(msg, node.local_time_us(t * 1e-6))
            for ch in ups:
                for payload, t in ch.poll(now):
                    try:
                        msg = protocol.decode(payload, self.topology.n_joints)
                    except EdgePoseError:
                        self.decode_errors += 1
                        continue
                    self.uplink.add((t - msg.capture_timestamp_us) * 1e-6)
                    pending.extend(self.sync.push(msg, now))
            pending.extend(self.sync.poll(now))

            if in_flight is not None and in_flight[0] <= now:
                self._complete(in_flight[1], in_flight[2], in_flight[0])
                in_flight = None
            if in_flight is None and pending:
                fs = pending.popleft()
                t0 = time.perf_counter()
                skels = self.backend.process_frameset(fs)
                self.wall_ms.append((time.perf_counter() - t0) * 1e3)
                in_flight = (now + self.proc_us, fs, skels)

            if k < n_frames and cap_us[k] == now:
                self._capture(k, now)
                k += 1
        pending.extend(self.sync.flush())
        for fs in pending:  # only reachable if the loop ended with queued work
            self._complete(fs, self.backend.process_frameset(fs), cap_us[-1] if cap_us else 0)
        for ln in self.links:
            ln.close()
        return RunResult(self._report(n_frames), self.skeleton_lines, self._timing())

    def _report(self, n_frames: int) -> MetricsReport:
        topo = self.topology
        up = [ln.up.stats for ln in self.links]
        down = [ln.down.stats for ln in self.links]
        delivered = sum(s.delivered for s in up)
        fps = self.scene.fps
        per_person = float(np.mean(self.person_msg_bytes)) if self.person_msg_bytes else math.nan
        occ_sum, occ_n = self.acc_occ.total()
        return MetricsReport(
            meta={
                "name": self.cfg.name,
                "seed": self.cfg.seed,
                "feedback": self.feedback_on,
                "transport": self.links[0].up.__class__.__name__,
                "cameras": len(self.cams),
                "persons": len(self.scene.persons),
                "fps": fps,
            },
            frames=n_frames,
            mpjpe_mm=self.acc_mpjpe.by_class(topo),
            jdr_pct=self.acc_jdr.by_class(topo),
            jdr_occluded_pct=occ_sum / occ_n if occ_n else None,
            reproj_px=self.acc_reproj.by_class(topo),
            pcp_pct=self.acc_pcp.report(topo),
            messages={
                "pose_sent": sum(s.sent for s in up),
                "pose_delivered": delivered,
                "pose_lost": sum(s.lost for s in up),
                "pose_bytes_mean": float(np.mean(self.msg_bytes)) if self.msg_bytes else math.nan,
                "pose_bytes_max": max(self.msg_bytes) if self.msg_bytes else 0,
                "bytes_per_person_msg": per_person,
                "kB_per_s_per_person": per_person * fps / 1000.0,
                "uplink_latency_ms_mean": sum(s.latency_us_total for s in up) / delivered / 1000.0 if delivered else math.nan,
                "feedback_sent": self.fb_msgs,
                "feedback_bytes": self.fb_bytes,
                "feedback_lost": sum(s.lost for s in down),
                "decode_errors": self.decode_errors,
            },
            sync=vars(self.sync.stats).copy(),
            backend={
                **vars(self.backend.stats),
                "unmatched_outputs": self.unmatched_outputs,
                "delay_estimate_ms": self.delay.estimate() * 1e3,
            },
            feedback={
                "enabled": self.feedback_on,
                "used": sum(n.feedback_used for n in self.sensors),
                "stale": sum(n.feedback_stale for n in self.sensors),
            },
            partial=bool(self.errors),
            errors=list(self.errors),
            series=[self.series[k] for k in sorted(self.series)],
        )

    def _timing(self) -> dict:
        w = np.array(self.wall_ms) if self.wall_ms else np.zeros(1)
        return {
            "framesets": len(self.wall_ms),
            "wall_ms_mean": float(w.mean()),
            "wall_ms_p95": float(np.percentile(w, 95)),
            "wall_ms_max": float(w.max()),
        }


def run_scenario(cfg: ScenarioConfig, feedback: bool | None = None, transport: str | None = None,
                 seed: int | None = None) -> RunResult:
    """Run one seeded simulation. Arguments override the config's own settings."""
    if seed is not None:
        cfg = cfg.with_overrides(seed=seed)
    run = _Run(cfg, cfg.feedback if feedback is None else feedback, transport or cfg.transport)
    return run.run()


def run_paired(cfg: ScenarioConfig, transport: str | None = None, seed: int | None = None) -> tuple[RunResult, RunResult]:
    """Feedback-on and feedback-off runs from the same seed (same detection noise)."""
    return run_scenario(cfg, True, transport, seed), run_scenario(cfg, False, transport, seed)
