"""Synthetic rigs and scripted scenes: ring cameras, a walking skeleton, occlusion suites."""

from __future__ import annotations

import numpy as np

from edgepose.geometry import Camera
from edgepose.sensor import OcclusionEvent, PersonScript, Scene
from edgepose.skeleton import SkeletonTopology

UP = np.array([0.0, 0.0, 1.0])
PELVIS_HEIGHT = 0.95


def ring_cameras(n: int = 4, radius: float = 4.24, height: float = 2.5, target=(0.0, 0.0, 1.0),
                 focal: float = 400.0, width: int = 640, height_px: int = 480, phase: float = np.pi / 4) -> list[Camera]:
    """``n`` cameras evenly spaced on a circle, all looking at ``target``."""
    cams = []
    for i in range(n):
        a = phase + 2 * np.pi * i / n
        c = np.array([radius * np.cos(a), radius * np.sin(a), height])
        cams.append(Camera.look_at(i, c, target, focal, width, height_px))
    return cams


def _unit(v):
    return v / np.linalg.norm(v)


def walking_pose(topology: SkeletonTopology, root, heading: float, phase: float, stride_amp: float = 0.35,
                 arm_amp: float = 0.3) -> np.ndarray:
    """Forward kinematics of a walking figure; every bone has exactly its prior length.

    ``phase`` is the gait phase in radians, ``heading`` the walking direction
    about the vertical axis.
    """
    name = {n: i for i, n in enumerate(topology.joint_names)}
    L = {}
    for (p, c), length in zip(topology.bones, topology.bone_lengths):
        L[frozenset((topology.joint_names[p], topology.joint_names[c]))] = float(length)

    def bone(a, b):
        return L[frozenset((a, b))]

    fwd = np.array([np.cos(heading), np.sin(heading), 0.0])
    left = np.cross(UP, fwd)
    X = np.zeros((topology.n_joints, 3))

    def put(j, parent, direction):
        X[name[j]] = X[name[parent]] + bone(parent, j) * _unit(direction)

    X[name["pelvis"]] = root
    put("spine", "pelvis", UP + 0.05 * fwd)
    put("neck", "spine", UP)
    put("nose", "neck", UP + 0.45 * fwd)
    put("head", "nose", UP - 0.3 * fwd)
    for side, sgn in (("l", 1.0), ("r", -1.0)):
        swing = stride_amp * np.sin(phase + (0.0 if side == "l" else np.pi))
        bend = 0.4 * (1 + np.sin(phase + (0.5 * np.pi if side == "l" else 1.5 * np.pi)))
        put(f"{side}_hip", "pelvis", sgn * left)
        put(f"{side}_knee", f"{side}_hip", -np.cos(swing) * UP + np.sin(swing) * fwd)
        put(f"{side}_ankle", f"{side}_knee", -np.cos(swing - bend) * UP + np.sin(swing - bend) * fwd)
        arm = -arm_amp * np.sin(phase + (0.0 if side == "l" else np.pi))
        put(f"{side}_shoulder", "neck", sgn * left - 0.25 * UP)
        put(f"{side}_elbow", f"{side}_shoulder", -np.cos(arm) * UP + np.sin(arm) * fwd + 0.1 * sgn * left)
        put(f"{side}_wrist", f"{side}_elbow", -np.cos(arm + 0.5) * UP + np.sin(arm + 0.5) * fwd + 0.1 * sgn * left)
    return X


def circle_walk(topology: SkeletonTopology, person_id: int = 0, center=(0.0, 0.0), radius: float = 0.6,
                speed: float = 0.5, fps: float = 30.0, duration_s: float = 10.0, phase0: float = 0.0,
                cadence_hz: float = 0.9) -> PersonScript:
    """A person walking on a circle, with one keyframe per frame."""
    n = int(np.floor(duration_s * fps + 1e-9)) + 1
    times = np.arange(n) / fps
    joints = np.empty((n, topology.n_joints, 3))
    for k, t in enumerate(times):
        a = phase0 + speed * t / radius
        root = np.array([center[0] + radius * np.cos(a), center[1] + radius * np.sin(a), PELVIS_HEIGHT])
        joints[k] = walking_pose(topology, root, a + np.pi / 2, 2 * np.pi * cadence_hz * t)
    return PersonScript(person_id, times, joints)


def static_person(topology: SkeletonTopology, person_id: int, position, heading: float, phase: float,
                  fps: float = 30.0, duration_s: float = 1.0) -> PersonScript:
    n = int(np.floor(duration_s * fps + 1e-9)) + 1
    pose = walking_pose(topology, np.array([position[0], position[1], PELVIS_HEIGHT]), heading, phase)
    return PersonScript(person_id, np.arange(n) / fps, np.repeat(pose[None], n, axis=0))


def single_walker(topology: SkeletonTopology, fps: float = 30.0, duration_s: float = 10.0) -> Scene:
    return Scene(fps, duration_s, [circle_walk(topology, fps=fps, duration_s=duration_s)])


def occlusion_scene(topology: SkeletonTopology, seed: int, fps: float = 30.0, duration_s: float = 6.0,
                    n_events: int = 6, n_cams: int = 4, displaced_fraction: float = 0.5,
                    n_views: int | None = None) -> Scene:
    """Walker with wrist/ankle occlusions, each hiding or displacing the joint in ``n_views`` views.

    ``n_views`` defaults to half the cameras; with ``n_events=0`` the scene is
    the clean counterpart of the same seed.
    """
    rng = np.random.default_rng(seed)
    names = ["l_wrist", "r_wrist", "l_ankle", "r_ankle"]
    events = []
    slot = duration_s / max(n_events, 1)
    for e in range(n_events):
        j = topology.index(names[int(rng.integers(len(names)))])
        t0 = e * slot + rng.uniform(0.1, 0.3) * slot
        t1 = t0 + rng.uniform(0.5, 0.7) * slot
        k = n_cams // 2 if n_views is None else n_views
        cams = tuple(sorted(int(c) for c in rng.choice(n_cams, size=k, replace=False)))
        if rng.random() >= displaced_fraction:
            events.append(OcclusionEvent(0, (j,), float(t0), float(t1), "hidden", cameras=cams))
        else:
            ang = rng.uniform(0, 2 * np.pi)
            off = (float(30 * np.cos(ang)), float(30 * np.sin(ang)))
            events.append(OcclusionEvent(0, (j,), float(t0), float(t1), "displaced", off, 0.4, cams))
    walker = circle_walk(topology, fps=fps, duration_s=duration_s, phase0=rng.uniform(0, 2 * np.pi))
    return Scene(fps, duration_s, [walker], events)


def multi_person_positions(rng: np.random.Generator, n: int = 3, half_extent: float = 1.5,
                           min_sep: float = 1.0) -> np.ndarray:
    """Rejection-sample ``n`` ground positions more than ``min_sep`` apart."""
    while True:
        pts = rng.uniform(-half_extent, half_extent, size=(n, 2))
        d = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
        if np.all(d[np.triu_indices(n, 1)] > min_sep):
            return pts


def multi_person_scene(topology: SkeletonTopology, seed: int, n_persons: int = 3, fps: float = 30.0,
                       duration_s: float = 1.0) -> Scene:
    rng = np.random.default_rng(seed)
    pts = multi_person_positions(rng, n_persons)
    persons = [
        static_person(topology, i, pts[i], float(rng.uniform(0, 2 * np.pi)), float(rng.uniform(0, 2 * np.pi)), fps, duration_s)
        for i in range(n_persons)
    ]
    return Scene(fps, duration_s, persons)
