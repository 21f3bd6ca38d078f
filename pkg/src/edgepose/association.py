"""Frame-set synchronization and person association across views and over feedback."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from edgepose.errors import InvariantViolation
from edgepose.geometry import CameraRig
from edgepose.protocol import PersonPose, PoseMessage

Pose2DSet = PoseMessage

DEFAULT_EPIPOLAR_THRESHOLD = 25.0


@dataclass
class FrameSet:
    timestamp_us: int  # capture time of the earliest member
    entries: dict[int, PoseMessage]

    @property
    def processable(self) -> bool:
        return len(self.entries) >= 2

    @property
    def camera_ids(self) -> list[int]:
        return sorted(self.entries)

    @property
    def span_us(self) -> int:
        ts = [m.capture_timestamp_us for m in self.entries.values()]
        return max(ts) - min(ts)


@dataclass
class SyncStats:
    received: int = 0
    emitted_sets: int = 0
    emitted_entries: int = 0
    dropped_late: int = 0
    discarded_single: int = 0


@dataclass
class _Group:
    entries: dict[int, PoseMessage]
    opened_us: int  # arrival time of the first member

    @property
    def lo(self) -> int:
        return min(m.capture_timestamp_us for m in self.entries.values())

    @property
    def hi(self) -> int:
        return max(m.capture_timestamp_us for m in self.entries.values())


class FrameSynchronizer:
    """Greedy timestamp grouping of per-camera pose messages.

    A message joins the oldest open group that has no entry from its camera
    and whose capture-time span stays within ``sync_window_us`` with it
    included. A group is emitted once every camera contributed, or when
    ``max_wait_us`` has passed since its first message arrived. Emission is in
    capture-time order, so completing a group also flushes older open groups.
    Messages that would have belonged to an already emitted group are dropped
    and counted; groups with a single entry are discarded.
    """

    def __init__(self, n_cams: int, sync_window_us: int, max_wait_us: int):
        if n_cams < 1 or sync_window_us < 0 or max_wait_us < 0:
            raise ValueError("need n_cams >= 1 and non-negative window / wait")
        self.n_cams = n_cams
        self.sync_window_us = sync_window_us
        self.max_wait_us = max_wait_us
        self._open: list[_Group] = []
        self._recent: list[tuple[int, int, frozenset]] = []  # (lo, hi, cams) of emitted groups
        self._emitted_lo = None
        self.stats = SyncStats()

    def _fits(self, lo, hi, cams, msg) -> bool:
        ts = msg.capture_timestamp_us
        return msg.camera_id not in cams and max(hi, ts) - min(lo, ts) <= self.sync_window_us

    def push(self, msg: PoseMessage, now_us: int) -> list[FrameSet]:
        self.stats.received += 1
        ts = msg.capture_timestamp_us
        late = self._emitted_lo is not None and ts < self._emitted_lo
        late = late or any(self._fits(lo, hi, cams, msg) for lo, hi, cams in self._recent)
        if late:
            self.stats.dropped_late += 1
            return []
        target = None
        for g in self._open:
            if self._fits(g.lo, g.hi, g.entries.keys(), msg):
                target = g
                break
        if target is None:
            target = _Group({}, now_us)
            self._open.append(target)
        target.entries[msg.camera_id] = msg
        self._open.sort(key=lambda g: g.lo)
        if len(target.entries) >= self.n_cams:
            return self._emit_through(self._open.index(target))
        return []

    def poll(self, now_us: int) -> list[FrameSet]:
        """Emit groups whose wait expired (and everything older than them)."""
        last = -1
        for i, g in enumerate(self._open):
            if now_us - g.opened_us >= self.max_wait_us:
                last = i
        return self._emit_through(last) if last >= 0 else []

    def next_deadline(self) -> int | None:
        if not self._open:
            return None
        return min(g.opened_us for g in self._open) + self.max_wait_us

    def flush(self) -> list[FrameSet]:
        return self._emit_through(len(self._open) - 1)

    def _emit_through(self, index: int) -> list[FrameSet]:
        out = []
        done, self._open = self._open[: index + 1], self._open[index + 1 :]
        for g in done:
            lo, hi = g.lo, g.hi
            self._recent.append((lo, hi, frozenset(g.entries)))
            self._emitted_lo = lo if self._emitted_lo is None else max(self._emitted_lo, lo)
            if len(g.entries) < 2:
                self.stats.discarded_single += len(g.entries)
                continue
            if hi - lo > self.sync_window_us:
                raise InvariantViolation("frame set exceeds its synchronization window")
            fs = FrameSet(lo, dict(sorted(g.entries.items())))
            self.stats.emitted_sets += 1
            self.stats.emitted_entries += len(fs.entries)
            out.append(fs)
        # an emitted group can only attract messages within one window of it
        horizon = self._emitted_lo - 2 * self.sync_window_us if self._emitted_lo is not None else None
        self._recent = [r for r in self._recent if horizon is None or r[1] >= horizon]
        return out


def synchronize(messages: Sequence[tuple[int, PoseMessage]], n_cams: int, sync_window_us: int,
                max_wait_us: int) -> tuple[list[FrameSet], SyncStats]:
    """Offline helper: run (arrival_us, message) pairs through a synchronizer."""
    sync = FrameSynchronizer(n_cams, sync_window_us, max_wait_us)
    out: list[FrameSet] = []
    for arrival, msg in sorted(messages, key=lambda am: am[0]):
        deadline = sync.next_deadline()
        while deadline is not None and deadline <= arrival:
            out.extend(sync.poll(deadline))
            deadline = sync.next_deadline()
        out.extend(sync.push(msg, arrival))
    out.extend(sync.flush())
    return out, sync.stats


# ------------------------------------------------------ cross-view matching


@dataclass
class MatchResult:
    groups: list[list[tuple[int, int]]] = field(default_factory=list)  # (camera_id, person index)

    def partition(self) -> set[frozenset]:
        return {frozenset(g) for g in self.groups}


def _line_distance(lines: np.ndarray, pts: np.ndarray) -> np.ndarray:
    num = np.abs(np.einsum("ij,ij->i", lines[:, :2], pts) + lines[:, 2])
    return num / np.maximum(np.linalg.norm(lines[:, :2], axis=1), 1e-12)


def epipolar_affinity(F_ab: np.ndarray, pa: PersonPose, pb: PersonPose) -> float:
    """Confidence-weighted mean symmetric epipolar distance (px) between two 2D poses.

    ``F_ab`` maps points of view a to epipolar lines in view b. Only joints
    valid in both poses count, each weighted by the smaller confidence.
    Returns inf when no joint qualifies.
    """
    both = np.asarray(pa.valid) & np.asarray(pb.valid)
    w = np.minimum(pa.confidence, pb.confidence)[both]
    if not both.any() or w.sum() <= 0:
        return float("inf")
    xa = np.c_[pa.uv[both], np.ones(both.sum())]
    xb = np.c_[pb.uv[both], np.ones(both.sum())]
    d_b = _line_distance(xa @ F_ab.T, xb[:, :2])
    d_a = _line_distance(xb @ F_ab, xa[:, :2])
    d = 0.5 * (d_a + d_b)
    return float(np.sum(w * d) / np.sum(w))


def _stack_persons(persons: Sequence[PersonPose]):
    uv = np.stack([p.uv for p in persons])  # (n, J, 2)
    xh = np.concatenate([uv, np.ones(uv.shape[:2] + (1,))], axis=2)
    valid = np.stack([np.asarray(p.valid, bool) for p in persons])
    conf = np.stack([np.asarray(p.confidence, np.float64) for p in persons])
    return xh, valid, conf


def _affinity_stacked(F_ab, a, b) -> np.ndarray:
    xa, va, ca = a
    xb, vb, cb = b
    la = xa @ F_ab.T  # epipolar lines in view b
    lb = xb @ F_ab  # epipolar lines in view a
    na = np.maximum(np.linalg.norm(la[..., :2], axis=2), 1e-12)
    nb = np.maximum(np.linalg.norm(lb[..., :2], axis=2), 1e-12)
    d_b = np.abs(np.einsum("ajk,bjk->abj", la, xb)) / na[:, None, :]
    d_a = np.abs(np.einsum("bjk,ajk->abj", lb, xa)) / nb[None, :, :]
    both = va[:, None, :] & vb[None, :, :]
    w = np.where(both, np.minimum(ca[:, None, :], cb[None, :, :]), 0.0)
    wsum = w.sum(axis=2)
    d = np.where(both, 0.5 * (d_a + d_b), 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = (w * d).sum(axis=2) / wsum
    return np.where(both.any(axis=2) & (wsum > 0), out, np.inf)


def affinity_matrix(F_ab: np.ndarray, persons_a: Sequence[PersonPose], persons_b: Sequence[PersonPose]) -> np.ndarray:
    """``epipolar_affinity`` for every (a, b) pair at once, shape (len(a), len(b))."""
    if not persons_a or not persons_b:
        return np.full((len(persons_a), len(persons_b)), np.inf)
    return _affinity_stacked(F_ab, _stack_persons(persons_a), _stack_persons(persons_b))


def match_across_views(fs: FrameSet, rig: CameraRig, threshold: float = DEFAULT_EPIPOLAR_THRESHOLD,
                       min_views: int = 2) -> MatchResult:
    """Greedy iterative grouping of persons across the views of a frame set.

    Views are visited in camera-id order. Within a view, the cheapest
    remaining (person, group) pair below ``threshold`` is assigned first;
    the cost of a group is the mean affinity to its members. Persons left
    over open new groups. Ties resolve to the lowest person index, then the
    oldest group.
    """
    groups: list[list[tuple[int, int]]] = []
    stacked = {c: _stack_persons(m.persons) for c, m in fs.entries.items() if m.persons}
    pair_aff: dict[int, np.ndarray] = {}  # earlier camera -> (its persons, this view's persons)
    for cam in fs.camera_ids:
        persons = fs.entries[cam].persons
        if not persons:
            continue
        pair_aff.clear()
        cost = np.full((len(persons), len(groups)), np.inf)
        for gi, g in enumerate(groups):
            if any(c == cam for c, _ in g):
                continue
            acc = np.zeros(len(persons))
            for c, q in g:
                if c not in pair_aff:
                    pair_aff[c] = _affinity_stacked(rig.F(c, cam), stacked[c], stacked[cam])
                acc += pair_aff[c][q]
            cost[:, gi] = acc / len(g)
        free_p = set(range(len(persons)))
        if groups:
            cost[cost >= threshold] = np.inf
            while np.isfinite(cost).any():
                # argmin returns the row-major first minimum: lowest person, then oldest group
                pi, gi = np.unravel_index(int(np.argmin(cost)), cost.shape)
                groups[gi].append((cam, int(pi)))
                free_p.discard(int(pi))
                cost[pi, :] = np.inf
                cost[:, gi] = np.inf
        for pi in sorted(free_p):
            groups.append([(cam, pi)])
    return MatchResult([g for g in groups if len(g) >= min_views])


# ----------------------------------------------------- feedback matching


def iou(a, b) -> float:
    """Intersection over union of two [x, y, w, h] boxes."""
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    if aw <= 0 or ah <= 0 or bw <= 0 or bh <= 0:
        return 0.0
    iw = min(ax + aw, bx + bw) - max(ax, bx)
    ih = min(ay + ah, by + bh) - max(ay, by)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return float(inter / (aw * ah + bw * bh - inter))


def match_feedback_to_detection(fb_boxes: Sequence, det_boxes: Sequence, min_iou: float = 0.3) -> list[tuple[int, int]]:
    """Greedy descending-IoU pairing of feedback persons to detected persons."""
    cand = []
    for i, a in enumerate(fb_boxes):
        for k, b in enumerate(det_boxes):
            v = iou(a, b)
            if v >= min_iou and v > 0:
                cand.append((-v, i, k))
    cand.sort()
    used_f, used_d, pairs = set(), set(), []
    for _, i, k in cand:
        if i in used_f or k in used_d:
            continue
        used_f.add(i)
        used_d.add(k)
        pairs.append((i, k))
    return sorted(pairs)
