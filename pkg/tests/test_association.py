from __future__ import annotations

import numpy as np
import pytest

from edgepose.association import (
    FrameSet,
    FrameSynchronizer,
    epipolar_affinity,
    iou,
    match_across_views,
    match_feedback_to_detection,
    synchronize,
)
from edgepose.errors import InvariantViolation
from edgepose.geometry import project_many
from edgepose.harness.scenes import multi_person_positions, walking_pose
from edgepose.protocol import PersonPose, PoseMessage

from oracles import exhaustive_grouping


def _msg(cam, ts, persons=()):
    return PoseMessage(cam, ts, list(persons))


def _pose(uv, conf=1.0):
    J = len(uv)
    return PersonPose(0, np.array([0.0, 0.0, 10.0, 10.0]), np.ones(J, bool), uv, np.full(J, conf), np.ones((J, 3)) * [4, 0, 4])


# ------------------------------------------------------------ synchronizer


def test_complete_group_emitted_immediately():
    s = FrameSynchronizer(3, 5000, 100_000)
    assert s.push(_msg(0, 1000), 10) == []
    assert s.push(_msg(1, 1500), 11) == []
    (fs,) = s.push(_msg(2, 900), 12)
    assert fs.camera_ids == [0, 1, 2] and fs.timestamp_us == 900 and fs.span_us == 600


def test_timeout_emits_partial_group():
    s = FrameSynchronizer(3, 5000, 50_000)
    s.push(_msg(0, 0), 0)
    s.push(_msg(1, 10), 20_000)
    assert s.next_deadline() == 50_000
    assert s.poll(49_999) == []
    (fs,) = s.poll(50_000)
    assert fs.camera_ids == [0, 1] and fs.processable


def test_window_splits_groups_and_singletons_are_discarded():
    s = FrameSynchronizer(2, 5000, 10_000)
    s.push(_msg(0, 0), 0)
    s.push(_msg(1, 6000), 1)  # outside the window: own group
    assert s.flush() == []
    assert s.stats.discarded_single == 2


def test_same_camera_twice_opens_new_group():
    s = FrameSynchronizer(2, 40_000, 10**6)
    s.push(_msg(0, 0), 0)
    s.push(_msg(0, 33_000), 1)
    out = s.push(_msg(1, 100), 2)
    assert len(out) == 1 and out[0].entries[0].capture_timestamp_us == 0


def test_completed_group_flushes_older_ones():
    s = FrameSynchronizer(2, 5000, 10**6)
    s.push(_msg(0, 0), 0)
    s.push(_msg(0, 33_000), 1)
    out = s.push(_msg(1, 33_100), 2)
    assert [fs.timestamp_us for fs in out] == [33_000]
    assert s.stats.discarded_single == 1


def test_late_message_dropped():
    s = FrameSynchronizer(3, 5000, 10_000)
    s.push(_msg(0, 33_000), 0)
    s.push(_msg(1, 33_000), 1)
    assert len(s.poll(10_000)) == 1
    assert s.push(_msg(1, 1000), 20_000) == []  # older than what was emitted
    assert s.push(_msg(2, 34_000), 20_001) == []  # straggler of the emitted group
    assert s.push(_msg(0, 34_000), 20_002) == []  # camera 0 already there: a new group, not late
    assert s.stats.dropped_late == 2


def test_synchronize_offline_stream():
    msgs = []
    for k in range(30):
        for cam in range(4):
            msgs.append((k * 33_333 + 2000 + 100 * cam, _msg(cam, k * 33_333 + 37 * cam)))
    sets, stats = synchronize(msgs, 4, 10_000, 60_000)
    assert len(sets) == 30 and all(len(f.entries) == 4 for f in sets)
    assert [f.timestamp_us for f in sets] == sorted(f.timestamp_us for f in sets)
    assert stats.received == 120 and stats.emitted_entries == 120


def test_bad_parameters():
    with pytest.raises(ValueError):
        FrameSynchronizer(0, 1, 1)


def test_window_violation_is_an_invariant(monkeypatch):
    s = FrameSynchronizer(3, 1000, 10)
    s.push(_msg(0, 0), 0)
    s.push(_msg(1, 500), 0)
    s.sync_window_us = 100  # shrink the window under an open group
    with pytest.raises(InvariantViolation):
        s.flush()


# ------------------------------------------------------ epipolar matching


def _scene_frameset(topology, cams, seed, n=3, shuffle=True):
    rng = np.random.default_rng(seed)
    pts = multi_person_positions(rng, n)
    poses = [walking_pose(topology, np.array([p[0], p[1], 0.95]), rng.uniform(0, 6.3), rng.uniform(0, 6.3)) for p in pts]
    entries, truth = {}, {}
    for cam in cams:
        order = rng.permutation(n) if shuffle else np.arange(n)
        persons = [_pose(project_many(cam, poses[i])[0]) for i in order]
        entries[cam.id] = _msg(cam.id, 0, persons)
        for local, i in enumerate(order):
            truth.setdefault(int(i), []).append((cam.id, local))
    return FrameSet(0, entries), {frozenset(v) for v in truth.values()}


def test_affinity_zero_for_true_match(topology, rig):
    fs, truth = _scene_frameset(topology, list(rig), 0, shuffle=False)
    a = fs.entries[0].persons[0]
    b = fs.entries[1].persons[0]
    c = fs.entries[1].persons[1]
    assert epipolar_affinity(rig.F(0, 1), a, b) < 1e-6
    assert epipolar_affinity(rig.F(0, 1), a, c) > 1.0


def test_affinity_inf_without_shared_joints(rig):
    uv = np.zeros((3, 2))
    a, b = _pose(uv), _pose(uv)
    b.valid[:] = False
    assert epipolar_affinity(rig.F(0, 1), a, b) == float("inf")


@pytest.mark.parametrize("seed", range(10))
def test_matching_agrees_with_exhaustive_oracle(topology, rig, seed):
    fs, truth = _scene_frameset(topology, list(rig), seed)
    got = match_across_views(fs, rig).partition()
    assert got == truth
    ref = fs.entries[0].persons
    costs = []
    for cam in fs.camera_ids[1:]:
        other = fs.entries[cam].persons
        costs.append(np.array([[epipolar_affinity(rig.F(0, cam), p, q) for q in other] for p in ref]))
    perms = exhaustive_grouping(costs)
    oracle = {frozenset([(0, i)] + [(cam, perms[k][i]) for k, cam in enumerate(fs.camera_ids[1:])]) for i in range(len(ref))}
    assert got == oracle


def test_matching_threshold_and_min_views(topology, rig):
    fs, _ = _scene_frameset(topology, list(rig), 3)
    assert match_across_views(fs, rig, threshold=0.0).groups == []
    assert len(match_across_views(fs, rig, threshold=0.0, min_views=1).groups) == 12


# ---------------------------------------------------------- IoU matching


def test_iou_values():
    assert iou([0, 0, 10, 10], [0, 0, 10, 10]) == 1.0
    assert iou([0, 0, 10, 10], [5, 0, 10, 10]) == pytest.approx(50 / 150)
    assert iou([0, 0, 10, 10], [20, 0, 10, 10]) == 0.0
    assert iou([0, 0, 0, 10], [0, 0, 10, 10]) == 0.0


def test_feedback_matching_greedy_descending():
    fb = [[0, 0, 10, 10], [4, 0, 10, 10]]
    det = [[5, 0, 10, 10], [0, 0, 10, 10], [100, 100, 5, 5]]
    assert match_feedback_to_detection(fb, det) == [(0, 1), (1, 0)]
    assert match_feedback_to_detection(fb, det, min_iou=0.99) == [(0, 1)]
    assert match_feedback_to_detection([], det) == []


def test_four_equal_timestamps_one_complete_set():
    sets, stats = synchronize([(10, _msg(c, 5000)) for c in range(4)], 4, 16_667, 33_333)
    assert len(sets) == 1 and len(sets[0].entries) == 4 and stats.dropped_late == 0


def test_late_camera_is_dropped_after_timeout():
    msgs = [(1000, _msg(c, 0)) for c in range(3)] + [(50_000, _msg(3, 0))]
    sets, stats = synchronize(msgs, 4, 16_667, 20_000)
    assert len(sets) == 1 and len(sets[0].entries) == 3 and stats.dropped_late == 1


def test_jittered_streams_never_drop():
    rng = np.random.default_rng(11)
    msgs = []
    for k in range(300):
        for cam in range(4):
            ts = k * 33_333 + int(rng.uniform(-5000, 5000))
            msgs.append((ts + 2000 + int(rng.uniform(0, 3000)), _msg(cam, ts)))
    sets, stats = synchronize(msgs, 4, 16_000, 33_333)
    assert stats.dropped_late == 0 and stats.discarded_single == 0
    assert len(sets) == 300 and all(len(f.entries) == 4 for f in sets)


def test_single_view_gives_no_group(topology, rig):
    fs, _ = _scene_frameset(topology, list(rig)[:1], 0)
    assert match_across_views(fs, rig).groups == []


def test_one_person_one_group(topology, rig):
    fs, _ = _scene_frameset(topology, list(rig), 5, n=1)
    (g,) = match_across_views(fs, rig, threshold=1.0).groups
    assert sorted(c for c, _ in g) == [0, 1, 2, 3]


def test_permuting_persons_keeps_group_contents(topology, rig):
    fs, truth = _scene_frameset(topology, list(rig), 6, shuffle=False)
    base = match_across_views(fs, rig).partition()
    persons = fs.entries[2].persons
    fs.entries[2] = _msg(2, 0, [persons[2], persons[0], persons[1]])
    relabel = {0: 2, 1: 0, 2: 1}
    permuted = match_across_views(fs, rig).partition()
    back = {frozenset((c, relabel[i] if c == 2 else i) for c, i in g) for g in permuted}
    assert back == base == truth


@pytest.mark.parametrize("seed", range(50))
def test_greedy_equals_optimal_on_separated_scenes(topology, rig, seed):
    fs, truth = _scene_frameset(topology, list(rig), 100 + seed)
    assert match_across_views(fs, rig).partition() == truth


def test_iou_threshold_boundary():
    a, b = [0, 0, 10, 10], [5, 0, 10, 10]
    assert match_feedback_to_detection([a], [b], min_iou=1 / 3) == [(0, 0)]
    assert match_feedback_to_detection([a], [b], min_iou=0.34) == []


def test_affinity_matrix_matches_pairwise(topology, rig):
    from edgepose.association import affinity_matrix

    fs, _ = _scene_frameset(topology, list(rig), 21)
    a, b = fs.entries[0].persons, fs.entries[2].persons
    b[1].valid[:5] = False
    a[0].confidence[3] = 0.0
    M = affinity_matrix(rig.F(0, 2), a, b)
    for i, pa in enumerate(a):
        for k, pb in enumerate(b):
            assert M[i, k] == pytest.approx(epipolar_affinity(rig.F(0, 2), pa, pb), rel=1e-12)
    none = _pose(np.zeros((17, 2)))
    none.valid[:] = False
    assert np.isinf(affinity_matrix(rig.F(0, 1), [none], b)).all()
