from __future__ import annotations

import numpy as np
import pytest

from edgepose.errors import ConfigError
from edgepose.geometry import project_many
from edgepose.harness.scenes import occlusion_scene, walking_pose
from edgepose.protocol import FeedbackMessage, FeedbackPerson, decode, encode
from edgepose.sensor import (
    ObservationModel,
    OcclusionEvent,
    PersonScript,
    Scene,
    SensorConfig,
    SensorNode,
    padded_bbox,
)


@pytest.fixture()
def person(topology):
    return walking_pose(topology, np.array([0.2, -0.1, 0.95]), 0.4, 1.3)


def _node(cams, topology, **model):
    return SensorNode(cams[0], topology.n_joints, ObservationModel(**model), SensorConfig(), seed=3)


def test_clean_detection_within_one_cell(cams, topology, person):
    node = _node(cams, topology, confidence_range=(1.0, 1.0))
    msg = node.sense_and_publish({0: person}, 0.0)
    (p,) = msg.persons
    uv, _ = project_many(cams[0], person)
    assert p.valid.all()
    # stride 4: the peak cell centre is at most 2*sqrt(2) px from the true position
    assert np.max(np.linalg.norm(p.uv - uv, axis=1)) <= 2 * np.sqrt(2) + 0.08
    assert np.all(p.confidence >= np.exp(-0.5 * (2 * np.sqrt(2) / 6.0) ** 2) - 1e-3)


def test_message_is_quantized_and_round_trips(cams, topology, person):
    node = _node(cams, topology, peak_jitter_sigma=2.0)
    msg = node.sense_and_publish({0: person}, 0.5)
    assert decode(encode(msg), topology.n_joints) == msg
    p = msg.persons[0]
    np.testing.assert_array_equal(p.uv, np.round(p.uv, 1))
    assert len(encode(msg)) < 1500


def test_jitter_is_truncated(cams, topology, person):
    node = _node(cams, topology, peak_jitter_sigma=3.0, confidence_range=(1.0, 1.0))
    uv, _ = project_many(cams[0], person)
    for k in range(20):
        p = node.sense_and_publish({0: person}, k / 30).persons[0]
        assert np.max(np.linalg.norm(p.uv - uv, axis=1)) <= 9.0 + 2 * np.sqrt(2) + 0.08


def test_same_seed_same_output(cams, topology, person):
    a = _node(cams, topology, peak_jitter_sigma=2.0)
    b = _node(cams, topology, peak_jitter_sigma=2.0)
    for k in range(5):
        assert a.sense_and_publish({0: person}, k / 30) == b.sense_and_publish({0: person}, k / 30)


def test_hidden_and_displaced_occlusion(cams, topology, person):
    j = topology.index("l_wrist")
    hidden = OcclusionEvent(0, (j,), 0.0, 1.0, "hidden")
    moved = OcclusionEvent(0, (j,), 0.0, 1.0, "displaced", (30.0, 0.0), 0.4)
    p = _node(cams, topology, occlusion_events=(hidden,)).sense_and_publish({0: person}, 0.5).persons[0]
    assert not p.valid[j] and p.valid.sum() == topology.n_joints - 1
    p = _node(cams, topology, occlusion_events=(moved,)).sense_and_publish({0: person}, 0.5).persons[0]
    uv, _ = project_many(cams[0], person)
    assert p.valid[j] and p.confidence[j] <= 0.4
    assert abs(p.uv[j, 0] - uv[j, 0] - 30.0) < 3.0
    # inactive outside its interval and its cameras
    assert _node(cams, topology, occlusion_events=(hidden,)).sense_and_publish({0: person}, 1.5).persons[0].valid[j]


def _feedback_for(node, person, topology, t_us, shift=(0.0, 0.0)):
    uv, _ = project_many(node.camera, person)
    J = topology.n_joints
    fbp = FeedbackPerson(0, padded_bbox(uv), np.ones(J, bool), uv + np.asarray(shift), np.tile([9.0, 0.0, 9.0], (J, 1)))
    return FeedbackMessage(node.camera.id, t_us, t_us + 10_000, [fbp])


def test_feedback_restores_hidden_joint(cams, topology, person):
    j = topology.index("r_ankle")
    node = _node(cams, topology, occlusion_events=(OcclusionEvent(0, (j,), 0.0, 1.0, "hidden"),))
    node.sense_and_publish({0: person}, 0.0)
    node.receive_feedback(_feedback_for(node, person, topology, 0), 20_000)
    p = node.sense_and_publish({0: person}, 1 / 30).persons[0]
    uv, _ = project_many(cams[0], person)
    assert p.valid[j] and np.linalg.norm(p.uv[j] - uv[j]) < 5.0
    assert p.confidence[j] < 1.0 and node.feedback_used == 1


def test_feedback_beats_displaced_detection(cams, topology, person):
    j = topology.index("l_wrist")
    ev = OcclusionEvent(0, (j,), 0.0, 1.0, "displaced", (30.0, 0.0), 0.4)
    node = _node(cams, topology, occlusion_events=(ev,))
    node.sense_and_publish({0: person}, 0.0)
    node.receive_feedback(_feedback_for(node, person, topology, 0), 20_000)
    p = node.sense_and_publish({0: person}, 1 / 30).persons[0]
    uv, _ = project_many(cams[0], person)
    assert np.linalg.norm(p.uv[j] - uv[j]) < 5.0


def test_stale_or_foreign_feedback_ignored(cams, topology, person):
    node = _node(cams, topology)
    node.receive_feedback(_feedback_for(node, person, topology, 0), 1)
    node.sense_and_publish({0: person}, 0.2)  # 200 ms after the source frame
    assert node.feedback_used == 0 and node.feedback_stale == 1
    other = _feedback_for(node, person, topology, 0)
    other.camera_id = 3
    node.receive_feedback(other, 1)
    assert node._feedback == {}


def test_feedback_latest_wins(cams, topology, person):
    node = _node(cams, topology)
    new = _feedback_for(node, person, topology, 50_000)
    old = _feedback_for(node, person, topology, 10_000)
    node.receive_feedback(new, 60_000)
    node.receive_feedback(old, 70_000)
    assert node._feedback[0].source_us == 50_000


def test_zero_feedback_leaves_detections_unchanged(cams, topology, person):
    a = _node(cams, topology)
    b = _node(cams, topology)
    b.config = SensorConfig(feedback_amplitude=0.0)
    b.receive_feedback(_feedback_for(b, person, topology, 0), 1)
    assert a.sense_and_publish({0: person}, 0.0) == b.sense_and_publish({0: person}, 0.0)


def test_clock_model(cams, topology):
    node = SensorNode(cams[0], topology.n_joints, ObservationModel(clock_offset_us=500, clock_drift_ppm=100.0))
    assert node.local_time_us(10.0) == 10_000_000 + 500 + 1000


def test_false_negative_drops_person(cams, topology, person):
    node = _node(cams, topology, false_negative_rate=1.0)
    assert node.sense_and_publish({0: person}, 0.0).persons == []


def test_person_outside_view_not_reported(cams, topology, person):
    node = _node(cams, topology)
    assert node.sense_and_publish({0: person + [0.0, 0.0, 100.0]}, 0.0).persons == []


def test_person_script_interpolation():
    s = PersonScript(0, np.array([0.0, 1.0]), np.array([[[0.0, 0, 0]], [[2.0, 0, 0]]]))
    np.testing.assert_allclose(s.at(0.25), [[0.5, 0, 0]])
    assert s.at(1.5) is None


def test_scene_file_round_trip(topology, tmp_path):
    scene = occlusion_scene(topology, seed=4, duration_s=1.0)
    p = tmp_path / "scene.json"
    scene.save(p)
    back = Scene.load(p, topology.joint_names)
    assert back.occlusions == scene.occlusions
    np.testing.assert_allclose(back.persons[0].joints, scene.persons[0].joints)
    assert back.n_frames == 30


@pytest.mark.parametrize(
    "doc",
    [
        {"fps": 30, "duration_s": 1, "persons": [], "bogus": 1},
        {"fps": 30, "duration_s": 1, "persons": []},
        {"fps": 30, "duration_s": 1, "persons": [{"id": 0, "keyframes": [{"t": 0, "joints": [1, 2]}]}]},
    ],
)
def test_scene_validation(doc):
    with pytest.raises(ConfigError):
        Scene.from_dict(doc)


def test_occlusion_event_validation(topology):
    with pytest.raises(ConfigError):
        OcclusionEvent(0, (1,), 1.0, 0.0)
    with pytest.raises(ConfigError):
        OcclusionEvent(0, (1,), 0.0, 1.0, "smudged")
    ev = OcclusionEvent.from_dict({"person": 0, "joints": ["l_wrist"], "t0": 0, "t1": 1}, topology.joint_names)
    assert ev.joints == (topology.index("l_wrist"),)
    with pytest.raises(ConfigError):
        OcclusionEvent.from_dict({"person": 0, "joints": ["tail"], "t0": 0, "t1": 1}, topology.joint_names)


def test_no_feedback_matches_feedback_disabled_bitwise(cams, topology, person):
    a, b = _node(cams, topology, peak_jitter_sigma=2.0), _node(cams, topology, peak_jitter_sigma=2.0)
    for k in range(4):
        assert encode(a.sense_and_publish({0: person}, k / 30)) == encode(b.sense_and_publish({0: person}, k / 30))


def test_hidden_wrist_recovered_with_amplitude_08(cams, topology, person):
    j = topology.index("l_wrist")
    node = SensorNode(cams[0], topology.n_joints,
                      ObservationModel(occlusion_events=(OcclusionEvent(0, (j,), 0.0, 1.0, "hidden"),)),
                      SensorConfig(feedback_amplitude=0.8), seed=0)
    node.sense_and_publish({0: person}, 0.0)
    node.receive_feedback(_feedback_for(node, person, topology, 0), 10_000)
    p = node.sense_and_publish({0: person}, 1 / 30).persons[0]
    # fused value at the feedback peak: s * alpha * 0.8 = 1.2, clamped to 1
    assert p.valid[j] and p.confidence[j] == 1.0


def test_stale_feedback_frame_equals_no_feedback(cams, topology, person):
    a, b = _node(cams, topology), _node(cams, topology)
    b.receive_feedback(_feedback_for(b, person, topology, 0), 1)
    assert a.sense_and_publish({0: person}, 0.3) == b.sense_and_publish({0: person}, 0.3)


def test_clean_jitter_2px_jdr_10px_is_perfect(cams, topology):
    for cam in cams:
        node = SensorNode(cam, topology.n_joints, ObservationModel(peak_jitter_sigma=2.0), seed=cam.id)
        for k in range(30):
            pose = walking_pose(topology, np.array([0.5 * np.cos(k / 10), 0.5 * np.sin(k / 10), 0.95]), k / 10, k / 4)
            p = node.sense_and_publish({0: pose}, k / 30).persons[0]
            uv, _ = project_many(cam, pose)
            assert p.valid.all() and np.max(np.linalg.norm(p.uv - uv, axis=1)) < 10.0
