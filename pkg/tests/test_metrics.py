from __future__ import annotations

import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edgepose.errors import NoValidJoints
from edgepose.harness.metrics import (
    CLASS_COLUMNS,
    ClassAccumulator,
    LimbAccumulator,
    head_threshold,
    jdr,
    mpjpe,
    pcp,
)
from edgepose.harness.report import HEADER, emit_report, read_json, write_class_csv, write_json
from edgepose.harness.runner import MetricsReport
from edgepose.harness.scenes import walking_pose


@pytest.fixture(scope="module")
def gt(topology):
    return walking_pose(topology, np.array([0.1, 0.2, 0.95]), 0.7, 0.9)


# --------------------------------------------------------------- mpjpe


def test_mpjpe_zero_for_exact(topology, gt):
    assert all(v == 0.0 for v in mpjpe(gt, np.ones(len(gt), bool), gt, topology).values())


def test_mpjpe_single_offset(topology, gt):
    est = gt.copy()
    est[5, 0] += 0.010
    assert mpjpe(est, np.ones(17, bool), gt, topology)["avg"] == pytest.approx(10 / 17, rel=1e-9)


def test_mpjpe_no_valid_joint_raises(topology, gt):
    with pytest.raises(NoValidJoints):
        mpjpe(gt, np.zeros(17, bool), gt, topology)


def _brute_mpjpe(est, valid, gt, names):
    per = {}
    total = []
    for j in range(len(gt)):
        if not valid[j]:
            continue
        d = math.sqrt(sum((float(est[j][a]) - float(gt[j][a])) ** 2 for a in range(3))) * 1000
        total.append(d)
        for key, cls in (("hip", "hips"), ("knee", "knees"), ("ankle", "ankles"),
                         ("shoulder", "shoulders"), ("elbow", "elbows"), ("wrist", "wrists")):
            if key in names[j]:
                per.setdefault(cls, []).append(d)
    out = {c: sum(v) / len(v) for c, v in per.items()}
    out["avg"] = sum(total) / len(total)
    return out


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_mpjpe_matches_brute_force(topology, gt, seed):
    rng = np.random.default_rng(seed)
    est = gt + rng.normal(0, 0.05, gt.shape)
    valid = rng.random(17) < 0.8
    valid[0] = True
    got = mpjpe(est, valid, gt, topology)
    ref = _brute_mpjpe(est, valid, gt, topology.joint_names)
    for k, v in ref.items():
        assert got[k] == pytest.approx(v, rel=1e-12)


# ----------------------------------------------------------------- jdr


def test_jdr_all_exact_and_all_invalid(topology, gt):
    uv = gt[:, :2] * 100
    assert jdr(uv, np.ones(17, bool), uv, 5.0, topology)["avg"] == 100.0
    assert jdr(uv, np.zeros(17, bool), uv, 5.0, topology)["avg"] == 0.0


def test_jdr_half(topology):
    gt_uv = np.zeros((17, 2))
    est = gt_uv.copy()
    est[::2, 0] = 20.0
    scored = np.arange(17) < 16  # an even number of scored joints, half of them off
    assert jdr(est, np.ones(17, bool), gt_uv, 10.0, topology, gt_mask=scored)["avg"] == 50.0


def test_jdr_strict_threshold(topology):
    gt_uv = np.zeros((17, 2))
    est = np.tile([10.0, 0.0], (17, 1))
    assert jdr(est, np.ones(17, bool), gt_uv, 10.0, topology)["avg"] == 0.0


def test_head_threshold_and_fallback(topology):
    uv = np.zeros((17, 2))
    uv[topology.index("head")] = [0, 30]
    assert head_threshold(uv, topology) == 15.0
    assert head_threshold(np.zeros((17, 2)), topology) == 10.0


# ----------------------------------------------------------------- pcp


def test_pcp_exact(topology, gt):
    assert pcp(gt, np.ones(17, bool), gt, topology)["avg"] == 100.0


def test_pcp_boundary_is_strict(topology):
    # one endpoint displaced by the full limb length: mean error is exactly half the limb, not correct
    p, c = topology.bones[0]
    name = topology.bone_name(0)
    X = np.zeros((17, 3))
    X[c] = [0.0, 0.0, 1.0]
    Y = X.copy()
    Y[c] = [0.0, 0.0, 2.0]
    assert pcp(Y, np.ones(17, bool), X, topology)[name] == 0.0


def _brute_pcp(est, valid, gt, bones):
    ok = []
    for p, c in bones:
        if not (valid[p] and valid[c]):
            ok.append(False)
            continue
        e = (np.sqrt(((est[p] - gt[p]) ** 2).sum()) + np.sqrt(((est[c] - gt[c]) ** 2).sum())) / 2
        ok.append(bool(e < np.sqrt(((gt[p] - gt[c]) ** 2).sum()) / 2))
    return ok


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_pcp_matches_brute_force(topology, gt, seed):
    rng = np.random.default_rng(seed)
    est = gt + rng.normal(0, 0.12, gt.shape)
    valid = rng.random(17) < 0.9
    got = pcp(est, valid, gt, topology)
    ref = _brute_pcp(est, valid, gt, topology.bones)
    for b, v in enumerate(ref):
        assert got[topology.bone_name(b)] == 100.0 * v
    assert got["avg"] == pytest.approx(100.0 * sum(ref) / len(ref))


# -------------------------------------------------------- accumulators


def test_class_accumulator_pools_samples(topology):
    acc = ClassAccumulator(17)
    acc.add(np.full(17, 2.0))
    acc.add(np.full(17, 4.0), mask=np.arange(17) < 5)
    out = acc.by_class(topology)
    assert out["avg"] == pytest.approx((17 * 2 + 5 * 4) / 22)
    assert set(out) == set(CLASS_COLUMNS)


def test_limb_accumulator(topology):
    acc = LimbAccumulator(len(topology.bones))
    acc.add(np.ones(len(topology.bones), bool))
    acc.add(np.zeros(len(topology.bones), bool))
    assert acc.report(topology)["avg"] == 50.0


# -------------------------------------------------------------- report


def test_header_is_fixed():
    assert HEADER == ["hips", "knees", "ankles", "shoulders", "elbows", "wrists", "avg"]


def test_empty_report_gives_header_only_csv(tmp_path):
    path = write_class_csv({}, tmp_path / "t.csv")
    rows = list(csv.reader(path.open()))
    assert rows == [["run"] + HEADER]


def test_json_round_trip(tmp_path):
    rep = MetricsReport(meta={"seed": 3}, frames=5, mpjpe_mm={"avg": 1.5, "hips": float("nan")},
                        jdr_occluded_pct=88.0, series=[{"frame": 0, "t_s": 0.0}])
    back = read_json(write_json(rep, tmp_path / "r.json"))
    assert back.to_dict() == rep.to_dict()
    assert json.loads((tmp_path / "r.json").read_text())["mpjpe_mm"]["hips"] is None


def test_emit_report_csv_tables(tmp_path):
    rep = MetricsReport(mpjpe_mm={c: 1.0 for c in HEADER}, jdr_pct={c: 100.0 for c in HEADER},
                        pcp_pct={"a-b": 100.0, "avg": 100.0})
    paths = emit_report({"fb_on": rep}, tmp_path)
    names = {p.name for p in paths}
    assert {"mpjpe_mm.csv", "jdr_pct.csv", "reproj_px.csv", "pcp_pct.csv", "series_fb_on.csv"} <= names
    rows = list(csv.reader((tmp_path / "mpjpe_mm.csv").open()))
    assert rows[0] == ["run"] + HEADER and rows[1][0] == "fb_on"
    with pytest.raises(ValueError):
        emit_report({"x": rep}, tmp_path, "xml")
