import csv
import io
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from amil import evalmetrics as em
from amil.errors import ShapeError
from amil.posedomain import DESK_JOINTS, TORSO_SEGMENT, KeypointSet, generate_dataset


def kp(xy, vis=None):
    xy = np.asarray(xy, dtype=float)
    return KeypointSet(xy, np.ones(len(xy), bool) if vis is None else vis)


def gt_set(n=20, seed=0):
    return [s.keypoints for s in generate_dataset(n, seed)]


def test_perfect_prediction():
    gt = gt_set()
    for r in (0.01, 0.2, 1.0):
        res = em.pck(gt, gt, r)
        assert res.mean_rate == 1.0 and all(v == 1.0 for v in res.per_joint_rate.values())


def test_boundary_is_inclusive():
    # torso = neck(1) -> pelvis(2), length 10
    g = np.zeros((7, 2))
    g[:, 0] = np.arange(7) * 3.0
    g[1] = [0.0, 0.0]
    g[2] = [0.0, 10.0]
    p = g + np.array([0.0, 2.5])
    res = em.pck([kp(p)], [kp(g)], 0.25)
    assert res.mean_rate == 1.0
    assert em.pck([kp(p)], [kp(g)], 0.2).mean_rate == 0.0


def test_torso_10_error_2_5():
    g = np.array([[0, 0], [0, 0], [6, 8], [1, 1], [2, 2], [3, 3], [4, 4]], float)
    p = g.copy()
    p[4] += [1.5, 2.0]
    wrong = em.pck([kp(p)], [kp(g)], 0.2)
    assert wrong.per_joint_rate[4] == 0.0
    assert em.pck([kp(p)], [kp(g)], 0.25).per_joint_rate[4] == 1.0


def test_invisible_joints_excluded():
    g = gt_set(1)[0]
    vis = g.visible.copy()
    vis[5] = False
    gt = [KeypointSet(g.xy, vis)]
    pred = [kp(g.xy + np.where(np.arange(7)[:, None] == 5, 50.0, 0.0))]
    res = em.pck(pred, gt, 0.1)
    assert 5 not in res.per_joint_rate and res.mean_rate == 1.0


def test_degenerate_samples_skipped():
    g = gt_set(2)
    bad = g[0].xy.copy()
    bad[2] = bad[1]
    gt = [kp(bad), g[1]]
    res = em.pck(gt, gt, 0.2)
    assert res.skipped_samples == 1
    assert all(c == 1 for c in res.per_joint_count.values())


def test_misaligned_lists():
    g = gt_set(2)
    with pytest.raises(ShapeError):
        em.pck(g[:1], g, 0.2)


def test_head_segment_normalizer():
    g = np.array([[0, 0], [0, 4], [0, 20], [5, 5], [6, 6], [7, 7], [8, 8]], float)
    p = g + [0.0, 1.0]
    assert em.pck([kp(p)], [kp(g)], 0.25, normalizer="head_segment").mean_rate == 1.0
    assert em.pck([kp(p)], [kp(g)], 0.2, normalizer="head_segment").mean_rate == 0.0


def test_matches_brute_force_oracle():
    rng = np.random.default_rng(8)
    gt = gt_set(100, 8)
    pred = [kp(g.xy + rng.normal(0, 3, size=g.xy.shape)) for g in gt]
    for i in range(0, 100, 7):
        gt[i] = KeypointSet(gt[i].xy, rng.uniform(size=7) > 0.2)
    for r in (0.05, 0.2, 0.5):
        res = em.pck(pred, gt, r)
        rates, mean = oracles.pck_rates([p.xy.tolist() for p in pred], [g.xy.tolist() for g in gt],
                                        [g.visible.tolist() for g in gt], TORSO_SEGMENT[7], r)
        assert res.per_joint_rate == rates
        assert res.mean_rate == pytest.approx(mean, abs=1e-15)


@given(st.floats(-100, 100), st.floats(-100, 100), st.sampled_from([0.5, 2.0, 4.0, 0.125]))
def test_translation_and_scale_invariance(dx, dy, c):
    rng = np.random.default_rng(1)
    gt = gt_set(10, 1)
    pred = [kp(g.xy + rng.normal(0, 2, size=g.xy.shape)) for g in gt]
    base = em.pck(pred, gt, 0.2)
    shift = np.array([dx, dy])
    moved = em.pck([kp(p.xy * c + shift) for p in pred], [kp(g.xy * c + shift) for g in gt], 0.2)
    assert abs(moved.mean_rate - base.mean_rate) <= 1e-12


def test_curve_monotone_and_examples():
    gt = gt_set(30, 2)
    rng = np.random.default_rng(2)
    pred = [kp(g.xy + rng.normal(0, 4, size=g.xy.shape)) for g in gt]
    rs = np.linspace(0.01, 1.0, 20)
    means = [c.mean_rate for c in em.pck_curve(pred, gt, rs)]
    assert all(a <= b for a, b in zip(means, means[1:]))
    assert em.pck_curve(pred, gt, []) == []
    assert [c.mean_rate for c in em.pck_curve(gt, gt, (0.05, 0.1, 0.2, 0.5))] == [1.0] * 4


def test_curve_step_crossing():
    g = gt_set(1, 3)[0]
    torso = np.linalg.norm(g.xy[1] - g.xy[2])
    p = g.xy.copy()
    p[3] += [0.3 * torso, 0.0]
    curve = em.pck_curve([kp(p)], [g], [0.1, 0.29, 0.31, 0.5])
    assert [c.per_joint_rate[3] for c in curve] == [0.0, 0.0, 1.0, 1.0]


def test_confusion_identity_and_row_sums():
    gt = gt_set(10, 4)
    mat = em.confusion(gt, gt, 4.0)
    assert mat.shape == (7, 8)
    assert np.array_equal(mat[:, :7], 10 * np.eye(7, dtype=int))
    rng = np.random.default_rng(4)
    pred = [kp(g.xy + rng.normal(0, 5, size=g.xy.shape)) for g in gt]
    assert np.all(em.confusion(pred, gt, 4.0).sum(axis=1) == 10)


def test_confusion_swapped_hands():
    gt = gt_set(10, 5)
    swapped = []
    for g in gt:
        xy = g.xy.copy()
        xy[[3, 4]] = xy[[4, 3]]
        swapped.append(kp(xy))
    mat = em.confusion(swapped, gt, 4.0)
    assert mat[3, 4] == 10 and mat[4, 3] == 10
    assert mat[3, 3] == 0 and mat[4, 4] == 0


def test_confusion_far_predictions_miss():
    gt = gt_set(5, 6)
    far = [kp(np.full((7, 2), 1000.0)) for _ in gt]
    mat = em.confusion(far, gt, 4.0)
    assert np.all(mat[:, 7] == 5) and not np.any(mat[:, :7])


def test_csv_and_json():
    gt = gt_set(5)
    res = em.pck(gt, gt, 0.2, joint_names=list(DESK_JOINTS))
    rows = list(csv.reader(io.StringIO(res.to_csv())))
    assert rows[0] == ["joint", "rate"]
    assert rows[1] == ["head", "1.0"] and rows[-1] == ["mean", "1.0"]
    assert len(rows) == 9
    blob = json.loads(res.to_json())
    assert blob["mean_rate"] == 1.0 and blob["r"] == 0.2 and blob["normalizer"] == "torso"
    assert blob["per_joint_rate"]["0"] == 1.0
    cm = em.confusion_to_csv(em.confusion(gt, gt, 4.0), DESK_JOINTS)
    assert cm.splitlines()[0] == "pred,head,neck,pelvis,l_hand,r_hand,l_foot,r_foot,miss"
    curve = em.curve_to_csv(em.pck_curve(gt, gt, [0.1, 0.2]))
    assert curve.splitlines() == ["r,mean", "0.1,1.0", "0.2,1.0"]
