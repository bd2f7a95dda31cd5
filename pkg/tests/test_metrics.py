import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mv3d.metrics import (RECALL_POINTS, Predictions, average_precision, bev_counts, bev_iou, composite_score,
                          evaluate_detections, greedy_match, iou_from_counts)
from mv3d.scene import Boxes


def gt_boxes(centers, cls=None, vel=None, yaw=None):
    c = np.asarray(centers, dtype=float).reshape(-1, 3)
    n = len(c)
    return Boxes(np.zeros(n, int) if cls is None else np.asarray(cls), c, np.ones((n, 3)),
                 np.zeros(n) if yaw is None else np.asarray(yaw, dtype=float),
                 np.zeros((n, 2)) if vel is None else np.asarray(vel, dtype=float), np.arange(n))


def preds(centers, scores, cls=None, vel=None, yaw=None):
    c = np.asarray(centers, dtype=float).reshape(-1, 3)
    n = len(c)
    return Predictions(np.zeros(n, int) if cls is None else np.asarray(cls), np.asarray(scores, dtype=float), c,
                       np.zeros(n) if yaw is None else np.asarray(yaw, dtype=float),
                       np.zeros((n, 2)) if vel is None else np.asarray(vel, dtype=float))


def ap_oracle(is_tp, n_gt):
    """Direct definition: mean over recall points of the best precision at recall >= r."""
    tp = np.cumsum(is_tp)
    prec = tp / np.arange(1, len(is_tp) + 1)
    rec = tp / n_gt
    vals = []
    for r in RECALL_POINTS:
        ok = prec[rec >= r - 1e-12]
        vals.append(ok.max() if ok.size else 0.0)
    return float(np.mean(vals))


def test_ap_hand_value():
    ap = average_precision(np.array([True, False, True]), 2)
    assert math.isclose(ap, (21 + 20 * 2 / 3) / 41)


@settings(max_examples=80, deadline=None)
@given(st.lists(st.booleans(), max_size=25), st.integers(1, 30))
def test_ap_matches_definition(flags, extra):
    is_tp = np.array(flags, dtype=bool)
    n_gt = int(is_tp.sum()) + extra - 1 if is_tp.sum() else extra
    n_gt = max(n_gt, int(is_tp.sum()), 1)
    expect = ap_oracle(is_tp, n_gt) if len(is_tp) else 0.0
    assert math.isclose(average_precision(is_tp, n_gt), expect, abs_tol=1e-12)


def test_perfect_detection():
    g = [gt_boxes([[1, 2, 0], [10, -3, 0]], cls=[0, 1], vel=[[1, 0], [0, 2]], yaw=[0.1, -2.0])]
    p = [preds(g[0].center, [0.9, 0.8], cls=[0, 1], vel=g[0].velocity, yaw=g[0].yaw)]
    r = evaluate_detections(p, g)
    assert r.mAP == 1.0 and r.mATE == 0.0 and r.mAVE == 0.0 and r.mAOE == 0.0
    assert r.nds == 1.0 and r.flags == []


def test_velocity_three_four_five():
    g = [gt_boxes([[0, 0, 0]])]
    p = [preds([[0, 0, 0]], [1.0], vel=[[0.3, 0.4]])]
    assert math.isclose(evaluate_detections(p, g).mAVE, 0.5)


def test_yaw_error_wraps():
    g = [gt_boxes([[0, 0, 0]], yaw=[math.pi - 0.1])]
    p = [preds([[0, 0, 0]], [1.0], yaw=[-math.pi + 0.1])]
    assert math.isclose(evaluate_detections(p, g).mAOE, 0.2, abs_tol=1e-12)


def test_threshold_is_strict():
    g = [gt_boxes([[0, 0, 0]])]
    p = [preds([[2.0, 0, 5.0]], [1.0])]  # BEV distance exactly 2, z ignored
    assert greedy_match(p, g, 0, 2.0)[0].tolist() == [False]
    assert greedy_match(p, g, 0, 2.0001)[0].tolist() == [True]


def test_greedy_order_by_score():
    g = [gt_boxes([[0, 0, 0]])]
    p = [preds([[0.1, 0, 0], [0.0, 0, 0]], [0.9, 0.5])]
    is_tp, scores, n_gt, pairs = greedy_match(p, g, 0, 1.0)
    assert is_tp.tolist() == [True, False]
    assert pairs[0].pred == 0 and n_gt == 1


def test_class_without_gt_is_skipped():
    g = [gt_boxes([[0, 0, 0]], cls=[0])]
    p = [preds([[0, 0, 0], [5, 5, 0]], [0.9, 0.9], cls=[0, 1])]
    r = evaluate_detections(p, g)
    assert list(r.ap) == ["car"] and r.mAP == 1.0


def test_empty_tp_sentinel_and_flag():
    g = [gt_boxes([[0, 0, 0]])]
    p = [preds([[30, 0, 0]], [0.9])]
    r = evaluate_detections(p, g)
    assert (r.mATE, r.mAVE, r.mAOE) == (1.0, 1.0, 1.0)
    assert "no_tp_matches" in r.flags
    assert r.nds == 0.0


def test_composite_score():
    assert math.isclose(composite_score(0.4, (0.5, 2.0, 0.25)), (2.0 + 0.5 + 0.0 + 0.75) / 8)


def test_bev_iou_and_counts():
    gt = np.zeros((3, 4, 4))
    gt[0, :2, :2] = 1
    gt[1, 0, 0] = 1
    pred = np.zeros((3, 4, 4))
    pred[0, :2, :] = 0.7
    pred[1, 0, 0] = 0.5  # threshold is inclusive
    iou, empty = bev_iou(pred, gt)
    np.testing.assert_allclose(iou, [0.5, 1.0, 1.0])
    assert empty.tolist() == [False, False, True]
    # counts accumulate across frames exactly like a stacked evaluation
    a, b = bev_counts(pred, gt), bev_counts(pred[None].repeat(2, 0), gt[None].repeat(2, 0))
    np.testing.assert_array_equal(b[0], 2 * a[0])
    np.testing.assert_allclose(iou_from_counts(*b)[0], iou)


def test_frame_count_mismatch():
    with pytest.raises(ValueError):
        greedy_match([Predictions.empty()], [], 0, 1.0)
    with pytest.raises(ValueError):
        average_precision(np.array([True]), 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_ap_is_monotone_in_threshold(seed):
    rng = np.random.default_rng(seed)
    g = [gt_boxes(rng.uniform(-20, 20, (5, 3)))]
    p = [preds(g[0].center + rng.normal(0, 1.5, (5, 3)), rng.uniform(size=5))]
    r = evaluate_detections(p, g)
    vals = [r.ap["car"][t] for t in (0.5, 1.0, 2.0, 4.0)]
    assert all(a <= b + 1e-12 for a, b in zip(vals, vals[1:]))
