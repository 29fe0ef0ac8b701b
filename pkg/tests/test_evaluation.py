import math
import operator

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from cstnet.boxes import BoundingBox, iou, iou_arrays
from cstnet.errors import ContractError
from cstnet.evaluation import (NPR_THRESHOLDS, PR_THRESHOLDS, SR_THRESHOLDS, TrackRecord, evaluate,
                               normalized_precision_curve, precision_curve, read_boxes,
                               report_lines, success_curve)


def gt_track(n=30, seed=0):
    rng = np.random.default_rng(seed)
    return np.column_stack([rng.uniform(0, 300, (n, 2)), rng.uniform(5, 80, (n, 2))])


def shifted(gt, dx, dy=0.0):
    p = gt.copy()
    p[:, 0] += dx
    p[:, 1] += dy
    return p


def iou_scalar(a, b):
    """Intersection over union straight from the corner definitions."""
    ix = max(0.0, min(a[0] + a[2], b[0] + b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[1] + a[3], b[1] + b[3]) - max(a[1], b[1]))
    inter = ix * iy
    return inter / (a[2] * a[3] + b[2] * b[3] - inter)


# -- IoU ------------------------------------------------------------------------------

def test_iou_examples():
    a = BoundingBox(0, 0, 2, 2)
    assert iou(a, a) == 1.0
    assert iou(a, BoundingBox(5, 5, 1, 1)) == 0.0
    assert iou(a, BoundingBox(1, 1, 2, 2)) == pytest.approx(1 / 7, abs=1e-15)


@settings(max_examples=200)
@given(st.lists(st.floats(-100, 100), min_size=2, max_size=2),
       st.lists(st.floats(0.01, 50), min_size=2, max_size=2),
       st.lists(st.floats(-100, 100), min_size=2, max_size=2),
       st.lists(st.floats(0.01, 50), min_size=2, max_size=2))
def test_iou_properties(pa, sa, pb, sb):
    a, b = BoundingBox(*pa, *sa), BoundingBox(*pb, *sb)
    v = iou(a, b)
    assert 0.0 <= v <= 1.0
    assert v == iou(b, a)
    assert iou(a, a) == 1.0
    # a width recovered from two edges carries ~eps * |edge| absolute error, so
    # the two area conventions may differ by that much relative to the smallest side
    edges = max(abs(t) for t in (*pa, *pb)) + 50
    tol = 16 * np.finfo(float).eps * edges / min(*sa, *sb)
    assert abs(v - iou_scalar(a.as_tuple(), b.as_tuple())) <= tol


# -- precision ------------------------------------------------------------------------

def test_precision_perfect_and_counting_example():
    gt = gt_track(3)
    assert np.all(precision_curve(gt, gt).values == 1.0)
    pred = gt.copy()
    pred[1, 0] += 10
    pred[2, 1] += 30
    curve = precision_curve(pred, gt)
    assert curve.summary == 2 / 3


def test_precision_boundary_uses_less_equal():
    gt = np.round(gt_track(10))
    curve = precision_curve(shifted(gt, 20.0), gt)
    assert curve.values[20] == 1.0 and curve.values[19] == 0.0 and curve.summary == 1.0


def test_length_mismatch():
    gt = gt_track(4)
    for fn in (precision_curve, normalized_precision_curve, success_curve):
        with pytest.raises(ContractError):
            fn(gt[:3], gt)


# -- normalized precision ---------------------------------------------------------------

def test_npr_perfect():
    gt = gt_track()
    assert normalized_precision_curve(gt, gt).summary == 1.0


def test_npr_constant_error_step():
    gt = np.tile([10.0, 20.0, 40.0, 16.0], (8, 1))
    pred = shifted(gt, 0.25 * 40)                      # normalized error exactly 0.25
    curve = normalized_precision_curve(pred, gt)
    assert np.array_equal(curve.values, (NPR_THRESHOLDS >= 0.25).astype(float))
    assert curve.summary == 0.5


def test_npr_degenerate_gt():
    gt = gt_track(3)
    gt[1, 3] = 0
    with pytest.raises(ContractError):
        normalized_precision_curve(gt, gt)


def test_npr_summary_is_area_under_its_step_curve():
    gt = gt_track(40, 1)
    pred = gt + np.random.default_rng(1).normal(0, 6, gt.shape)
    pred[:, 2:] = np.abs(pred[:, 2:]) + 1
    fine = np.linspace(0, 0.5, 200001)
    curve = normalized_precision_curve(pred, gt, thresholds=fine)
    riemann = np.trapezoid(curve.values, fine) / 0.5
    assert abs(riemann - curve.summary) < 1e-4


# -- success --------------------------------------------------------------------------

def test_success_perfect_is_exactly_one():
    gt = gt_track()
    assert success_curve(gt, gt).summary == 1.0


def test_success_half_overlap():
    gt = np.tile([0.0, 0.0, 3.0, 2.0], (5, 1))
    pred = np.tile([0.0, 0.0, 1.5, 2.0], (5, 1))       # inside gt, half the area
    assert np.all(iou_arrays(pred, gt) == 0.5)
    curve = success_curve(pred, gt)
    assert curve.summary == 11 / 21
    assert success_curve(pred, gt, strict=True).summary == 10 / 21


# -- brute-force counting oracles -----------------------------------------------------------

@pytest.mark.parametrize("seed", range(5))
def test_curves_vs_counting_oracle(seed):
    gt = gt_track(50, seed)
    rng = np.random.default_rng(seed + 100)
    pred = gt + rng.normal(0, 15, gt.shape)
    pred[:, 2:] = np.abs(pred[:, 2:]) + 1
    cerr = [math.hypot(p[0] + p[2] / 2 - g[0] - g[2] / 2, p[1] + p[3] / 2 - g[1] - g[3] / 2)
            for p, g in zip(pred, gt)]
    nerr = [math.hypot((p[0] + p[2] / 2 - g[0] - g[2] / 2) / g[2],
                       (p[1] + p[3] / 2 - g[1] - g[3] / 2) / g[3]) for p, g in zip(pred, gt)]
    ious = [iou_scalar(p, g) for p, g in zip(pred, gt)]
    pr = precision_curve(pred, gt)
    npr = normalized_precision_curve(pred, gt)
    sr = success_curve(pred, gt)
    assert np.max(np.abs(pr.values - oracles.count_fraction(cerr, PR_THRESHOLDS, operator.le))) < 1e-9
    assert np.max(np.abs(npr.values - oracles.count_fraction(nerr, NPR_THRESHOLDS, operator.le))) < 1e-9
    assert np.max(np.abs(sr.values - oracles.count_fraction(ious, SR_THRESHOLDS, operator.ge))) < 1e-9
    assert abs(sr.summary - np.mean(oracles.count_fraction(ious, SR_THRESHOLDS, operator.ge))) < 1e-9
    assert abs(npr.summary - np.mean([max(0.0, 0.5 - e) for e in nerr]) / 0.5) < 1e-9
    assert np.all(np.diff(pr.values) >= 0) and np.all(np.diff(sr.values) <= 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(2, 25))
def test_metrics_permutation_invariant(seed, n):
    gt = gt_track(n, seed % 1000)
    rng = np.random.default_rng(seed)
    pred = gt + rng.normal(0, 10, gt.shape)
    pred[:, 2:] = np.abs(pred[:, 2:]) + 1
    perm = rng.permutation(n)
    a, b = evaluate(pred, gt), evaluate(pred[perm], gt[perm])
    for k in a:
        assert a[k].summary == pytest.approx(b[k].summary, abs=1e-15)
        assert np.array_equal(a[k].values, b[k].values)


def test_self_evaluation_all_ones():
    gt = [BoundingBox(*row) for row in gt_track(25, 3)]
    res = evaluate(TrackRecord(gt), TrackRecord(gt))
    assert res["PR"].summary == res["NPR"].summary == res["SR"].summary == 1.0


# -- text interfaces ------------------------------------------------------------------

def test_read_boxes_and_report(tmp_path):
    f = tmp_path / "gt.txt"
    f.write_text("1,2,3,4\n\n5.5,6,7,8\n")
    boxes = read_boxes(f)
    assert [b.as_tuple() for b in boxes] == [(1, 2, 3, 4), (5.5, 6, 7, 8)]
    (tmp_path / "bad.txt").write_text("1,2,3\n")
    with pytest.raises(ContractError):
        read_boxes(tmp_path / "bad.txt")
    (tmp_path / "nan.txt").write_text("1,2,x,4\n")
    with pytest.raises(ContractError):
        read_boxes(tmp_path / "nan.txt")
    res = evaluate(boxes, boxes)
    lines = report_lines(res, 2)
    assert lines[0] == "frames=2" and "PR=1.0" in lines and "SR.rule=mean@21>=" in lines
    dump = res["SR"].dump().splitlines()
    assert len(dump) == 21 and dump[0] == "0.0,1.0"
