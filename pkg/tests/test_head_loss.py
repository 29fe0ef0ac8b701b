import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from cstnet import tensor as T
from cstnet.boxes import BoundingBox
from cstnet.config import FULL, TINY
from cstnet.errors import ContractError, DimensionError
from cstnet.gradcheck import finite_diff_check
from cstnet.head import (CenterHead, HeadOutputs, decode_box, encode_box, fuse_search_outputs,
                         gaussian_heatmap, normalized_cxcywh)
from cstnet.losses import focal_loss, frozen_denominators, total_loss, wiou_boxes, wiou_loss
from cstnet.nn import init_parameters
from cstnet.tensor import Tape, Tensor, precision


def maps(S, cell=(0, 0), offset=(0.5, 0.5), size=(0.25, 0.25), score=None):
    s = np.zeros((1, 1, S, S)) if score is None else score
    if score is None:
        s[0, 0][cell] = 1.0
    off = np.zeros((1, 2, S, S))
    sz = np.zeros((1, 2, S, S))
    off[0, :, cell[0], cell[1]] = offset
    sz[0, :, cell[0], cell[1]] = size
    return HeadOutputs(Tensor(s), Tensor(off), Tensor(sz), Tensor(off))


# -- modality summation ---------------------------------------------------------------

def test_fuse_search_outputs(rng):
    a, b = rng.standard_normal((1, 16, 8)), rng.standard_normal((1, 16, 8))
    assert np.array_equal(fuse_search_outputs(Tensor(a), Tensor(np.zeros_like(a))).data, a)
    assert np.array_equal(fuse_search_outputs(Tensor(a), Tensor(a)).data, 2 * a)
    assert np.array_equal(fuse_search_outputs(Tensor(a), Tensor(b)).data,
                          fuse_search_outputs(Tensor(b), Tensor(a)).data)
    with pytest.raises(DimensionError):
        fuse_search_outputs(Tensor(a), Tensor(np.zeros((1, 9, 8))))


# -- center head ----------------------------------------------------------------------

def test_head_deterministic_and_in_range(rng):
    head = init_parameters(CenterHead(TINY), 0).eval()
    x = Tensor((10 * rng.standard_normal((1, 64, TINY.dim))).astype(np.float32))
    a, b = head(x), head(x)
    for name in ("score", "offset", "size"):
        assert np.array_equal(getattr(a, name).data, getattr(b, name).data)
    assert np.all((a.score.data > 0) & (a.score.data < 1))
    assert np.all((a.size.data > 0) & (a.size.data < 1))
    assert np.all((a.offset.data >= 0) & (a.offset.data < 1))


def test_head_full_config_shapes():
    head = CenterHead(FULL).eval()
    out = head(Tensor(np.zeros((1, 256, 768), np.float32)))
    assert out.score.shape == (1, 1, 16, 16)
    assert out.offset.shape == out.size.shape == (1, 2, 16, 16)


def test_head_channel_schedule():
    head = CenterHead(FULL)
    chans = [l.conv.weight.shape[:2] for l in head.score.layers]
    assert chans == [(256, 768), (128, 256), (64, 128), (32, 64)]
    assert head.score.out.kernel_size == 1
    assert all(l.conv.kernel_size == 3 for l in head.score.layers)


# -- decoding -------------------------------------------------------------------------

def test_decode_hand_example():
    box, conf = decode_box(maps(16), 256)
    assert (box.cx, box.cy, box.w, box.h) == (8.0, 8.0, 64.0, 64.0)
    assert (box.x, box.y) == (-24.0, -24.0) and conf == 1.0


def test_decode_uniform_score_ties_to_first_cell():
    out = maps(16, score=np.full((1, 1, 16, 16), 0.3))
    box, _ = decode_box(out, 256)
    assert (box.cx, box.cy) == (8.0, 8.0)         # cell (0, 0) plus its half-cell offset


@settings(max_examples=50)
@given(st.floats(4, 250), st.floats(4, 250), st.floats(2, 200), st.floats(2, 200))
def test_encode_decode_round_trip(cx, cy, w, h):
    box = BoundingBox.from_center(cx, cy, w, h)
    enc = encode_box(box, 256, 16)
    out = HeadOutputs(Tensor(enc["score"][None]), Tensor(enc["offset"][None]),
                      Tensor(enc["size"][None]), Tensor(enc["offset"][None]))
    got, _ = decode_box(out, 256)
    cell = 256 / 16
    assert abs(got.cx - box.cx) <= cell and abs(got.cy - box.cy) <= cell
    assert abs(got.w - w) < 1e-9 and abs(got.h - h) < 1e-9
    # inside the crop the offset is not clipped and the round trip is exact
    if cx < 256 - 1e-3 and cy < 256 - 1e-3:
        assert abs(got.cx - box.cx) < 1e-6 and abs(got.cy - box.cy) < 1e-6


@given(st.integers(0, 15), st.integers(0, 15), st.integers(-15, 15), st.integers(-15, 15))
def test_decode_translation_consistency(i, j, di, dj):
    if not (0 <= i + di < 16 and 0 <= j + dj < 16):
        return
    a, _ = decode_box(maps(16, (i, j), (0.25, 0.75)), 256)
    b, _ = decode_box(maps(16, (i + di, j + dj), (0.25, 0.75)), 256)
    assert b.cx - a.cx == pytest.approx(dj * 16, abs=1e-9)
    assert b.cy - a.cy == pytest.approx(di * 16, abs=1e-9)


def test_gaussian_heatmap_peaks_at_center():
    heat = gaussian_heatmap(np.array([0.52, 0.3, 0.2, 0.25]), 16)
    assert heat.shape == (1, 16, 16) and heat[0, 4, 8] == 1.0
    assert np.sum(heat == 1.0) == 1 and heat.min() >= 0


# -- focal ----------------------------------------------------------------------------

def test_focal_perfect_prediction():
    gt = np.zeros((1, 1, 8, 8))
    gt[0, 0, 3, 4] = 1
    assert focal_loss(Tensor(gt.copy()), gt).item() < 1e-5


def test_focal_hand_value():
    gt = np.zeros((1, 1, 8, 8))
    gt[0, 0, 2, 2] = 1
    p = np.zeros_like(gt)
    p[0, 0, 2, 2] = 0.5
    val = focal_loss(Tensor(p), gt).item()
    assert val == pytest.approx(0.25 * math.log(2), abs=1e-6)
    assert val == pytest.approx(0.1733, abs=1e-4)


def test_focal_monotone_in_positive_score():
    gt = np.zeros((1, 1, 4, 4))
    gt[0, 0, 1, 1] = 1
    losses = []
    for q in np.linspace(0.1, 0.9, 9):
        p = np.full_like(gt, 0.05)
        p[0, 0, 1, 1] = q
        losses.append(focal_loss(Tensor(p), gt).item())
    assert all(a > b for a, b in zip(losses, losses[1:]))


@pytest.mark.parametrize("seed", range(3))
def test_focal_vs_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    gt = gaussian_heatmap(rng.uniform(0.2, 0.8, 4), 8)[None]
    p = rng.uniform(0, 1, gt.shape)
    assert abs(focal_loss(Tensor(p), gt).item() - oracles.focal(p, gt)) < 1e-9


def test_focal_needs_positive():
    with pytest.raises(ContractError):
        focal_loss(Tensor(np.full((1, 1, 4, 4), 0.5)), np.zeros((1, 1, 4, 4)))


# -- wise-IoU -------------------------------------------------------------------------

def test_wiou_identical_is_zero():
    b = BoundingBox(3, 4, 5, 6)
    assert wiou_boxes(b, b) == 0.0


def test_wiou_hand_value():
    a = BoundingBox.from_center(0, 0, 1, 1)
    b = BoundingBox.from_center(2, 0, 1, 1)
    assert wiou_boxes(a, b) == pytest.approx(math.exp(0.4), abs=1e-12)
    assert math.exp(0.4) == pytest.approx(1.4918, abs=1e-4)


def _box_pairs(seed, n):
    rng = np.random.default_rng(seed)
    a = np.column_stack([rng.uniform(-50, 50, (n, 2)), rng.uniform(0.5, 40, (n, 2))])
    b = np.column_stack([rng.uniform(-50, 50, (n, 2)), rng.uniform(0.5, 40, (n, 2))])
    return a, b


def test_wiou_nonnegative_and_symmetric_on_random_pairs():
    a, b = _box_pairs(0, 1000)
    for ra, rb in zip(a, b):
        ab = wiou_loss(Tensor(ra[None]), rb[None]).item()
        ba = wiou_loss(Tensor(rb[None]), ra[None]).item()
        assert ab >= 0
        assert ab == pytest.approx(ba, rel=1e-12, abs=1e-15)


def test_wiou_vs_scalar_oracle():
    a, b = _box_pairs(1, 200)
    got = [wiou_loss(Tensor(ra[None]), rb[None]).item() for ra, rb in zip(a, b)]
    ref = [oracles.wiou(ra, rb) for ra, rb in zip(a, b)]
    assert np.max(np.abs(np.array(got) - ref)) < 1e-12
    batch = wiou_loss(Tensor(a), b).item()
    assert batch == pytest.approx(np.mean(ref), abs=1e-12)


def test_wiou_denominator_has_no_gradient():
    """The analytic derivative matches differences taken with D held fixed."""
    pred = Tensor(np.array([[0.31, 0.22, 0.43, 0.52], [0.61, 0.48, 0.33, 0.21]]), requires_grad=True)
    gt = np.array([[0.36, 0.27, 0.29, 0.37], [0.45, 0.55, 0.31, 0.26]])
    with frozen_denominators() as replay:
        def f():
            replay.rewind()
            return wiou_loss(pred, gt)
        res = finite_diff_check(f, {"pred": pred}, samples=8, step=1e-6, smooth_only=True)
    assert len(res.checked) >= 6 and res.max_rel_error < 1e-6
    # differences that also move D disagree with the analytic gradient
    free = finite_diff_check(lambda: wiou_loss(pred, gt), {"pred": pred}, samples=8, step=1e-6)
    assert free.max_rel_error > 1e-4


def test_wiou_degenerate_enclosure():
    with pytest.raises(ContractError):
        wiou_loss(Tensor(np.zeros((1, 4))), np.zeros((1, 4)))
    with pytest.raises(ContractError):
        wiou_boxes(BoundingBox(0, 0, 0, 1), BoundingBox(0, 0, 1, 1))


# -- total ----------------------------------------------------------------------------

def _perfect(S=8):
    box = np.array([[0.45, 0.55, 0.05, 0.05]])
    enc = encode_box(BoundingBox.from_center(*(box[0] * 64)), 64, S)
    heat = enc["score"][None]
    out = HeadOutputs(Tensor(heat.copy()), Tensor(enc["offset"][None]),
                      Tensor(enc["size"][None]), Tensor(enc["offset"][None]))
    return out, box, heat


def test_total_perfect_prediction():
    out, box, heat = _perfect()
    assert total_loss(out, box, heat).total < 1e-4


def test_total_zero_lambdas_is_cls():
    out, box, heat = _perfect()
    out.size.data[...] = 0.3
    b = total_loss(out, box, heat, lambda_iou=0, lambda_l1=0)
    assert b.total == b.cls and b.iou > 0 and b.l1 > 0


@pytest.mark.parametrize("seed", range(5))
def test_total_equals_component_sum(seed):
    rng = np.random.default_rng(seed)
    S = 8
    boxes = rng.uniform(0.2, 0.8, (2, 4))
    boxes[:, 2:] *= 0.4
    heat = np.stack([gaussian_heatmap(b, S) for b in boxes])
    out = HeadOutputs(Tensor(rng.uniform(0.01, 0.99, (2, 1, S, S))),
                      Tensor(rng.uniform(0, 0.99, (2, 2, S, S))),
                      Tensor(rng.uniform(0.05, 0.6, (2, 2, S, S))), None)
    out.offset_raw = out.offset
    br = total_loss(out, boxes, heat)
    # independent components: loop focal, scalar WIoU, and a hand L1
    cells = [(int(b[1] * S), int(b[0] * S)) for b in boxes]
    preds = np.array([[(j + out.offset.data[k, 0, i, j]) / S, (i + out.offset.data[k, 1, i, j]) / S,
                       out.size.data[k, 0, i, j], out.size.data[k, 1, i, j]]
                      for k, (i, j) in enumerate(cells)])
    cls = oracles.focal(out.score.data, heat)
    iou = np.mean([oracles.wiou(p, g) for p, g in zip(preds, boxes)])
    l1 = np.mean(np.abs(preds - boxes))
    assert abs(br.cls - cls) < 1e-9 and abs(br.iou - iou) < 1e-9 and abs(br.l1 - l1) < 1e-12
    assert abs(br.total - (br.cls + 2 * br.iou + 5 * br.l1)) < 1e-6
    assert br.csv_row(3).startswith("3,")


def test_head_gradient_matches_central_differences():
    S = TINY.search_grid
    rng = np.random.default_rng(0)
    with precision(np.float64):
        head = init_parameters(CenterHead(TINY).astype(np.float64), 1).train()
        mixed = Tensor(rng.standard_normal((2, S * S, TINY.dim)))
        boxes = rng.uniform(0.3, 0.7, (2, 4))
        boxes[:, 2:] *= 0.3
        heat = np.stack([gaussian_heatmap(b, S) for b in boxes])
        with frozen_denominators() as replay:
            def f():
                replay.rewind()
                return total_loss(head(mixed), boxes, heat).tensor
            res = finite_diff_check(f, dict(head.named_parameters()), samples=40,
                                    smooth_only=True, noise_floor=1e-6)
    assert len(res.checked) == 40
    assert res.max_rel_error < 1e-4
    assert res.max_flat_abs_error < 1e-6


def test_normalized_box():
    b = BoundingBox.from_center(64, 32, 16, 8)
    assert np.array_equal(normalized_cxcywh(b, 128), [0.5, 0.25, 0.125, 0.0625])
