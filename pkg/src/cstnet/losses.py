"""Training objective: weighted focal + wise-IoU (v1) + L1.

Predicted boxes are read at the ground-truth center cell and expressed as
normalized ``(cx, cy, w, h)`` fractions of the search side.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .boxes import BoundingBox
from .errors import ContractError
from .head import HeadOutputs, center_cell
from .tensor import Tensor

FOCAL_ALPHA = 2
FOCAL_BETA = 4
PROB_EPS = 1e-6
LAMBDA_IOU = 2.0
LAMBDA_L1 = 5.0

_local = threading.local()


class DenominatorReplay:
    """Wise-IoU denominators captured on the first evaluation and replayed
    (by call order) on later ones; ``rewind`` before each evaluation."""

    def __init__(self):
        self.values: list = []
        self.cursor = 0

    def rewind(self):
        self.cursor = 0

    def take(self, fresh: np.ndarray) -> np.ndarray:
        if self.cursor == len(self.values):
            self.values.append(fresh)
        out = self.values[self.cursor]
        self.cursor += 1
        return out


@contextmanager
def frozen_denominators():
    """Treat the wise-IoU enclosing-box term as the constant it is during
    differentiation, also for finite differences taken inside the block."""
    prev = getattr(_local, "replay", None)
    _local.replay = DenominatorReplay()
    try:
        yield _local.replay
    finally:
        _local.replay = prev


def focal_loss(pred: Tensor, gt: np.ndarray, alpha: int = FOCAL_ALPHA,
               beta: int = FOCAL_BETA) -> Tensor:
    """Penalty-reduced focal loss over a heatmap, normalized by the positive count."""
    gt = np.asarray(gt)
    if gt.shape != pred.shape:
        raise ContractError(f"heatmap shape {gt.shape} differs from prediction {pred.shape}")
    pos = (gt == 1).astype(pred.dtype)
    n_pos = float(pos.sum())
    if n_pos == 0:
        raise ContractError("focal loss needs at least one positive cell (gt == 1)")
    neg_weight = ((1 - gt) ** beta * (1 - pos)).astype(pred.dtype)
    p = T.clip(pred, PROB_EPS, 1 - PROB_EPS)
    pos_term = T.log(p) * (1 - p) ** alpha * pos
    neg_term = T.log(1 - p) * p ** alpha * neg_weight
    return -(pos_term.sum() + neg_term.sum()) * (1.0 / n_pos)


def _corners(b):
    cx, cy, w, h = b
    return cx - w * 0.5, cy - h * 0.5, cx + w * 0.5, cy + h * 0.5


def wiou_loss(pred: Tensor, gt: np.ndarray) -> Tensor:
    """Wise-IoU v1, averaged over rows of ``(B, 4)`` center-size boxes.

    ``R * (1 - IoU)`` with ``R = exp(center_dist^2 / (W_enc^2 + H_enc^2))``;
    the enclosing-box denominator is a constant under differentiation.
    """
    gt = np.asarray(gt, dtype=pred.dtype)
    gx1, gy1, gx2, gy2 = _corners([gt[:, i] for i in range(4)])
    # enclosing box from values only: no gradient through the denominator
    pd = pred.data
    p_x1, p_y1, p_x2, p_y2 = _corners([pd[:, i] for i in range(4)])
    enc_w = np.maximum(p_x2, gx2) - np.minimum(p_x1, gx1)
    enc_h = np.maximum(p_y2, gy2) - np.minimum(p_y1, gy1)
    denom = enc_w ** 2 + enc_h ** 2
    # non-finite predictions fall through to a non-finite loss (a divergence)
    if np.any(denom <= 0):
        raise ContractError("degenerate enclosing box in wise-IoU")
    replay = getattr(_local, "replay", None)
    if replay is not None:
        denom = replay.take(denom)
    cols = [pred[:, i] for i in range(4)]
    px1, py1, px2, py2 = _corners(cols)
    iw = T.clip(T.minimum(px2, gx2) - T.maximum(px1, gx1), 0.0, None)
    ih = T.clip(T.minimum(py2, gy2) - T.maximum(py1, gy1), 0.0, None)
    inter = iw * ih
    union = cols[2] * cols[3] + gt[:, 2] * gt[:, 3] - inter
    iou = inter / union
    dist2 = (cols[0] - gt[:, 0]) ** 2 + (cols[1] - gt[:, 1]) ** 2
    r = T.exp(dist2 / denom.astype(pred.dtype))
    return (r * (1 - iou)).mean()


def wiou_boxes(a: BoundingBox, b: BoundingBox) -> float:
    """Wise-IoU v1 of two pixel boxes (``a`` predicted, ``b`` ground truth)."""
    a.require_valid()
    b.require_valid()
    pred = Tensor(np.array([[a.cx, a.cy, a.w, a.h]], dtype=np.float64))
    return wiou_loss(pred, np.array([[b.cx, b.cy, b.w, b.h]])).item()


@dataclass
class LossBreakdown:
    total: float
    cls: float
    iou: float
    l1: float
    lambda_iou: float = LAMBDA_IOU
    lambda_l1: float = LAMBDA_L1
    tensor: Tensor | None = field(default=None, repr=False, compare=False)

    def csv_row(self, step: int) -> str:
        return f"{step},{self.total!r},{self.cls!r},{self.iou!r},{self.l1!r}"


def predicted_boxes(outputs: HeadOutputs, gt_boxes: np.ndarray) -> Tensor:
    """``(B, 4)`` normalized predictions read at each ground-truth center cell."""
    S = outputs.grid
    B = gt_boxes.shape[0]
    cells = np.array([center_cell(b[0], b[1], S) for b in gt_boxes])
    rows, cols = cells[:, 0], cells[:, 1]
    batch = np.arange(B)
    off = outputs.offset_raw[batch, :, rows, cols]
    size = outputs.size[batch, :, rows, cols]
    base = np.stack([cols, rows], axis=1).astype(off.dtype)
    centers = (off + base) * (1.0 / S)
    return T.concat([centers, size], axis=-1)


def total_loss(outputs: HeadOutputs, gt_boxes: np.ndarray, heatmaps: np.ndarray,
               lambda_iou: float = LAMBDA_IOU, lambda_l1: float = LAMBDA_L1) -> LossBreakdown:
    """``cls + lambda_iou * iou + lambda_l1 * l1`` over a batch.

    ``gt_boxes`` is ``(B, 4)`` normalized ``(cx, cy, w, h)``; ``heatmaps`` is
    ``(B, 1, S, S)``.
    """
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    cls = focal_loss(outputs.score, heatmaps)
    pred = predicted_boxes(outputs, gt_boxes)
    iou = wiou_loss(pred, gt_boxes)
    l1 = T.absolute(pred - gt_boxes.astype(pred.dtype)).mean()
    total = cls + iou * lambda_iou + l1 * lambda_l1
    return LossBreakdown(total=total.item(), cls=cls.item(), iou=iou.item(), l1=l1.item(),
                         lambda_iou=lambda_iou, lambda_l1=lambda_l1, tensor=total)
