"""Precision, normalized precision and success metrics over box records."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .boxes import BoundingBox, iou, iou_arrays
from .errors import ContractError

__all__ = ["iou", "MetricCurve", "TrackRecord", "precision_curve",
           "normalized_precision_curve", "success_curve", "evaluate", "read_boxes"]

PR_THRESHOLDS = np.arange(51, dtype=np.float64)                  # 0..50 px
NPR_THRESHOLDS = np.array([i / 100 for i in range(51)])          # 0..0.5
SR_THRESHOLDS = np.array([i / 20 for i in range(21)])            # 0..1
PR_SUMMARY_PX = 20.0
NPR_LIMIT = 0.5


@dataclass
class MetricCurve:
    name: str
    thresholds: np.ndarray
    values: np.ndarray
    summary: float
    summary_rule: str

    def dump(self) -> str:
        """``tau,value`` lines."""
        return "".join(f"{t!r},{v!r}\n" for t, v in zip(self.thresholds.tolist(),
                                                        self.values.tolist()))


@dataclass
class TrackRecord:
    boxes: list
    sequence_id: str = "seq"

    def __len__(self):
        return len(self.boxes)

    def array(self) -> np.ndarray:
        return _as_array(self.boxes)


def _as_array(boxes) -> np.ndarray:
    if isinstance(boxes, TrackRecord):
        boxes = boxes.boxes
    if isinstance(boxes, np.ndarray):
        arr = boxes.astype(np.float64)
    else:
        arr = np.array([b.as_tuple() if isinstance(b, BoundingBox) else tuple(b) for b in boxes],
                       dtype=np.float64)
    return arr.reshape(-1, 4)


def _aligned(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p, g = _as_array(pred), _as_array(gt)
    if len(p) != len(g):
        raise ContractError(f"prediction has {len(p)} frames but ground truth has {len(g)}")
    if len(g) == 0:
        raise ContractError("cannot evaluate an empty record")
    return p, g


def _centers(b: np.ndarray) -> np.ndarray:
    return b[:, :2] + b[:, 2:] / 2


def center_errors(pred, gt) -> np.ndarray:
    p, g = _aligned(pred, gt)
    return np.hypot(*(_centers(p) - _centers(g)).T)


def normalized_center_errors(pred, gt) -> np.ndarray:
    p, g = _aligned(pred, gt)
    if np.any(g[:, 2:] <= 0):
        raise ContractError("normalized precision needs gt boxes with positive extents")
    d = (_centers(p) - _centers(g)) / g[:, 2:]
    return np.hypot(*d.T)


def _check_monotone(values: np.ndarray, increasing: bool, name: str):
    diffs = np.diff(values)
    if (increasing and np.any(diffs < 0)) or (not increasing and np.any(diffs > 0)):
        raise AssertionError(f"{name} curve is not monotone")


def precision_curve(pred, gt, thresholds=PR_THRESHOLDS, at: float = PR_SUMMARY_PX) -> MetricCurve:
    """Fraction of frames with center error <= tau; summary at ``at`` pixels."""
    err = center_errors(pred, gt)
    thresholds = np.asarray(thresholds, dtype=np.float64)
    values = (err[None, :] <= thresholds[:, None]).mean(axis=1)
    _check_monotone(values, True, "precision")
    summary = float((err <= at).mean())
    return MetricCurve("PR", thresholds, values, summary, f"value@{at:g}px")


def normalized_precision_curve(pred, gt, thresholds=NPR_THRESHOLDS,
                               limit: float = NPR_LIMIT) -> MetricCurve:
    """Size-normalized precision; summary is the area under the exact step
    curve on ``[0, limit]`` divided by ``limit``.

    Per frame the step curve contributes ``max(0, limit - e) / limit``, so the
    summary is a closed-form mean rather than a grid quadrature.
    """
    err = normalized_center_errors(pred, gt)
    thresholds = np.asarray(thresholds, dtype=np.float64)
    values = (err[None, :] <= thresholds[:, None]).mean(axis=1)
    _check_monotone(values, True, "normalized precision")
    summary = float(np.mean(np.clip(limit - err, 0.0, None)) / limit)
    return MetricCurve("NPR", thresholds, values, summary, f"auc[0,{limit:g}]")


def success_curve(pred, gt, thresholds=SR_THRESHOLDS, strict: bool = False) -> MetricCurve:
    """Fraction of frames with IoU >= tau (``> tau`` when ``strict``); summary
    is the mean over the thresholds."""
    p, g = _aligned(pred, gt)
    overlaps = iou_arrays(p, g)
    thresholds = np.asarray(thresholds, dtype=np.float64)
    cmp = np.greater if strict else np.greater_equal
    values = cmp(overlaps[None, :], thresholds[:, None]).mean(axis=1)
    _check_monotone(values, False, "success")
    return MetricCurve("SR", thresholds, values, float(values.mean()),
                       "mean@21" + (">" if strict else ">="))


def evaluate(pred, gt) -> dict:
    return {
        "PR": precision_curve(pred, gt),
        "NPR": normalized_precision_curve(pred, gt),
        "SR": success_curve(pred, gt),
    }


def report_lines(curves: dict, frames: int) -> list[str]:
    lines = [f"frames={frames}"]
    for name, curve in curves.items():
        lines.append(f"{name}={curve.summary!r}")
        lines.append(f"{name}.rule={curve.summary_rule}")
    return lines


def read_boxes(path) -> list[BoundingBox]:
    """Parse ``x,y,w,h`` lines (blank lines ignored)."""
    path = Path(path)
    if not path.is_file():
        raise ContractError(f"box file {path} does not exist")
    boxes = []
    for n, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split(",")
        if len(fields) != 4:
            raise ContractError(f"{path}:{n}: expected 4 comma-separated values")
        try:
            boxes.append(BoundingBox(*(float(f) for f in fields)))
        except ValueError as exc:
            raise ContractError(f"{path}:{n}: {exc}") from exc
    return boxes
