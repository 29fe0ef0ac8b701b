from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in pixels: top-left corner plus extent."""

    x: float
    y: float
    w: float
    h: float

    @classmethod
    def from_center(cls, cx, cy, w, h) -> "BoundingBox":
        return cls(float(cx - w / 2), float(cy - h / 2), float(w), float(h))

    @property
    def cx(self) -> float:
        return self.x + self.w / 2

    @property
    def cy(self) -> float:
        return self.y + self.h / 2

    @property
    def area(self) -> float:
        return self.w * self.h

    def is_valid(self) -> bool:
        return self.w > 0 and self.h > 0 and all(map(math.isfinite, self.as_tuple()))

    def require_valid(self) -> "BoundingBox":
        if not self.is_valid():
            raise ContractError(f"box needs positive finite extents, got {self}")
        return self

    def as_tuple(self) -> tuple:
        return (self.x, self.y, self.w, self.h)

    def as_array(self) -> np.ndarray:
        return np.array(self.as_tuple(), dtype=np.float64)

    def clip(self, width: float, height: float, min_size: float = 1.0) -> "BoundingBox":
        """Clip to ``[0, width] x [0, height]`` keeping at least ``min_size`` extent."""
        x1 = min(max(self.x, 0.0), width - min_size)
        y1 = min(max(self.y, 0.0), height - min_size)
        x2 = min(max(self.x + self.w, x1 + min_size), width)
        y2 = min(max(self.y + self.h, y1 + min_size), height)
        return BoundingBox(x1, y1, x2 - x1, y2 - y1)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union of two boxes; 0 for disjoint boxes.

    Areas come from the same edge coordinates as the intersection, so a box
    compared with itself scores exactly 1.
    """
    return float(iou_arrays(np.array([a.as_tuple()]), np.array([b.as_tuple()]))[0])


def iou_arrays(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Vectorized IoU over ``(n, 4)`` arrays of ``x, y, w, h`` rows."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ax2, ay2 = a[:, 0] + a[:, 2], a[:, 1] + a[:, 3]
    bx2, by2 = b[:, 0] + b[:, 2], b[:, 1] + b[:, 3]
    iw = np.minimum(ax2, bx2) - np.maximum(a[:, 0], b[:, 0])
    ih = np.minimum(ay2, by2) - np.maximum(a[:, 1], b[:, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    union = (ax2 - a[:, 0]) * (ay2 - a[:, 1]) + (bx2 - b[:, 0]) * (by2 - b[:, 1]) - inter
    return inter / union
