"""Fully convolutional center head, box decoding and target encoding."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from . import tensor as T
from .boxes import BoundingBox
from .config import ModelConfig
from .errors import DimensionError
from .nn import BatchNorm2d, Conv2d, Module
from .tensor import Tensor

# offsets live in [0, 1); the clamp ceiling is the largest float32 below 1
OFFSET_MAX = float(np.nextafter(np.float32(1), np.float32(0)))


def fuse_search_outputs(xr_out: Tensor, xt_out: Tensor) -> Tensor:
    """Mix the final search tokens of both modalities by elementwise sum."""
    if xr_out.shape != xt_out.shape:
        raise DimensionError(f"cannot add search features {xr_out.shape} and {xt_out.shape}")
    return xr_out + xt_out


@dataclass
class HeadOutputs:
    score: Tensor        # (B, 1, S, S), sigmoid
    offset: Tensor       # (B, 2, S, S), clamped to [0, 1)
    size: Tensor         # (B, 2, S, S), sigmoid, fraction of the search side
    offset_raw: Tensor   # unclamped offsets; the regression loss reads these

    @property
    def grid(self) -> int:
        return self.score.shape[-1]


class ConvBnRelu(Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv = Conv2d(cin, cout, 3)
        self.bn = BatchNorm2d(cout)

    def forward(self, x: Tensor) -> Tensor:
        return T.relu(self.bn(self.conv(x)))


class HeadBranch(Module):
    def __init__(self, dim: int, channels: tuple, out_channels: int):
        super().__init__()
        self.layers = []
        cin = dim
        for i, cout in enumerate(channels, start=1):
            layer = ConvBnRelu(cin, cout)
            setattr(self, f"layer{i}", layer)
            self.layers.append(layer)
            cin = cout
        self.out = Conv2d(cin, out_channels, 1)

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return self.out(x)

    def macs(self, side: int) -> int:
        return sum(l.conv.macs(side, side) for l in self.layers) + self.out.macs(side, side)


class CenterHead(Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.grid = cfg.search_grid
        self.score = HeadBranch(cfg.dim, cfg.head_channels, 1)
        self.offset = HeadBranch(cfg.dim, cfg.head_channels, 2)
        self.size = HeadBranch(cfg.dim, cfg.head_channels, 2)

    def forward(self, mixed: Tensor) -> HeadOutputs:
        S = self.grid
        x = F.tokens_to_grid(mixed, S, S)
        offset_raw = self.offset(x)
        return HeadOutputs(
            score=T.sigmoid(self.score(x)),
            offset=T.clip(offset_raw, 0.0, OFFSET_MAX),
            size=T.sigmoid(self.size(x)),
            offset_raw=offset_raw,
        )

    def macs(self) -> int:
        return sum(b.macs(self.grid) for b in (self.score, self.offset, self.size))


def decode_box(h: HeadOutputs, search_side: float, index: int = 0) -> tuple[BoundingBox, float]:
    """Box in search-crop pixels at the highest-scoring cell.

    Ties resolve to the smallest row-major cell index.
    """
    score = h.score.data[index, 0]
    S = score.shape[-1]
    flat = int(np.argmax(score))
    i, j = divmod(flat, S)
    off = h.offset.data[index, :, i, j].astype(np.float64)
    size = h.size.data[index, :, i, j].astype(np.float64)
    cx = (j + off[0]) / S * search_side
    cy = (i + off[1]) / S * search_side
    w, hh = size[0] * search_side, size[1] * search_side
    return BoundingBox.from_center(cx, cy, w, hh), float(score[i, j])


def center_cell(cx_norm: float, cy_norm: float, S: int) -> tuple[int, int]:
    """Grid cell ``(row, col)`` holding a normalized center, clamped to the grid."""
    j = int(np.clip(np.floor(cx_norm * S), 0, S - 1))
    i = int(np.clip(np.floor(cy_norm * S), 0, S - 1))
    return i, j


def normalized_cxcywh(box: BoundingBox, search_side: float) -> np.ndarray:
    return np.array([box.cx, box.cy, box.w, box.h], dtype=np.float64) / search_side


def encode_box(box: BoundingBox, search_side: float, S: int) -> dict:
    """Maps that :func:`decode_box` turns back into ``box``: one-hot score,
    sub-cell offset and normalized size at the center cell."""
    cx, cy, w, h = normalized_cxcywh(box, search_side)
    i, j = center_cell(cx, cy, S)
    score = np.zeros((1, S, S))
    offset = np.zeros((2, S, S))
    size = np.zeros((2, S, S))
    score[0, i, j] = 1
    offset[:, i, j] = (np.clip(cx * S - j, 0, OFFSET_MAX), np.clip(cy * S - i, 0, OFFSET_MAX))
    size[:, i, j] = (w, h)
    return {"score": score, "offset": offset, "size": size, "cell": (i, j)}


def gaussian_radius(height: float, width: float, min_overlap: float = 0.7) -> float:
    """Largest corner displacement keeping IoU >= ``min_overlap`` (CenterNet rule)."""
    a1 = 1
    b1 = height + width
    c1 = width * height * (1 - min_overlap) / (1 + min_overlap)
    r1 = (b1 + np.sqrt(b1 ** 2 - 4 * a1 * c1)) / 2

    a2 = 4
    b2 = 2 * (height + width)
    c2 = (1 - min_overlap) * width * height
    r2 = (b2 + np.sqrt(b2 ** 2 - 4 * a2 * c2)) / 2

    a3 = 4 * min_overlap
    b3 = -2 * min_overlap * (height + width)
    c3 = (min_overlap - 1) * width * height
    r3 = (b3 + np.sqrt(b3 ** 2 - 4 * a3 * c3)) / 2
    return float(min(r1, r2, r3))


def gaussian_heatmap(box_norm: np.ndarray, S: int, min_overlap: float = 0.7) -> np.ndarray:
    """``(1, S, S)`` target with a Gaussian bump peaking at exactly 1 on the center cell."""
    cx, cy, w, h = box_norm
    i, j = center_cell(cx, cy, S)
    radius = max(0, int(gaussian_radius(h * S, w * S, min_overlap)))
    sigma = (2 * radius + 1) / 6
    ys, xs = np.mgrid[0:S, 0:S]
    d2 = (ys - i) ** 2 + (xs - j) ** 2
    heat = np.exp(-d2 / (2 * sigma * sigma))
    heat[(np.abs(ys - i) > radius) | (np.abs(xs - j) > radius)] = 0
    heat[i, j] = 1.0
    return heat[None]
