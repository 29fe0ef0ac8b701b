"""Inference loop plus the synthetic RGB-T sequence generator and container.

Frames are float arrays in ``[0, 1]`` laid out ``(channels, H, W)``.  The
thermal plane is single-channel on disk and replicated to three channels in
a :class:`FramePair`.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import map_coordinates

from .boxes import BoundingBox
from .config import ModelConfig
from .errors import ContractError, DimensionError
from .head import decode_box

TEMPLATE_FACTOR = 2.0
SEARCH_FACTOR = 4.0
NORM_MEAN = 0.5
NORM_STD = 0.5

SEQ_MAGIC = b"CSTNSEQ1"
EFFECTS = ("rgb-blackout", "tir-crossover", "occlusion", "illumination-ramp")


@dataclass(frozen=True)
class CropMapping:
    """Affine patch <-> frame transform: ``frame = origin + patch * scale``.

    Coordinates are continuous (pixel ``i`` spans ``[i, i + 1)``).
    """

    x0: float
    y0: float
    scale: float

    def to_frame(self, u, v):
        return self.x0 + np.asarray(u) * self.scale, self.y0 + np.asarray(v) * self.scale

    def to_patch(self, x, y):
        return (np.asarray(x) - self.x0) / self.scale, (np.asarray(y) - self.y0) / self.scale

    def box_to_frame(self, box: BoundingBox) -> BoundingBox:
        x, y = self.to_frame(box.x, box.y)
        return BoundingBox(float(x), float(y), box.w * self.scale, box.h * self.scale)

    def box_to_patch(self, box: BoundingBox) -> BoundingBox:
        u, v = self.to_patch(box.x, box.y)
        return BoundingBox(float(u), float(v), box.w / self.scale, box.h / self.scale)


def crop_resize(frame: np.ndarray, box: BoundingBox, area_factor: float,
                out_side: int) -> tuple[np.ndarray, CropMapping]:
    """Square crop of side ``area_factor * sqrt(w * h)`` centered on ``box``.

    Pixels outside the frame take the per-channel frame mean; the region is
    bilinearly resampled to ``out_side x out_side``.
    """
    if area_factor <= 0:
        raise ContractError(f"area factor must be positive, got {area_factor}")
    if not (box.w > 0 and box.h > 0):
        raise ContractError(f"cannot crop around a zero-area box {box}")
    frame = np.asarray(frame)
    if frame.ndim == 2:
        frame = frame[None]
    side = area_factor * np.sqrt(box.w * box.h)
    scale = side / out_side
    mapping = CropMapping(box.cx - side / 2, box.cy - side / 2, scale)
    # frame index coordinates of patch pixel centers
    centers = np.arange(out_side) + 0.5
    xs, ys = mapping.to_frame(centers, centers)
    xs, ys = xs - 0.5, ys - 0.5
    grid_y, grid_x = np.meshgrid(ys, xs, indexing="ij")
    means = frame.mean(axis=(1, 2))
    patch = np.empty((frame.shape[0], out_side, out_side), dtype=frame.dtype)
    for c in range(frame.shape[0]):
        # interpolate the mean-removed frame with zero outside, so a fully
        # padded pixel is the channel mean exactly
        centered = frame[c] - means[c]
        vals = map_coordinates(centered, [grid_y, grid_x], order=1, mode="grid-constant", cval=0.0)
        patch[c] = vals + means[c]
    return patch, mapping


def normalize(patch: np.ndarray) -> np.ndarray:
    return (patch - NORM_MEAN) / NORM_STD


@dataclass
class FramePair:
    """Registered RGB and thermal frames, both ``(3, H, W)``."""

    rgb: np.ndarray
    tir: np.ndarray

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=np.float32)
        tir = np.asarray(self.tir, dtype=np.float32)
        if tir.ndim == 2:
            tir = tir[None]
        if tir.shape[0] == 1:
            tir = np.repeat(tir, 3, axis=0)
        self.tir = tir
        if self.rgb.ndim != 3 or self.rgb.shape[0] != 3:
            raise DimensionError(f"RGB frame must be (3, H, W), got {self.rgb.shape}")
        if self.rgb.shape != self.tir.shape:
            raise DimensionError(
                f"RGB {self.rgb.shape} and TIR {self.tir.shape} frames are not registered")

    @property
    def height(self) -> int:
        return self.rgb.shape[1]

    @property
    def width(self) -> int:
        return self.rgb.shape[2]

    def crops(self, box: BoundingBox, factor: float, side: int):
        """Normalized ``(1, 3, side, side)`` crops of both modalities plus the mapping."""
        r, mapping = crop_resize(self.rgb, box, factor, side)
        t, _ = crop_resize(self.tir, box, factor, side)
        return normalize(r)[None], normalize(t)[None], mapping


@dataclass
class TrackerState:
    box: BoundingBox
    template: tuple            # embedded (rgb, tir) template tokens
    config: ModelConfig
    frame_index: int = 0
    confidence: float = 1.0


class Tracker:
    """Template-initialized tracker without online template update.

    The model only needs ``cfg``, ``embed_template(rgb, tir)`` and
    ``forward_from_template(z, rgb, tir)``.
    """

    def __init__(self, model, template_factor: float = TEMPLATE_FACTOR,
                 search_factor: float = SEARCH_FACTOR):
        self.model = model
        self.cfg = model.cfg
        self.template_factor = template_factor
        self.search_factor = search_factor
        self.state: TrackerState | None = None

    def track_init(self, pair: FramePair, box: BoundingBox) -> TrackerState:
        box.require_valid()
        rgb, tir, _ = pair.crops(box, self.template_factor, self.cfg.template_side)
        z = self.model.embed_template(rgb, tir)
        self.state = TrackerState(box.clip(pair.width, pair.height), z, self.cfg, 0)
        return self.state

    def track_update(self, pair: FramePair,
                     state: TrackerState | None = None) -> tuple[BoundingBox, float]:
        state = state or self.state
        if state is None:
            raise ContractError("track_update called before track_init")
        side = self.cfg.search_side
        rgb, tir, mapping = pair.crops(state.box, self.search_factor, side)
        outputs = self.model.forward_from_template(state.template, rgb, tir)
        box_patch, conf = decode_box(outputs, side)
        box = mapping.box_to_frame(box_patch).clip(pair.width, pair.height)
        state.box = box
        state.confidence = conf
        state.frame_index += 1
        return box, conf

    def run(self, frames: list, init_box: BoundingBox) -> list[BoundingBox]:
        """Boxes for every frame; the first is the initialization box itself."""
        self.track_init(frames[0], init_box)
        boxes = [init_box]
        for pair in frames[1:]:
            boxes.append(self.track_update(pair)[0])
        return boxes


# ---------------------------------------------------------------------------
# synthetic sequences


@dataclass
class SceneSpec:
    """Linear target motion over a textured background.

    ``trajectory`` (optional) lists explicit top-left corners per frame and
    overrides ``start`` and ``velocity``.  ``effects`` maps a frame index to
    effect names from :data:`EFFECTS`.
    """

    frames: int = 8
    height: int = 96
    width: int = 96
    target_size: tuple = (20.0, 16.0)
    start: tuple = (30.0, 36.0)
    velocity: tuple = (2.0, 1.0)
    trajectory: list | None = None
    effects: dict = field(default_factory=dict)
    tir_background: float = 0.25
    tir_contrast: float = 0.5
    tir_noise: float = 0.02
    occluder_value: float = 0.5
    ramp_floor: float = 0.3

    def boxes(self) -> list[BoundingBox]:
        w, h = self.target_size
        if self.trajectory is not None:
            if len(self.trajectory) != self.frames:
                raise ContractError(
                    f"trajectory has {len(self.trajectory)} points for {self.frames} frames")
            corners = [tuple(map(float, p)) for p in self.trajectory]
        else:
            corners = [(self.start[0] + k * self.velocity[0], self.start[1] + k * self.velocity[1])
                       for k in range(self.frames)]
        return [BoundingBox(x, y, float(w), float(h)) for x, y in corners]

    def validate(self):
        if self.frames < 1:
            raise ContractError("a sequence needs at least one frame")
        for k, b in enumerate(self.boxes()):
            b.require_valid()
            if b.x < 0 or b.y < 0 or b.x + b.w > self.width or b.y + b.h > self.height:
                raise ContractError(f"target leaves the frame at frame {k}: {b}")
        for k, names in self.effects.items():
            if not 0 <= int(k) < self.frames:
                raise ContractError(f"effect frame {k} outside [0, {self.frames})")
            unknown = set(names) - set(EFFECTS)
            if unknown:
                raise ContractError(f"unknown effects {sorted(unknown)}; choose from {EFFECTS}")
        return self


def box_mask(box: BoundingBox, height: int, width: int) -> np.ndarray:
    """Pixels whose centers fall inside ``box``."""
    ys = np.arange(height) + 0.5
    xs = np.arange(width) + 0.5
    inside_y = (ys >= box.y) & (ys < box.y + box.h)
    inside_x = (xs >= box.x) & (xs < box.x + box.w)
    return inside_y[:, None] & inside_x[None, :]


def _smooth_texture(rng: np.random.Generator, shape, cell: int) -> np.ndarray:
    """Blocky value noise: random values on a coarse lattice, upsampled."""
    c, h, w = shape
    coarse = rng.random((c, h // cell + 2, w // cell + 2))
    up = np.repeat(np.repeat(coarse, cell, axis=1), cell, axis=2)
    return up[:, :h, :w]


def synth_sequence(spec: SceneSpec, seed: int = 0) -> list[tuple[FramePair, BoundingBox]]:
    spec.validate()
    rng = np.random.default_rng(seed)
    H, W = spec.height, spec.width
    background = 0.15 + 0.35 * _smooth_texture(rng, (3, H, W), 6)
    tw, th = (int(np.ceil(s)) + 2 for s in spec.target_size)
    target_tex = 0.55 + 0.45 * _smooth_texture(rng, (3, th, tw), 3)
    target_tex[0] = np.clip(target_tex[0] + 0.2, 0, 1)  # reddish target
    tir_noise = spec.tir_noise * rng.standard_normal((spec.frames, H, W))
    ramp = np.linspace(1.0, spec.ramp_floor, W)

    out = []
    for k, box in enumerate(spec.boxes()):
        effects = set(spec.effects.get(k, ()))
        mask = box_mask(box, H, W)
        rows, cols = np.nonzero(mask)
        rgb = background.copy()
        if rows.size:
            # texture coordinates relative to the box, so the pattern moves with it
            tr = np.clip((rows + 0.5 - box.y).astype(int), 0, th - 1)
            tc = np.clip((cols + 0.5 - box.x).astype(int), 0, tw - 1)
            rgb[:, rows, cols] = target_tex[:, tr, tc]
        tir = np.full((H, W), spec.tir_background) + tir_noise[k]
        if "tir-crossover" not in effects:
            tir[mask] += spec.tir_contrast
        if "occlusion" in effects:
            strip = box_mask(BoundingBox(box.cx - box.w / 4, 0.0, box.w / 2, float(H)), H, W)
            rgb[:, strip] = spec.occluder_value
            tir[strip] = spec.tir_background
        if "illumination-ramp" in effects:
            rgb = rgb * ramp[None, None, :]
        if "rgb-blackout" in effects:
            rgb = np.zeros_like(rgb)
        out.append((FramePair(np.clip(rgb, 0, 1), np.clip(tir, 0, 1)[None]), box))
    return out


def default_scene(frames: int = 8, size: int = 96) -> SceneSpec:
    return SceneSpec(frames=frames, height=size, width=size)


# ---------------------------------------------------------------------------
# sequence container


def write_sequence(path, frames: list[tuple[FramePair, BoundingBox]]) -> tuple[Path, Path]:
    """Binary container plus ``<path>.gt.txt`` sidecar; returns both paths."""
    path = Path(path)
    if not frames:
        raise ContractError("cannot write an empty sequence")
    H, W = frames[0][0].height, frames[0][0].width
    parts = [SEQ_MAGIC, struct.pack("<III", len(frames), H, W)]
    for pair, box in frames:
        if (pair.height, pair.width) != (H, W):
            raise DimensionError("all frames of a sequence must share one size")
        parts.append(np.ascontiguousarray(pair.rgb, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(pair.tir[0], dtype="<f4").tobytes())
        parts.append(np.asarray(box.as_tuple(), dtype="<f4").tobytes())
    path.write_bytes(b"".join(parts))
    sidecar = sidecar_path(path)
    write_boxes(sidecar, [box for _, box in frames])
    return path, sidecar


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".gt.txt")


def read_sequence(path) -> list[tuple[FramePair, BoundingBox]]:
    path = Path(path)
    if not path.is_file():
        raise ContractError(f"sequence file {path} does not exist")
    blob = path.read_bytes()
    head = len(SEQ_MAGIC) + 12
    if len(blob) < head or blob[:len(SEQ_MAGIC)] != SEQ_MAGIC:
        raise ContractError(f"{path} is not a sequence container")
    n, H, W = struct.unpack_from("<III", blob, len(SEQ_MAGIC))
    per_frame = 4 * (3 * H * W + H * W + 4)
    if len(blob) != head + n * per_frame:
        raise ContractError(f"{path}: expected {head + n * per_frame} bytes, found {len(blob)}")
    data = np.frombuffer(blob, dtype="<f4", offset=head).reshape(n, -1)
    frames = []
    for row in data:
        rgb = row[:3 * H * W].reshape(3, H, W)
        tir = row[3 * H * W:4 * H * W].reshape(1, H, W)
        box = BoundingBox(*map(float, row[4 * H * W:]))
        frames.append((FramePair(rgb.copy(), tir.copy()), box))
    return frames


def write_boxes(path, boxes) -> Path:
    """One ``x,y,w,h`` line per frame."""
    path = Path(path)
    lines = [",".join(repr(float(v)) for v in b.as_tuple()) for b in boxes]
    path.write_text("\n".join(lines) + "\n")
    return path

