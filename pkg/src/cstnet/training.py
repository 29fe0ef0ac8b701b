"""Desk-scale training: AdamW with two rate groups, a train step, gradient-flow
reporting, and the overfit harness on synthetic pairs."""
from __future__ import annotations

import math
import queue
import threading
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Iterator

import numpy as np

from .boxes import iou
from .config import TINY, ModelConfig
from .errors import ConfigurationError, DivergenceError
from .head import gaussian_heatmap, normalized_cxcywh
from .losses import LossBreakdown, total_loss
from .model import FUSION_PREFIX, CSTNet, build_model, parameter_checksum
from .tensor import Tape
from .tracking import SceneSpec, Tracker, synth_sequence


@dataclass(frozen=True)
class TrainConfig:
    lr_backbone: float = 3e-3
    lr_fusion: float = 3e-4
    weight_decay: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    steps: int = 200
    batch_size: int = 4
    seed: int = 7
    lambda_iou: float = 2.0
    lambda_l1: float = 5.0

    def __post_init__(self):
        if self.lr_backbone < 0 or self.lr_fusion < 0:
            raise ConfigurationError("learning rates must be non-negative")
        if self.weight_decay < 0:
            raise ConfigurationError("weight decay must be non-negative")
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigurationError("steps must be >= 0 and batch_size >= 1")

    def key_values(self) -> list[str]:
        return [f"train.{k}={v}" for k, v in asdict(self).items()]


class AdamW:
    """Adam with decoupled weight decay over named parameter groups.

    Per step and parameter: ``p <- p * (1 - lr * wd)`` followed by the
    bias-corrected adaptive-moment update.
    """

    def __init__(self, groups: dict, weight_decay: float = 1e-4,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        # groups: name -> (lr, [params])
        self.groups = {name: (float(lr), list(params)) for name, (lr, params) in groups.items()}
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m: dict[int, np.ndarray] = {}
        self.v: dict[int, np.ndarray] = {}

    def step(self):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for lr, params in self.groups.values():
            for p in params:
                if p.grad is None:
                    continue
                g = p.grad
                key = id(p)
                m = self.m.get(key)
                if m is None:
                    m = self.m[key] = np.zeros_like(p.data)
                    self.v[key] = np.zeros_like(p.data)
                v = self.v[key]
                m *= self.b1
                m += (1 - self.b1) * g
                v *= self.b2
                v += (1 - self.b2) * g * g
                if lr == 0:
                    continue
                p.data *= 1 - lr * self.weight_decay
                p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


def param_groups(model: CSTNet) -> dict:
    """Split into the fusion group and everything else (backbone and head)."""
    fusion, rest = [], []
    for name, p in model.named_parameters():
        (fusion if name.startswith(FUSION_PREFIX) else rest).append(p)
    return {"backbone": rest, "fusion": fusion}


def make_optimizer(model: CSTNet, cfg: TrainConfig) -> AdamW:
    groups = param_groups(model)
    return AdamW({"backbone": (cfg.lr_backbone, groups["backbone"]),
                  "fusion": (cfg.lr_fusion, groups["fusion"])},
                 cfg.weight_decay, cfg.betas, cfg.eps)


@dataclass
class Batch:
    template_rgb: np.ndarray
    template_tir: np.ndarray
    search_rgb: np.ndarray
    search_tir: np.ndarray
    boxes: np.ndarray        # (B, 4) normalized cx, cy, w, h in the search crop
    heatmaps: np.ndarray     # (B, 1, S, S)

    def __len__(self):
        return self.boxes.shape[0]

    def astype(self, dtype) -> "Batch":
        return Batch(*(np.asarray(a, dtype=dtype) for a in
                       (self.template_rgb, self.template_tir, self.search_rgb,
                        self.search_tir)), self.boxes, self.heatmaps.astype(dtype))


def forward_loss(model: CSTNet, batch: Batch, cfg: TrainConfig | None = None) -> LossBreakdown:
    cfg = cfg or TrainConfig()
    outputs = model(batch.template_rgb, batch.template_tir, batch.search_rgb, batch.search_tir)
    return total_loss(outputs, batch.boxes, batch.heatmaps, cfg.lambda_iou, cfg.lambda_l1)


def train_step(model: CSTNet, batch: Batch, optimizer: AdamW, cfg: TrainConfig,
               step: int = 0) -> LossBreakdown:
    """Forward, loss, backward and one optimizer update."""
    model.train()
    model.zero_grad()
    with Tape() as tape:
        loss = forward_loss(model, batch, cfg)
    if not math.isfinite(loss.total):
        raise DivergenceError(step, loss.total)
    tape.backward(loss.tensor)
    optimizer.step()
    return loss


def grad_flow_report(model: CSTNet, batch: Batch | None = None,
                     cfg: TrainConfig | None = None) -> dict:
    """L2 gradient norm per parameter namespace (owning module path).

    With a ``batch`` one forward/backward is run first; otherwise the current
    ``.grad`` slots are read.  Missing gradients count as zero.
    """
    if batch is not None:
        model.zero_grad()
        with Tape() as tape:
            loss = forward_loss(model, batch, cfg)
        tape.backward(loss.tensor)
    sq: dict[str, float] = {}
    for name, p in model.named_parameters():
        ns = name.rsplit(".", 1)[0]
        g = 0.0 if p.grad is None else float(np.sum(np.square(p.grad, dtype=np.float64)))
        sq[ns] = sq.get(ns, 0.0) + g
    return {ns: math.sqrt(v) for ns, v in sq.items()}


def zero_gradient_namespaces(report: dict) -> list[str]:
    return sorted(ns for ns, n in report.items() if n == 0.0)


# ---------------------------------------------------------------------------
# synthetic training pairs


def overfit_scene(cfg: ModelConfig, frames: int = 5) -> SceneSpec:
    """Slow-moving target sized so a factor-4 search crop covers ~4x its side."""
    side = max(cfg.search_side, 64)
    return SceneSpec(frames=frames, height=side + 32, width=side + 32,
                     target_size=(side / 4, side / 5), start=(side / 2 - 4, side / 2),
                     velocity=(2.0, 1.0))


def make_pairs(cfg: ModelConfig, count: int = 4, seed: int = 7,
               spec: SceneSpec | None = None) -> tuple[Batch, list]:
    """``count`` (template, search) pairs from one synthetic sequence.

    The template is frame 0 around its gt box; pair ``k`` searches frame
    ``k`` around the gt box of frame ``k - 1``, exactly what the tracker does
    when it follows the target perfectly.  Also returns the sequence.
    """
    spec = spec or overfit_scene(cfg, count + 1)
    frames = synth_sequence(spec, seed)
    if len(frames) < count + 1:
        raise ConfigurationError(f"need {count + 1} frames for {count} pairs")
    pair0, box0 = frames[0]
    zr, zt, _ = pair0.crops(box0, 2.0, cfg.template_side)
    S = cfg.search_grid
    cols = {k: [] for k in ("zr", "zt", "xr", "xt", "box", "heat")}
    for k in range(1, count + 1):
        pair, gt = frames[k]
        xr, xt, mapping = pair.crops(frames[k - 1][1], 4.0, cfg.search_side)
        norm = normalized_cxcywh(mapping.box_to_patch(gt), cfg.search_side)
        for key, val in (("zr", zr), ("zt", zt), ("xr", xr), ("xt", xt)):
            cols[key].append(val)
        cols["box"].append(norm)
        cols["heat"].append(gaussian_heatmap(norm, S)[None])
    batch = Batch(*(np.concatenate(cols[k]).astype(np.float32) for k in ("zr", "zt", "xr", "xt")),
                  np.stack(cols["box"]), np.concatenate(cols["heat"]).astype(np.float32))
    return batch, frames


@dataclass
class OverfitResult:
    losses: list = field(default_factory=list)
    initial: float = 0.0
    final: float = 0.0
    train_iou: float = 0.0
    checksum: str = ""
    model: CSTNet | None = field(default=None, repr=False)

    @property
    def ratio(self) -> float:
        return self.final / self.initial

    def trailing_means(self, window: int = 20) -> np.ndarray:
        x = np.array([l.total for l in self.losses])
        if len(x) < window:
            return x
        return np.convolve(x, np.ones(window) / window, mode="valid")


def overfit(model_cfg: ModelConfig = TINY, cfg: TrainConfig = TrainConfig(),
            log: Callable[[str], None] | None = None) -> OverfitResult:
    """Train a fresh model on fixed pairs, then track the first training frame."""
    model = build_model(model_cfg, seed=cfg.seed)
    batch, frames = make_pairs(model_cfg, cfg.batch_size, cfg.seed)
    opt = make_optimizer(model, cfg)
    result = OverfitResult(model=model)
    for step in range(cfg.steps):
        loss = train_step(model, batch, opt, cfg, step)
        result.losses.append(loss)
        if log:
            log(loss.csv_row(step))
    model.eval()
    result.initial = result.losses[0].total if result.losses else float("nan")
    result.final = forward_loss(model, batch, cfg).total
    tracker = Tracker(model)
    tracker.track_init(frames[0][0], frames[0][1])
    pred, _ = tracker.track_update(frames[1][0])
    result.train_iou = iou(pred, frames[1][1])
    result.checksum = parameter_checksum(model)
    return result


# ---------------------------------------------------------------------------
# data handoff


class Prefetcher:
    """Generate batches on a worker thread; deliver each once, in order.

    Batches are produced by ``source`` and handed over through a bounded
    queue; the consumer must treat them as immutable.
    """

    _DONE = object()

    def __init__(self, source: Iterable, depth: int = 2):
        self._queue: queue.Queue = queue.Queue(maxsize=depth)
        self._error: BaseException | None = None
        self._thread = threading.Thread(target=self._run, args=(iter(source),), daemon=True)
        self._thread.start()

    def _run(self, it: Iterator):
        try:
            for item in it:
                self._queue.put(item)
        except BaseException as exc:  # surfaced on the consumer side
            self._error = exc
        finally:
            self._queue.put(self._DONE)

    def __iter__(self):
        while True:
            item = self._queue.get()
            if item is self._DONE:
                self._thread.join()
                if self._error is not None:
                    raise self._error
                return
            yield item
