"""Central-difference verification of tape gradients."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping

import numpy as np

from .config import TINY, ModelConfig
from .errors import DeterminismError
from .losses import frozen_denominators
from .model import build_model
from .tensor import Tape, Tensor, precision, same_branches, trace_branches

DEFAULT_STEP = 1e-4
REL_FLOOR = 1e-8
# below this a model-loss difference quotient at step 1e-4 is mostly rounding
MODEL_NOISE_FLOOR = 1e-6

# sub-module strata used to spread samples over the model
STRATA = (
    ("SE", ".jscfm.se."),
    ("LSA", ".jscfm.lsa_agg."),
    ("GIM", "_gim."),
    ("fuse", ".jscfm.fuse."),
    ("LPU", ".sfm.lpu_conv."),
    ("CAM", ".sfm.cam_attn."),
    ("CFN", ".sfm.cfn_net."),
    ("head", "head."),
    ("backbone", "backbone."),
)


def stratum(name: str) -> str:
    for label, marker in STRATA:
        if marker in name:
            return label
    return "other"


CHECKED, KINK, FLAT = "checked", "kink", "flat"


@dataclass
class Sample:
    name: str
    index: tuple
    analytic: float
    numeric: float
    status: str = CHECKED

    @property
    def rel_error(self) -> float:
        return relative_error(self.analytic, self.numeric)

    @property
    def abs_error(self) -> float:
        return abs(self.analytic - self.numeric)


@dataclass
class GradCheckResult:
    """Every drawn coordinate.  Only ``checked`` samples enter the relative
    error; ``kink`` samples straddled a non-differentiable point and ``flat``
    ones sat under the noise floor (see ``finite_diff_check``)."""

    samples: list = field(default_factory=list)
    noise_floor: float = 0.0

    def of(self, status: str) -> list:
        return [s for s in self.samples if s.status == status]

    @property
    def checked(self) -> list:
        return self.of(CHECKED)

    @property
    def max_rel_error(self) -> float:
        return max((s.rel_error for s in self.checked), default=0.0)

    @property
    def max_flat_abs_error(self) -> float:
        return max((s.abs_error for s in self.of(FLAT)), default=0.0)

    def worst(self) -> Sample:
        return max(self.checked, key=lambda s: s.rel_error)

    def coverage(self) -> dict:
        out: dict = {}
        for s in self.checked:
            key = stratum(s.name)
            out[key] = out.get(key, 0) + 1
        return out

    def counts(self) -> dict:
        return {k: len(self.of(k)) for k in (CHECKED, KINK, FLAT)}


def relative_error(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), REL_FLOOR)


def iter_coordinates(params: Mapping[str, Tensor], seed: int = 0,
                     group: Callable[[str], str] = lambda n: n) -> Iterator[tuple[str, tuple]]:
    """Distinct ``(name, index)`` draws, round-robin over groups and then over
    each group's tensors, a random element each time.  Every group is visited
    once per round, so the first ``len(groups)`` draws cover all of them."""
    rng = np.random.default_rng(seed)
    groups: dict[str, list[str]] = {}
    for name in sorted(params):
        groups.setdefault(group(name), []).append(name)
    order = {g: list(rng.permutation(len(names))) for g, names in groups.items()}
    cursor = {g: 0 for g in groups}
    left = {g: sum(params[n].size for n in names) for g, names in groups.items()}
    seen: set = set()
    while any(left.values()):
        for g in sorted(groups):
            if not left[g]:
                continue
            names = groups[g]
            name = names[order[g][cursor[g] % len(names)]]
            cursor[g] += 1
            index = tuple(int(rng.integers(0, n)) for n in params[name].shape)
            if (name, index) in seen:
                continue
            seen.add((name, index))
            left[g] -= 1
            yield name, index


def pick_coordinates(params: Mapping[str, Tensor], samples: int, seed: int = 0,
                     group: Callable[[str], str] = lambda n: n) -> list[tuple[str, tuple]]:
    return list(itertools.islice(iter_coordinates(params, seed, group), samples))


def finite_diff_check(f: Callable[[], Tensor], params: Mapping[str, Tensor], samples: int = 100,
                      step: float = DEFAULT_STEP, seed: int = 0,
                      group: Callable[[str], str] = lambda n: n,
                      smooth_only: bool = False, noise_floor: float = 0.0,
                      max_draws: int | None = None) -> GradCheckResult:
    """Compare tape gradients of the scalar ``f()`` with central differences.

    ``f`` reads the current values of ``params`` (mutated in place here).
    ``result.max_rel_error`` is ``max |a - cd| / max(|a|, |cd|, 1e-8)`` over
    the checked samples.

    Central differences only approximate a derivative where ``f`` is smooth
    on ``[x - h, x + h]``.  With ``smooth_only`` the branch pattern of every
    piecewise op is traced at ``x``, ``x + h`` and ``x - h``; a coordinate
    whose stencil changes any branch is kept as a ``kink`` sample and another
    coordinate is drawn.  With ``noise_floor > 0`` a coordinate where both
    estimates are below the floor is a ``flat`` sample: its difference
    quotient is dominated by rounding in ``f``, so it is judged by absolute
    error instead (``max_flat_abs_error``).  Draws continue until ``samples``
    coordinates are checked or ``max_draws`` is reached.
    """
    if step <= 0:
        raise ValueError("finite-difference step must be positive")
    for p in params.values():
        p.grad = None

    def traced():
        with trace_branches() as trace:
            value = f().item()
        return value, trace

    with Tape() as tape:
        with trace_branches() as base_trace:
            loss = f()
    base = loss.item()
    again, again_trace = traced()
    if (base != again and not (np.isnan(base) and np.isnan(again))) or \
            not same_branches(base_trace, again_trace):
        raise DeterminismError(f"f is not deterministic: {base!r} then {again!r}")
    grads = tape.backward(loss, accumulate=False)
    result = GradCheckResult(noise_floor=noise_floor)
    limit = max_draws if max_draws is not None else (20 * samples if smooth_only or noise_floor
                                                     else samples)
    for draw, (name, index) in enumerate(iter_coordinates(params, seed, group)):
        if len(result.checked) == samples or draw == limit:
            break
        p = params[name]
        g = grads.get(p)
        analytic = 0.0 if g is None else float(g[index])
        orig = p.data[index]
        p.data[index] = orig + step
        up, up_trace = traced()
        p.data[index] = orig - step
        down, down_trace = traced()
        p.data[index] = orig
        numeric = (up - down) / (2 * step)
        status = CHECKED
        if smooth_only and not (same_branches(base_trace, up_trace)
                                and same_branches(base_trace, down_trace)):
            status = KINK
        elif max(abs(analytic), abs(numeric)) < noise_floor:
            status = FLAT
        result.samples.append(Sample(name, index, analytic, numeric, status))
    return result


def check_model(cfg: ModelConfig = TINY, samples: int = 100, seed: int = 0,
                step: float = DEFAULT_STEP, train_mode: bool = True,
                smooth_only: bool = True, noise_floor: float = MODEL_NOISE_FLOOR) -> GradCheckResult:
    """Full-model loss gradient check in 64-bit shadow mode.

    Samples are stratified over fusion sub-modules, the head and the
    backbone, so every sub-module is covered.  The wise-IoU denominator is
    held at its base value, matching its role as a constant in the backward
    pass.
    """
    from .training import forward_loss, make_pairs

    batch, _ = make_pairs(cfg, count=2, seed=seed)
    with precision(np.float64), frozen_denominators() as replay:
        model = build_model(cfg, seed=seed).astype(np.float64)
        model.train(train_mode)
        batch = batch.astype(np.float64)
        params = dict(model.named_parameters())

        def f():
            replay.rewind()
            return forward_loss(model, batch).tensor

        return finite_diff_check(f, params, samples=samples, step=step, seed=seed,
                                 group=stratum, smooth_only=smooth_only,
                                 noise_floor=noise_floor)
