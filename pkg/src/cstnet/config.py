"""Model configuration and the named presets (full, small, tiny)."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .errors import ConfigurationError


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "full"  # "full" | "small"
    dim: int = 768
    depth: int = 12
    heads: int = 12
    mlp_ratio: float = 4.0
    patch: int = 16
    template_side: int = 128
    search_side: int = 256
    insertion_layers: tuple = (4, 7, 10)
    se_ratio: int = 4
    # GIM hidden width as a fraction of the 2C concatenated width
    gim_ratio: float = 0.5
    cam_heads: int = 1
    # 3x3 Conv-BN-ReLU widths of every center-head branch, before the 1x1 output conv
    head_channels: tuple = (256, 128, 64, 32)
    scale_mode: str = "per-head"  # backbone attention scaling: "per-head" | "global"

    def __post_init__(self):
        object.__setattr__(self, "insertion_layers", tuple(self.insertion_layers))
        object.__setattr__(self, "head_channels", tuple(self.head_channels))

    @property
    def template_grid(self) -> int:
        return self.template_side // self.patch

    @property
    def search_grid(self) -> int:
        return self.search_side // self.patch

    @property
    def num_template(self) -> int:
        return self.template_grid ** 2

    @property
    def num_search(self) -> int:
        return self.search_grid ** 2

    @property
    def gim_hidden(self) -> int:
        return int(round(self.gim_ratio * 2 * self.dim))

    @property
    def active_insertions(self) -> tuple:
        return () if self.variant == "small" else tuple(sorted(set(self.insertion_layers)))

    def violations(self) -> list[str]:
        problems = []
        if self.variant not in ("full", "small"):
            problems.append(f"variant must be 'full' or 'small', got {self.variant!r}")
        if self.patch < 1 or self.template_side % self.patch or self.search_side % self.patch:
            problems.append(
                f"template_side {self.template_side} and search_side {self.search_side} "
                f"must be divisible by patch {self.patch}")
        if self.depth < 1:
            problems.append("depth must be >= 1")
        if self.heads < 1 or self.dim % self.heads:
            problems.append(f"dim {self.dim} must be divisible by heads {self.heads}")
        if self.cam_heads < 1 or self.dim % self.cam_heads:
            problems.append(f"dim {self.dim} must be divisible by cam_heads {self.cam_heads}")
        if self.se_ratio < 1 or self.dim % self.se_ratio:
            problems.append(f"se_ratio {self.se_ratio} must divide dim {self.dim}")
        if self.variant == "full":
            bad = [i for i in self.insertion_layers if not 1 <= i <= self.depth]
            if bad:
                problems.append(f"insertion layers {bad} outside [1, {self.depth}]")
        if self.gim_hidden < 1:
            problems.append(f"gim_ratio {self.gim_ratio} gives an empty GIM hidden layer")
        if not self.head_channels or min(self.head_channels) < 1:
            problems.append("head_channels must be a non-empty list of positive widths")
        if self.scale_mode not in ("per-head", "global"):
            problems.append(f"scale_mode must be 'per-head' or 'global', got {self.scale_mode!r}")
        return problems

    def validate(self) -> "ModelConfig":
        problems = self.violations()
        if problems:
            raise ConfigurationError("invalid model config: " + "; ".join(problems))
        return self

    def as_small(self) -> "ModelConfig":
        return replace(self, variant="small")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["insertion_layers"] = list(self.insertion_layers)
        d["head_channels"] = list(self.head_channels)
        return d

    def key_values(self) -> list[str]:
        out = []
        for k, v in self.to_dict().items():
            if isinstance(v, list):
                v = ",".join(str(i) for i in v)
            out.append(f"{k}={v}")
        return out


FULL = ModelConfig()
SMALL = FULL.as_small()
TINY = ModelConfig(dim=64, depth=4, heads=4, patch=8, template_side=32, search_side=64,
                   insertion_layers=(2,), head_channels=(32, 16, 8))
TINY_SMALL = TINY.as_small()

PRESETS = {
    "full": FULL,
    "small": SMALL,
    "tiny": TINY,
    "tiny-small": TINY_SMALL,
}


def from_dict(d: dict, base: ModelConfig | None = None) -> ModelConfig:
    """Overlay ``d`` on ``base`` (or on the preset named by ``d['preset']``)."""
    d = dict(d)
    preset = d.pop("preset", None)
    if base is None:
        base = PRESETS[preset] if preset else FULL
    known = {f.name for f in fields(ModelConfig)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
    return replace(base, **d).validate()


def resolve(name_or_path: str) -> ModelConfig:
    """A preset name or a JSON file path."""
    if name_or_path in PRESETS:
        return PRESETS[name_or_path]
    path = Path(name_or_path)
    if not path.is_file():
        raise ConfigurationError(
            f"config {name_or_path!r} is neither a preset ({', '.join(PRESETS)}) nor a file")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config file {path} is not valid JSON: {exc}") from exc
    model = data.get("model", data)
    return from_dict(model)
