"""Parameter and multiply-accumulate accounting.

MACs are counted for matmul, linear and convolution kernels only (the usual
profiler convention); norms, activations and softmax are free.  FLOPs are
reported both as MACs and as ``2 * MACs`` since published trackers use both.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .config import ModelConfig
from .model import FUSION_PREFIX, CSTNet


@dataclass
class CostReport:
    config: str
    params_by_module: dict = field(default_factory=dict)
    total_params: int = 0
    macs_by_module: dict = field(default_factory=dict)
    total_macs: int = 0

    @property
    def total_flops_2mac(self) -> int:
        return 2 * self.total_macs

    def breakdown(self, which: str = "params") -> dict:
        """Totals for the backbone / fusion / head namespaces."""
        source = self.params_by_module if which == "params" else self.macs_by_module
        out = {"backbone": 0, "fusion": 0, "head": 0}
        for name, n in source.items():
            out[name.split(".", 1)[0]] += n
        return out

    def key_values(self) -> list[str]:
        lines = [f"config={self.config}"]
        if self.params_by_module:
            for ns, n in self.breakdown("params").items():
                lines.append(f"params.{ns}={n}")
            lines.append(f"params.total={self.total_params}")
            lines.append(f"params.total_millions={self.total_params / 1e6:.2f}")
        if self.macs_by_module:
            for ns, n in self.breakdown("macs").items():
                lines.append(f"macs.{ns}={n}")
            lines.append(f"flops.convention=MAC macs.total={self.total_macs}")
            lines.append(f"flops.mac_giga={self.total_macs / 1e9:.2f}")
            lines.append(f"flops.2mac_giga={self.total_flops_2mac / 1e9:.2f}")
        return lines

    def text(self) -> str:
        rows = []
        if self.params_by_module:
            rows.append(f"{'module':<48}{'params':>14}")
            for name, n in self.params_by_module.items():
                rows.append(f"{name:<48}{n:>14,}")
            rows.append(f"{'total':<48}{self.total_params:>14,}")
        if self.macs_by_module:
            rows.append(f"{'module':<48}{'MACs':>18}")
            for name, n in self.macs_by_module.items():
                rows.append(f"{name:<48}{n:>18,}")
            rows.append(f"{'total (MAC)':<48}{self.total_macs:>18,}")
            rows.append(f"{'total (2*MAC)':<48}{self.total_flops_2mac:>18,}")
        return "\n".join(rows)


def _group(name: str) -> str:
    parts = name.split(".")
    if parts[0] == "fusion":
        return ".".join(parts[:4])  # fusion.layer4.jscfm.se
    if parts[0] == "backbone":
        return ".".join(parts[:2])
    return ".".join(parts[:2])


def count_params(model: CSTNet) -> CostReport:
    per = {}
    for name, p in model.named_parameters():
        key = _group(name)
        per[key] = per.get(key, 0) + p.size
    return CostReport(config=model.cfg.variant, params_by_module=per,
                      total_params=sum(per.values()))


def fusion_param_count(model: CSTNet) -> int:
    return sum(p.size for n, p in model.named_parameters() if n.startswith(FUSION_PREFIX))


def count_flops(model: CSTNet, cfg: ModelConfig | None = None) -> CostReport:
    """MACs of one tracking forward pass (batch 1, both modalities), from shapes alone."""
    cfg = cfg or model.cfg
    bb = model.backbone
    nz, nx = cfg.num_template, cfg.num_search
    n = nz + nx
    macs = {"backbone.patch_embed": 2 * bb.patch_embed.macs(n)}
    for i, block in enumerate(bb.blocks, start=1):
        macs[f"backbone.block{i}"] = 2 * block.macs(n)
    if model.fusion is not None:
        gz, gx = cfg.template_grid, cfg.search_grid
        for i, layer in model.fusion.layers.items():
            macs[f"fusion.layer{i}.template"] = layer.macs(gz, gz, "template")
            macs[f"fusion.layer{i}.search"] = layer.macs(gx, gx, "search")
    macs["head"] = model.head.macs()
    return CostReport(config=cfg.variant, macs_by_module=macs, total_macs=sum(macs.values()))


def cost_report(model: CSTNet) -> CostReport:
    report = count_params(model)
    flops = count_flops(model)
    report.macs_by_module = flops.macs_by_module
    report.total_macs = flops.total_macs
    return report
