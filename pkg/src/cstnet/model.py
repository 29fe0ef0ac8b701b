"""CSTNet and CSTNet-small model assembly."""
from __future__ import annotations

import hashlib

import numpy as np

from .backbone import ViTBackbone, joint_forward
from .config import ModelConfig
from .fusion import FusionLayer
from .head import CenterHead, HeadOutputs, fuse_search_outputs
from .nn import Module, init_parameters
from .tensor import Tensor

FUSION_PREFIX = "fusion."


class FusionStack(Module):
    """One independent :class:`FusionLayer` per insertion point, named ``layer{i}``."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.layers = {}
        for i in cfg.active_insertions:
            layer = FusionLayer(cfg)
            setattr(self, f"layer{i}", layer)
            self.layers[i] = layer


class CSTNet(Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg.validate()
        self.backbone = ViTBackbone(cfg)
        if cfg.variant == "full":
            self.fusion = FusionStack(cfg)
        else:
            self.fusion = None
        self.head = CenterHead(cfg)

    @property
    def variant(self) -> str:
        return self.cfg.variant

    def fusion_fns(self, insertions=None) -> dict:
        if self.fusion is None:
            return {}
        layers = self.fusion.layers
        if insertions is not None:
            layers = {i: layers[i] for i in insertions}
        return dict(layers)

    def embed_template(self, rgb, tir) -> tuple[Tensor, Tensor]:
        return self.backbone.embed(rgb, "template"), self.backbone.embed(tir, "template")

    def embed_search(self, rgb, tir) -> tuple[Tensor, Tensor]:
        return self.backbone.embed(rgb, "search"), self.backbone.embed(tir, "search")

    def forward_tokens(self, z: tuple, x: tuple, insertions=None) -> tuple[Tensor, Tensor]:
        """Embedded ``(rgb, tir)`` template and search tokens -> final joint tokens."""
        return joint_forward(self.backbone, (z[0], x[0]), (z[1], x[1]),
                             self.fusion_fns(insertions))

    def head_forward(self, h_r: Tensor, h_t: Tensor) -> HeadOutputs:
        n_x = self.cfg.num_search
        return self.head(fuse_search_outputs(h_r[:, :n_x], h_t[:, :n_x]))

    def forward_from_template(self, z: tuple, search_rgb, search_tir,
                              insertions=None) -> HeadOutputs:
        x = self.embed_search(search_rgb, search_tir)
        return self.head_forward(*self.forward_tokens(z, x, insertions))

    def forward(self, template_rgb, template_tir, search_rgb, search_tir,
                insertions=None) -> HeadOutputs:
        """Images are ``(B, 3, H, W)`` arrays, already normalized.

        ``insertions`` restricts which fusion layers run (``()`` runs none).
        """
        z = self.embed_template(template_rgb, template_tir)
        return self.forward_from_template(z, search_rgb, search_tir, insertions)

    def fusion_parameter_names(self) -> list[str]:
        return [n for n, _ in self.named_parameters() if n.startswith(FUSION_PREFIX)]


def build_model(cfg: ModelConfig, seed: int = 0, initialize: bool = True) -> CSTNet:
    """Construct a model; parameters are filled deterministically from ``seed``.

    ``initialize=False`` leaves lazily allocated zero storage, enough for
    parameter accounting of full-size models.
    """
    model = CSTNet(cfg)
    if initialize:
        init_parameters(model, seed)
    return model.eval()


def parameter_checksum(model: Module) -> str:
    """SHA-256 over sorted parameter and buffer bytes."""
    h = hashlib.sha256()
    for name, arr in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()
