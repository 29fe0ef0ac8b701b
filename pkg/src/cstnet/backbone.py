"""Shared-weight ViT backbone for the RGB and TIR streams.

Each modality runs the concatenated ``[search; template]`` token sequence
through the same blocks.  Cross-modal fusion layers are slotted in after the
named (1-based) blocks; template and search slices are fused separately and
written back in place.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from . import functional as F
from . import tensor as T
from .config import ModelConfig
from .errors import ConfigurationError, DimensionError, LayoutError
from .nn import LayerNorm, Linear, Mlp, Module, MultiHeadSelfAttention, Parameter
from .tensor import Tensor


@dataclass
class TokenMatrix:
    """``(B, N, C)`` tokens with their grid and stream/region tags."""

    tokens: Tensor
    rows: int
    cols: int
    stream: str = "rgb"
    region: str = "search"

    def __post_init__(self):
        if self.tokens.ndim != 3:
            raise DimensionError(f"token matrix must be (B, N, C), got {self.tokens.shape}")
        if self.rows * self.cols != self.tokens.shape[1]:
            raise LayoutError(
                f"grid {self.rows}x{self.cols} does not hold {self.tokens.shape[1]} tokens")

    @property
    def num_tokens(self) -> int:
        return self.tokens.shape[1]

    @property
    def channels(self) -> int:
        return self.tokens.shape[2]

    def with_tokens(self, tokens: Tensor, stream: str | None = None) -> "TokenMatrix":
        return TokenMatrix(tokens, self.rows, self.cols, stream or self.stream, self.region)

    def grid(self) -> Tensor:
        return F.tokens_to_grid(self.tokens, self.rows, self.cols)


class PatchEmbed(Module):
    """Non-overlapping ``p x p`` patches projected to ``C`` channels (a stride-p conv)."""

    def __init__(self, patch: int, dim: int, in_channels: int = 3):
        super().__init__()
        self.patch = patch
        self.dim = dim
        self.in_channels = in_channels
        self.proj_weight = Parameter((dim, in_channels, patch, patch))
        self.proj_bias = Parameter((dim,), "zeros")

    def forward(self, images) -> Tensor:
        images = T.as_tensor(images, self.proj_weight)
        if images.ndim == 3:
            images = T.reshape(images, (1,) + images.shape)
        B, c, H, W = images.shape
        p = self.patch
        if c != self.in_channels:
            raise DimensionError(f"expected {self.in_channels} image channels, got {c}")
        if H % p or W % p:
            raise ConfigurationError(f"image {H}x{W} not divisible by patch stride {p}")
        gh, gw = H // p, W // p
        patches = T.reshape(images, (B, c, gh, p, gw, p))
        patches = T.reshape(T.transpose(patches, (0, 2, 4, 1, 3, 5)), (B, gh * gw, c * p * p))
        weight = T.reshape(self.proj_weight, (self.dim, c * p * p))
        return F.linear(patches, weight, self.proj_bias)

    def macs(self, tokens: int) -> int:
        return tokens * self.in_channels * self.patch ** 2 * self.dim


class Block(Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float, scale_mode: str = "per-head"):
        super().__init__()
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, heads, scale_mode)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio), dim)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))

    def macs(self, tokens: int) -> int:
        return self.attn.macs(tokens) + self.mlp.macs(tokens)


class ViTBackbone(Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = PatchEmbed(cfg.patch, cfg.dim)
        # one pair of embeddings shared by both modalities
        self.pos_embed_z = Parameter((1, cfg.num_template, cfg.dim))
        self.pos_embed_x = Parameter((1, cfg.num_search, cfg.dim))
        self.blocks = []
        for i in range(1, cfg.depth + 1):
            block = Block(cfg.dim, cfg.heads, cfg.mlp_ratio, cfg.scale_mode)
            setattr(self, f"block{i}", block)
            self.blocks.append(block)
        self.norm = LayerNorm(cfg.dim)

    def embed(self, images, region: str) -> Tensor:
        tokens = self.patch_embed(images)
        return add_positional(tokens, self.pos_embed_z if region == "template" else self.pos_embed_x)


def add_positional(tokens: Tensor, embedding: Tensor) -> Tensor:
    if tokens.shape[1:] != embedding.shape[1:]:
        raise DimensionError(
            f"positional embedding {embedding.shape} does not match tokens {tokens.shape}")
    return tokens + embedding


FusionFn = Callable[[str, TokenMatrix, TokenMatrix], tuple]


def joint_forward(backbone: ViTBackbone, rgb: tuple, tir: tuple,
                  fusion: Mapping[int, FusionFn] | None = None) -> tuple[Tensor, Tensor]:
    """Run both modalities through the shared blocks.

    ``rgb`` and ``tir`` are ``(template_tokens, search_tokens)`` pairs of
    embedded tokens.  ``fusion`` maps a 1-based block index to a callable
    ``f(region, x_rgb, x_tir) -> (x_rgb', x_tir')`` applied after that block to
    the template slices and, separately, the search slices.  Returns the
    final-normed joint ``[search; template]`` tokens of each modality.
    """
    cfg = backbone.cfg
    fusion = dict(fusion or {})
    bad = [i for i in fusion if not 1 <= i <= len(backbone.blocks)]
    if bad:
        raise ConfigurationError(f"fusion insertion index {bad} outside [1, {len(backbone.blocks)}]")
    z_r, x_r = rgb
    z_t, x_t = tir
    if z_r.shape != z_t.shape or x_r.shape != x_t.shape:
        raise DimensionError("RGB and TIR crops must have identical token shapes")
    n_x = x_r.shape[1]
    h_r = T.concat([x_r, z_r], axis=1)
    h_t = T.concat([x_t, z_t], axis=1)
    gz = int(round(np.sqrt(z_r.shape[1])))
    gx = int(round(np.sqrt(n_x)))
    for i, block in enumerate(backbone.blocks, start=1):
        h_r = block(h_r)
        h_t = block(h_t)
        if i in fusion:
            h_r, h_t = _fuse_slices(fusion[i], h_r, h_t, n_x, gx, gz)
    return backbone.norm(h_r), backbone.norm(h_t)


def _fuse_slices(fn: FusionFn, h_r: Tensor, h_t: Tensor, n_x: int, gx: int, gz: int):
    xr, zr = h_r[:, :n_x], h_r[:, n_x:]
    xt, zt = h_t[:, :n_x], h_t[:, n_x:]
    zr2, zt2 = fn("template", TokenMatrix(zr, gz, gz, "rgb", "template"),
                  TokenMatrix(zt, gz, gz, "tir", "template"))
    xr2, xt2 = fn("search", TokenMatrix(xr, gx, gx, "rgb", "search"),
                  TokenMatrix(xt, gx, gx, "tir", "search"))
    return (T.concat([xr2.tokens, zr2.tokens], axis=1),
            T.concat([xt2.tokens, zt2.tokens], axis=1))


def block_attention(attn: MultiHeadSelfAttention, joint: Tensor, n_search: int) -> Tensor:
    """Attention matrix of ``[X; Z]`` assembled from its four region blocks.

    Each block is ``X_q X_k^T``, ``X_q Z_k^T``, ``Z_q X_k^T`` or ``Z_q Z_k^T``
    computed from per-region projections; the assembled logits are then
    softmax-normalized row-wise.  Equals ``attn.attention(joint)``.
    """
    xs, zs = joint[:, :n_search], joint[:, n_search:]
    xq, zq = attn._heads(attn.q(xs)), attn._heads(attn.q(zs))
    xk, zk = attn._heads(attn.k(xs)), attn._heads(attn.k(zs))
    top = T.concat([T.matmul(xq, xk.swap_last()), T.matmul(xq, zk.swap_last())], axis=-1)
    bottom = T.concat([T.matmul(zq, xk.swap_last()), T.matmul(zq, zk.swap_last())], axis=-1)
    logits = T.concat([top, bottom], axis=-2) * attn.scale
    return F.softmax_rows(logits)
