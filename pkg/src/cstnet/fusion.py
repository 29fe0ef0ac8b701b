"""Cross-modal fusion: JSCFM (channel + multi-level spatial) followed by SFM.

Both modules take the aligned RGB and TIR token matrices of a single region
(template or search) and return fused matrices of identical shape.  One
:class:`FusionLayer` is instantiated per insertion point; its template and
search invocations share every weight except the GIM.
"""
from __future__ import annotations

import numpy as np

from . import functional as F
from . import tensor as T
from .backbone import TokenMatrix
from .config import ModelConfig
from .errors import ContractError
from .nn import BatchNorm2d, Conv2d, LayerNorm, Linear, Module
from .tensor import Tensor

REGIONS = ("template", "search")
LSA_KERNELS = (3, 5, 7)
CFN_KERNELS = (1, 3)


def _check_pair(xr: TokenMatrix, xt: TokenMatrix):
    if xr.region != xt.region:
        raise ContractError(f"cannot fuse a {xr.region} matrix with a {xt.region} matrix")
    if xr.tokens.shape != xt.tokens.shape or (xr.rows, xr.cols) != (xt.rows, xt.cols):
        raise ContractError(
            f"RGB/TIR layouts differ: {xr.tokens.shape} on {xr.rows}x{xr.cols} vs "
            f"{xt.tokens.shape} on {xt.rows}x{xt.cols}")


class SEGate(Module):
    """Squeeze-and-excitation gate: pooled tokens -> bottleneck MLP -> sigmoid."""

    def __init__(self, dim: int, ratio: int):
        super().__init__()
        self.fc1 = Linear(dim, dim // ratio)
        self.fc2 = Linear(dim // ratio, dim)

    def forward(self, x: Tensor) -> Tensor:
        pooled = F.adaptive_avg_pool(x)
        gate = T.sigmoid(self.fc2(T.relu(self.fc1(pooled))))
        return gate * x

    def macs(self, tokens: int) -> int:
        return self.fc1.macs(1) + self.fc2.macs(1)


class LSA(Module):
    """Local spatial aggregation: a 1x1 branch plus depthwise 3/5/7 branches."""

    def __init__(self, dim: int):
        super().__init__()
        self.fc_in = Linear(dim, dim)
        self.pw = Conv2d(dim, dim, 1)
        self.pw_bn = BatchNorm2d(dim)
        self.dw = []
        for k in LSA_KERNELS:
            conv, bn = Conv2d(dim, dim, k, groups=dim), BatchNorm2d(dim)
            setattr(self, f"dw{k}", conv)
            setattr(self, f"dw{k}_bn", bn)
            self.dw.append((conv, bn))
        self.mix = Conv2d(dim, dim, 1)
        self.fc_out = Linear(dim, dim)

    def forward(self, x: TokenMatrix) -> Tensor:
        fc = x.with_tokens(self.fc_in(x.tokens)).grid()
        msf = self.pw_bn(self.pw(fc))
        for conv, bn in self.dw:
            msf = msf + bn(conv(fc))
        return self.fc_out(F.grid_to_tokens(T.gelu(self.mix(msf))))

    def macs(self, rows: int, cols: int) -> int:
        n = rows * cols
        convs = self.pw.macs(rows, cols) + self.mix.macs(rows, cols)
        convs += sum(conv.macs(rows, cols) for conv, _ in self.dw)
        return self.fc_in.macs(n) + self.fc_out.macs(n) + convs


class GIM(Module):
    """Global integration: concat -> residual MLP -> split."""

    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.mlp1 = Linear(2 * dim, hidden)
        self.mlp2 = Linear(hidden, 2 * dim)

    def forward(self, xr: Tensor, xt: Tensor) -> tuple[Tensor, Tensor]:
        cat = T.concat([xr, xt], axis=-1)
        cat = cat + self.mlp2(T.gelu(self.mlp1(cat)))
        out_r, out_t = T.split(cat, 2, axis=-1)
        return out_r, out_t

    def macs(self, tokens: int) -> int:
        return self.mlp1.macs(tokens) + self.mlp2.macs(tokens)


class JSCFM(Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        C = cfg.dim
        self.fuse = Linear(2 * C, C)
        self.se = SEGate(C, cfg.se_ratio)
        self.lsa_agg = LSA(C)
        # the GIM is the one part not shared between template and search
        self.template_gim = GIM(C, cfg.gim_hidden)
        self.search_gim = GIM(C, cfg.gim_hidden)

    def fused(self, xr: TokenMatrix, xt: TokenMatrix) -> Tensor:
        return self.fuse(T.concat([xr.tokens, xt.tokens], axis=-1))

    def se_enhance(self, xc: Tensor) -> Tensor:
        return self.se(xc)

    def lsa(self, xc: TokenMatrix) -> Tensor:
        return self.lsa_agg(xc)

    def gim(self, region: str, xr_res: Tensor, xt_res: Tensor) -> tuple[Tensor, Tensor]:
        if region not in REGIONS:
            raise ContractError(f"unknown region {region!r}")
        return (self.template_gim if region == "template" else self.search_gim)(xr_res, xt_res)

    def forward(self, xr: TokenMatrix, xt: TokenMatrix) -> tuple[TokenMatrix, TokenMatrix]:
        _check_pair(xr, xt)
        xc = self.fused(xr, xt)
        added = self.se_enhance(xc) + self.lsa(xr.with_tokens(xc, "joint"))
        out_r, out_t = self.gim(xr.region, xr.tokens + added, xt.tokens + added)
        return xr.with_tokens(out_r), xt.with_tokens(out_t)

    def macs(self, rows: int, cols: int, region: str) -> int:
        n = rows * cols
        gim = self.template_gim if region == "template" else self.search_gim
        return (self.fuse.macs(n) + self.se.macs(n) + self.lsa_agg.macs(rows, cols)
                + gim.macs(n))


class CAM(Module):
    """Cross-attention between modalities with shared expand/output projections."""

    def __init__(self, dim: int, heads: int = 1):
        super().__init__()
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = self.head_dim ** -0.5
        self.expand = Linear(dim, 2 * dim)
        self.q_rgb = Linear(dim, dim)
        self.q_tir = Linear(dim, dim)
        self.kv_rgb = Linear(dim, 2 * dim)
        self.kv_tir = Linear(dim, 2 * dim)
        self.out = Linear(dim, dim)
        self.ln_rgb = LayerNorm(dim)
        self.ln_tir = LayerNorm(dim)

    def _heads(self, x: Tensor) -> Tensor:
        B, N, _ = x.shape
        return T.transpose(T.reshape(x, (B, N, self.heads, self.head_dim)), (0, 2, 1, 3))

    def _merge(self, x: Tensor) -> Tensor:
        B, h, N, d = x.shape
        return T.reshape(T.transpose(x, (0, 2, 1, 3)), (B, N, h * d))

    def project(self, lpu: Tensor, q: Linear, kv: Linear):
        """Return ``(res, q, k, v)`` for one modality."""
        res, attn = T.split(T.relu(self.expand(lpu)), 2, axis=-1)
        k, v = T.split(kv(attn), 2, axis=-1)
        return res, q(attn), k, v

    def attend(self, q: Tensor, k: Tensor, v: Tensor) -> Tensor:
        out, _ = F.scaled_dot_attention(self._heads(q), self._heads(k), self._heads(v), self.scale)
        return self._merge(out)

    def forward(self, xr_cfm: Tensor, xt_cfm: Tensor, lpu_r: Tensor, lpu_t: Tensor):
        res_r, q_r, k_r, v_r = self.project(lpu_r, self.q_rgb, self.kv_rgb)
        res_t, q_t, k_t, v_t = self.project(lpu_t, self.q_tir, self.kv_tir)
        cross_r = self.attend(q_r, k_t, v_t)
        cross_t = self.attend(q_t, k_r, v_r)
        add_r = self.ln_rgb(xr_cfm + self.out(cross_r + res_r))
        add_t = self.ln_tir(xt_cfm + self.out(cross_t + res_t))
        return add_r, add_t

    def macs(self, tokens: int) -> int:
        per_modality = (self.expand.macs(tokens) + self.q_rgb.macs(tokens)
                        + self.kv_rgb.macs(tokens) + self.out.macs(tokens)
                        + 2 * tokens * tokens * self.dim)
        return 2 * per_modality


class CFN(Module):
    """Convolutional feedforward: depthwise 1/3 residual, 1x1 up/down, BN-adjusted skip."""

    def __init__(self, dim: int):
        super().__init__()
        self.dw = []
        for k in CFN_KERNELS:
            conv = Conv2d(dim, dim, k, groups=dim)
            setattr(self, f"dw{k}", conv)
            self.dw.append(conv)
        self.up = Conv2d(dim, 2 * dim, 1)
        self.down = Conv2d(2 * dim, dim, 1)
        self.adj = Conv2d(dim, dim, 1)
        self.res = Conv2d(dim, dim, 1)
        self.bn = BatchNorm2d(dim)

    def local(self, x: Tensor) -> Tensor:
        out = x
        for conv in self.dw:
            out = out + conv(x)
        return out

    def forward(self, x: Tensor) -> Tensor:
        """``x`` is the summed feature as a ``(B, C, H, W)`` grid."""
        local = self.local(x)
        act = local + self.down(T.gelu(self.up(local)))
        return self.bn(self.adj(act) + self.res(act))

    def macs(self, rows: int, cols: int) -> int:
        return sum(m.macs(rows, cols) for m in (*self.dw, self.up, self.down, self.adj, self.res))


class SFM(Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        C = cfg.dim
        self.lpu_conv = Conv2d(C, C, 3, groups=C)
        self.cam_attn = CAM(C, cfg.cam_heads)
        self.cfn_net = CFN(C)

    def lpu(self, x: TokenMatrix) -> Tensor:
        grid = x.grid()
        return F.grid_to_tokens(grid + self.lpu_conv(grid))

    def cam(self, xr_cfm: TokenMatrix, xt_cfm: TokenMatrix) -> tuple[Tensor, Tensor]:
        return self.cam_attn(xr_cfm.tokens, xt_cfm.tokens, self.lpu(xr_cfm), self.lpu(xt_cfm))

    def cfn(self, x_rt_add: TokenMatrix) -> Tensor:
        return F.grid_to_tokens(self.cfn_net(x_rt_add.grid()))

    def forward(self, xr_cfm: TokenMatrix, xt_cfm: TokenMatrix,
                xr_orig: TokenMatrix, xt_orig: TokenMatrix) -> tuple[TokenMatrix, TokenMatrix]:
        _check_pair(xr_cfm, xt_cfm)
        _check_pair(xr_orig, xt_orig)
        if xr_cfm.tokens.shape != xr_orig.tokens.shape or xr_cfm.region != xr_orig.region:
            raise ContractError("SFM originals must come from the same region as its inputs")
        add_r, add_t = self.cam(xr_cfm, xt_cfm)
        adj = self.cfn(xr_cfm.with_tokens(add_r + add_t, "joint"))
        # one shared adjustment field added to both originals
        return xr_orig.with_tokens(adj + xr_orig.tokens), xt_orig.with_tokens(adj + xt_orig.tokens)

    def macs(self, rows: int, cols: int) -> int:
        n = rows * cols
        return 2 * self.lpu_conv.macs(rows, cols) + self.cam_attn.macs(n) + self.cfn_net.macs(rows, cols)


class FusionLayer(Module):
    """JSCFM followed by SFM at one insertion point."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.jscfm = JSCFM(cfg)
        self.sfm = SFM(cfg)

    def forward(self, region: str, xr: TokenMatrix, xt: TokenMatrix):
        if xr.region != region or xt.region != region:
            raise ContractError(f"fusion called for {region} with {xr.region}/{xt.region} inputs")
        cr, ct = self.jscfm(xr, xt)
        return self.sfm(cr, ct, xr, xt)

    def macs(self, rows: int, cols: int, region: str) -> int:
        return self.jscfm.macs(rows, cols, region) + self.sfm.macs(rows, cols)
