"""Convolution, normalization and attention kernels built on the tape ops."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as T
from .errors import DimensionError, LayoutError, NumericDomainError, UnsupportedKernelError
from .tensor import Tensor, record

LN_EPS = 1e-6
BN_EPS = 1e-5


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           groups: int = 1, padding: int | None = None) -> Tensor:
    """2-D cross-correlation, stride 1.

    ``x`` is ``(B, C_in, H, W)`` or ``(C_in, H, W)``; ``weight`` is
    ``(C_out, C_in // groups, k, k)``.  ``padding`` defaults to ``(k - 1) // 2``
    which keeps the spatial grid unchanged.  ``groups == C_in`` is a depthwise
    convolution.
    """
    squeeze = x.ndim == 3
    if squeeze:
        x = T.reshape(x, (1,) + x.shape)
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    B, cin, H, W = x.shape
    cout, cin_g, k, k2 = weight.shape
    if k != k2 or k % 2 == 0:
        raise UnsupportedKernelError(f"only odd square kernels are supported, got {k}x{k2}")
    if cin % groups or cout % groups or cin // groups != cin_g:
        raise DimensionError(
            f"channel/group mismatch: input {x.shape}, weight {weight.shape}, groups={groups}")
    pad = (k - 1) // 2 if padding is None else padding
    Ho, Wo = H + 2 * pad - k + 1, W + 2 * pad - k + 1
    if Ho < 1 or Wo < 1:
        raise DimensionError(f"kernel {k} with padding {pad} does not fit a {H}x{W} grid")
    cout_g = cout // groups
    T._count_macs(B * cout * cin_g * k * k * Ho * Wo)

    xd = x.data
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # B, cin, Ho, Wo, k, k
    win_g = win.reshape(B, groups, cin_g, Ho, Wo, k, k)
    w_g = weight.data.reshape(groups, cout_g, cin_g, k, k)
    out = np.einsum("bgchwij,gocij->bgohw", win_g, w_g, optimize=True)
    out = out.reshape(B, cout, Ho, Wo)
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1)

    def back(g):
        g_g = g.reshape(B, groups, cout_g, Ho, Wo)
        dw = np.einsum("bgohw,bgchwij->gocij", g_g, win_g, optimize=True).reshape(weight.shape)
        dxp = np.zeros(xp.shape, dtype=xd.dtype)
        for i in range(k):
            for j in range(k):
                contrib = np.einsum("bgohw,goc->bgchw", g_g, w_g[..., i, j], optimize=True)
                dxp[:, :, i:i + Ho, j:j + Wo] += contrib.reshape(B, cin, Ho, Wo)
        dx = dxp[:, :, pad:pad + H, pad:pad + W] if pad else dxp
        db = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return (dx, dw, db) if bias is not None else (dx, dw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    out = record(out, inputs, back)
    if squeeze:
        out = T.reshape(out, out.shape[1:])
    return out


def softmax_rows(x: Tensor) -> Tensor:
    """Row softmax with max subtraction; rejects NaN input."""
    if np.isnan(x.data).any():
        raise NumericDomainError("softmax input contains NaN")
    return T.softmax(x, axis=-1)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(
            f"linear expects {weight.shape[1]} input channels, got input shape {x.shape}")
    out = T.matmul(x, weight.swap_last())
    if bias is not None:
        out = out + bias
    return out


def layer_norm(x: Tensor, scale: Tensor, shift: Tensor, eps: float = LN_EPS) -> Tensor:
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / T.sqrt(var + eps) * scale + shift


def batch_norm(x: Tensor, scale: Tensor, shift: Tensor, mean: np.ndarray, var: np.ndarray,
               eps: float = BN_EPS) -> Tensor:
    """Per-channel affine normalization of ``(B, C, H, W)`` with given statistics."""
    shape = (1, -1, 1, 1)
    inv = 1.0 / np.sqrt(var + eps)
    normed = (x - mean.reshape(shape).astype(x.dtype)) * inv.reshape(shape).astype(x.dtype)
    return normed * T.reshape(scale, shape) + T.reshape(shift, shape)


def batch_norm_train(x: Tensor, scale: Tensor, shift: Tensor, eps: float = BN_EPS):
    """Normalize with batch statistics; returns output and (mean, biased var)."""
    shape = (1, -1, 1, 1)
    mu = x.mean(axis=(0, 2, 3), keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=(0, 2, 3), keepdims=True)
    out = centered / T.sqrt(var + eps) * T.reshape(scale, shape) + T.reshape(shift, shape)
    return out, mu.data.reshape(-1), var.data.reshape(-1)


def adaptive_avg_pool(x: Tensor) -> Tensor:
    """Per-channel mean over the token axis: ``(..., N, C) -> (..., 1, C)``."""
    return x.mean(axis=-2, keepdims=True)


def activation(kind: str, x: Tensor) -> Tensor:
    if kind == "gelu":
        return T.gelu(x)
    if kind == "relu":
        return T.relu(x)
    if kind == "sigmoid":
        return T.sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def tokens_to_grid(x: Tensor, rows: int, cols: int) -> Tensor:
    """``(B, N, C)`` row-major tokens to a ``(B, C, rows, cols)`` image."""
    B, N, C = x.shape
    if rows * cols != N:
        raise LayoutError(f"grid {rows}x{cols} does not hold {N} tokens")
    return T.transpose(T.reshape(x, (B, rows, cols, C)), (0, 3, 1, 2))


def grid_to_tokens(x: Tensor) -> Tensor:
    B, C, H, W = x.shape
    return T.reshape(T.transpose(x, (0, 2, 3, 1)), (B, H * W, C))


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, scale: float) -> tuple[Tensor, Tensor]:
    """``softmax(q k^T * scale) v``; returns output and the attention weights."""
    attn = softmax_rows(T.matmul(q, k.swap_last()) * scale)
    return T.matmul(attn, v), attn
