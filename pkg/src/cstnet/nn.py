"""Parametric layers: linear, norms, convolution, MLP and self-attention."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import functional as F
from . import tensor as T
from .errors import ConfigurationError
from .tensor import Tensor

TRUNC_STD = 0.02


class Parameter(Tensor):
    """Trainable leaf tensor. ``init`` names how :func:`init_parameters` fills it."""

    __slots__ = ("init",)

    def __init__(self, shape, init: str = "trunc_normal", dtype=np.float32):
        # np.zeros is lazily backed, so unmaterialized full-size models are cheap
        super().__init__(np.zeros(shape, dtype=dtype), requires_grad=True)
        self.init = init


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "training", False)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray):
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def set_buffer(self, name: str, value: np.ndarray):
        if name not in self._buffers:
            raise KeyError(name)
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, mod in self._modules.items():
            yield from mod.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        seen = set()
        for mod_name, mod in self.named_modules(prefix):
            for name, p in mod._params.items():
                if id(p) in seen:
                    continue
                seen.add(id(p))
                yield (f"{mod_name}.{name}" if mod_name else name), p

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, Module, str]]:
        """Yield ``(full_name, owner, attribute)`` for every buffer."""
        for mod_name, mod in self.named_modules(prefix):
            for name in mod._buffers:
                yield (f"{mod_name}.{name}" if mod_name else name), mod, name

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        for name, owner, attr in self.named_buffers():
            state[name] = owner._buffers[attr]
        return state

    def train(self, mode: bool = True):
        for _, mod in self.named_modules():
            object.__setattr__(mod, "training", mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype):
        """Convert every parameter and buffer in place (64-bit shadow mode)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            if p.grad is not None:
                p.grad = p.grad.astype(dtype)
        for _, owner, attr in self.named_buffers():
            owner.set_buffer(attr, owner._buffers[attr].astype(dtype))
        return self

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def trunc_normal(rng: np.random.Generator, shape, std: float = TRUNC_STD) -> np.ndarray:
    """Normal samples redrawn until they fall inside two standard deviations."""
    z = rng.standard_normal(shape)
    bad = np.abs(z) > 2
    while bad.any():
        z[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(z) > 2
    return z * std


def init_parameters(module: Module, seed: int):
    """Deterministically fill every parameter, in sorted-name order."""
    rng = np.random.default_rng(seed)
    for name, p in sorted(module.named_parameters(), key=lambda kv: kv[0]):
        if p.init == "trunc_normal":
            p.data[...] = trunc_normal(rng, p.shape)
        elif p.init == "zeros":
            p.data[...] = 0
        elif p.init == "ones":
            p.data[...] = 1
        else:
            raise ConfigurationError(f"unknown initializer {p.init!r} for {name}")
    return module


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, bias: bool = True):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Parameter((out_features, in_features))
        self.bias = Parameter((out_features,), "zeros") if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)

    def macs(self, tokens: int) -> int:
        return tokens * self.in_features * self.out_features


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = F.LN_EPS):
        super().__init__()
        self.eps = eps
        self.weight = Parameter((dim,), "ones")
        self.bias = Parameter((dim,), "zeros")

    def forward(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.weight, self.bias, self.eps)


class BatchNorm2d(Module):
    """Batch norm over ``(B, C, H, W)``; eval mode uses the running statistics only."""

    def __init__(self, channels: int, eps: float = F.BN_EPS, momentum: float = 0.1):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.weight = Parameter((channels,), "ones")
        self.bias = Parameter((channels,), "zeros")
        self.register_buffer("running_mean", np.zeros(channels, dtype=np.float32))
        self.register_buffer("running_var", np.ones(channels, dtype=np.float32))

    def forward(self, x: Tensor) -> Tensor:
        if not self.training:
            return F.batch_norm(x, self.weight, self.bias, self.running_mean,
                                self.running_var, self.eps)
        out, mu, var = F.batch_norm_train(x, self.weight, self.bias, self.eps)
        n = x.size // x.shape[1]
        unbiased = var * (n / max(n - 1, 1))
        m = self.momentum
        dtype = self.running_mean.dtype
        self.set_buffer("running_mean", ((1 - m) * self.running_mean + m * mu).astype(dtype))
        self.set_buffer("running_var", ((1 - m) * self.running_var + m * unbiased).astype(dtype))
        return out


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 groups: int = 1, bias: bool = True):
        super().__init__()
        if in_channels % groups or out_channels % groups:
            raise ConfigurationError(
                f"groups={groups} must divide channels {in_channels}->{out_channels}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.groups = groups
        self.weight = Parameter((out_channels, in_channels // groups, kernel_size, kernel_size))
        self.bias = Parameter((out_channels,), "zeros") if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, groups=self.groups)

    def macs(self, h: int, w: int) -> int:
        return (self.out_channels * (self.in_channels // self.groups)
                * self.kernel_size ** 2 * h * w)


class Mlp(Module):
    """Two linear layers with an activation in between."""

    def __init__(self, in_features: int, hidden: int, out_features: int | None = None,
                 act: str = "gelu"):
        super().__init__()
        self.act = act
        self.fc1 = Linear(in_features, hidden)
        self.fc2 = Linear(hidden, out_features or in_features)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(F.activation(self.act, self.fc1(x)))

    def macs(self, tokens: int) -> int:
        return self.fc1.macs(tokens) + self.fc2.macs(tokens)


class MultiHeadSelfAttention(Module):
    """Multi-head self-attention over ``(B, N, C)`` tokens.

    ``scale_mode='per-head'`` scales logits by ``1/sqrt(C/h)``; ``'global'``
    uses ``1/sqrt(C)`` for every head.
    """

    def __init__(self, dim: int, heads: int, scale_mode: str = "per-head"):
        super().__init__()
        if dim % heads:
            raise ConfigurationError(f"channels {dim} not divisible by {heads} heads")
        if scale_mode not in ("per-head", "global"):
            raise ConfigurationError(f"unknown attention scale mode {scale_mode!r}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = (self.head_dim if scale_mode == "per-head" else dim) ** -0.5
        self.q = Linear(dim, dim)
        self.k = Linear(dim, dim)
        self.v = Linear(dim, dim)
        self.proj = Linear(dim, dim)

    def _heads(self, x: Tensor) -> Tensor:
        B, N, _ = x.shape
        return T.transpose(T.reshape(x, (B, N, self.heads, self.head_dim)), (0, 2, 1, 3))

    def attention(self, x: Tensor) -> Tensor:
        """Attention weights ``(B, h, N, N)``."""
        q, k = self._heads(self.q(x)), self._heads(self.k(x))
        return F.softmax_rows(T.matmul(q, k.swap_last()) * self.scale)

    def forward(self, x: Tensor) -> Tensor:
        B, N, C = x.shape
        q, k, v = self._heads(self.q(x)), self._heads(self.k(x)), self._heads(self.v(x))
        out, _ = F.scaled_dot_attention(q, k, v, self.scale)
        out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (B, N, C))
        return self.proj(out)

    def macs(self, tokens: int) -> int:
        return 4 * self.q.macs(tokens) + 2 * tokens * tokens * self.dim
