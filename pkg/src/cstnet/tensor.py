"""Dense tensors and a tape-based reverse-mode gradient engine.

Storage is a numpy array; every differentiable operation in this package goes
through :func:`record`, which appends the operation and its backward rule to
the innermost active :class:`Tape`.  Without an active tape nothing is
recorded, so inference pays no bookkeeping cost.

The tape is define-by-run: build a fresh one for every forward pass::

    with Tape() as tape:
        loss = model.loss(batch)
    grads = tape.backward(loss)
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import special

from .errors import ContractError, DimensionError

_local = threading.local()

FLOAT_TYPES = (np.float32, np.float64)


def default_dtype():
    return getattr(_local, "dtype", np.float32)


@contextmanager
def precision(dtype):
    """Set the dtype of newly created tensors for this thread.

    ``np.float64`` is the shadow mode used for gradient checking; every code
    path is identical, only the storage type widens.
    """
    dtype = np.dtype(dtype).type
    if dtype not in FLOAT_TYPES:
        raise ValueError(f"unsupported precision {dtype}")
    previous = default_dtype()
    _local.dtype = dtype
    try:
        yield
    finally:
        _local.dtype = previous


def _tape_stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def current_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Row-major float array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype.type not in FLOAT_TYPES:
            arr = arr.astype(default_dtype())
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if 0 in arr.shape:
            raise DimensionError(f"every extent must be >= 1, got {arr.shape}")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    def __hash__(self):
        return id(self)

    def __eq__(self, other):
        # identity semantics so tensors can key gradient maps
        return self is other

    # arithmetic sugar; all of it goes through the recorded ops below
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def swap_last(self):
        axes = list(range(self.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
        return transpose(self, tuple(axes))


@dataclass
class _Op:
    output: Tensor
    inputs: tuple
    backward: Callable


class Tape:
    """Ordered record of differentiable operations for one forward pass.

    Confined to the thread that created it.
    """

    def __init__(self):
        self.ops: list[_Op] = []
        self.nodes: dict[int, Tensor] = {}

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape stack corrupted: tapes must exit in LIFO order")
        stack.pop()
        return False

    def __len__(self):
        return len(self.ops)

    def record(self, output: Tensor, inputs: Sequence[Tensor], backward: Callable):
        for t in inputs:
            self.nodes.setdefault(id(t), t)
        self.nodes[id(output)] = output
        self.ops.append(_Op(output, tuple(inputs), backward))

    def backward(self, loss: Tensor, accumulate: bool = True) -> dict:
        """Propagate d(loss)/d(node) back through the tape.

        Returns a map from every leaf tensor that requires a gradient to its
        gradient array.  With ``accumulate`` the leaf ``.grad`` slots are
        updated in place as well (call ``zero_grad`` between steps).
        """
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        produced = {id(op.output) for op in self.ops}
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for op in reversed(self.ops):
            g = grads.pop(id(op.output), None)
            if g is None:
                continue
            in_grads = op.backward(g)
            for inp, gi in zip(op.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                gi = unbroadcast(gi, inp.shape).astype(inp.dtype, copy=False)
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        leaves = {}
        for key, g in grads.items():
            if key in produced:
                continue
            t = self.nodes.get(key, loss if key == id(loss) else None)
            if t is None or not t.requires_grad:
                continue
            leaves[t] = g
            if accumulate:
                t.grad = g.copy() if t.grad is None else t.grad + g
        return leaves


def backward(tape: Tape, loss: Tensor) -> dict:
    return tape.backward(loss)


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else default_dtype()
    return Tensor(np.asarray(x, dtype=dtype))


def record(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``data`` as the output of an op and register it on the tape."""
    out = Tensor(data)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, backward)
    return out


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, as_tensor(b, a)
    b = as_tensor(b)
    return as_tensor(a, b), b


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return record(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return record(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return record(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return record(out, (a, b), lambda g: (g / bd, -g * out / bd))


def neg(a: Tensor) -> Tensor:
    return record(-a.data, (a,), lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    if isinstance(exponent, Tensor):
        raise TypeError("only constant exponents are supported")
    ad = a.data
    p = ad.dtype.type(exponent)
    return record(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return record(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return record(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return record(out, (a,), lambda g: (g * 0.5 / out,))


def absolute(a: Tensor) -> Tensor:
    ad = a.data
    _trace_branch(ad >= 0)
    return record(np.abs(ad), (a,), lambda g: (g * np.sign(ad),))


def maximum(a, b) -> Tensor:
    """Elementwise max; ties send the gradient to ``a``."""
    a, b = _pair(a, b)
    mask = a.data >= b.data
    _trace_branch(mask)
    return record(np.where(mask, a.data, b.data), (a, b),
                  lambda g: (g * mask, g * ~mask))


def minimum(a, b) -> Tensor:
    """Elementwise min; ties send the gradient to ``a``."""
    a, b = _pair(a, b)
    mask = a.data <= b.data
    _trace_branch(mask)
    return record(np.where(mask, a.data, b.data), (a, b),
                  lambda g: (g * mask, g * ~mask))


def clip(a: Tensor, lo=None, hi=None) -> Tensor:
    ad = a.data
    out = np.clip(ad, lo, hi)
    inside = np.ones(ad.shape, dtype=bool)
    if lo is not None:
        inside &= ad >= lo
    if hi is not None:
        inside &= ad <= hi
    _trace_branch(inside)
    return record(out, (a,), lambda g: (g * inside,))


def relu(a: Tensor) -> Tensor:
    ad = a.data
    mask = ad > 0
    _trace_branch(mask)
    return record(np.where(mask, ad, 0).astype(ad.dtype), (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    out = special.expit(a.data)
    return record(out, (a,), lambda g: (g * out * (1 - out),))


def gelu(a: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF via erf."""
    x = a.data
    rt2 = x.dtype.type(np.sqrt(2.0))
    cdf = 0.5 * (1 + special.erf(x / rt2))
    pdf = np.exp(-0.5 * x * x) / x.dtype.type(np.sqrt(2 * np.pi))
    return record(x * cdf, (a,), lambda g: (g * (cdf + x * pdf),))


# -- linear algebra and structure -------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    _count_macs(int(np.prod(np.broadcast_shapes(ad.shape[:-2], bd.shape[:-2]), dtype=np.int64))
                * ad.shape[-2] * ad.shape[-1] * bd.shape[-1])

    def back(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return record(ad @ bd, (a, b), back)


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape
    out = a.data.sum(axis=axes, keepdims=True)
    kept_shape = out.shape
    if not keepdims:
        out = out.reshape([s for i, s in enumerate(shape) if i not in axes] or [1])

    def back(g):
        return (np.broadcast_to(g.reshape(kept_shape), shape),)

    return record(out, (a,), back)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return record(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return record(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def concat(tensors: Iterable[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    datas = [t.data for t in tensors]
    out = np.concatenate(datas, axis=axis)
    bounds = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return record(out, tuple(tensors), back)


def split(a: Tensor, parts: int, axis: int = -1) -> list:
    """Split ``a`` into ``parts`` equal chunks along ``axis``."""
    size = a.shape[axis]
    if size % parts:
        raise DimensionError(f"cannot split extent {size} into {parts} equal parts")
    step = size // parts
    axis = axis % a.ndim
    out = []
    for i in range(parts):
        index = [slice(None)] * a.ndim
        index[axis] = slice(i * step, (i + 1) * step)
        out.append(getitem(a, tuple(index)))
    return out


def getitem(a: Tensor, index) -> Tensor:
    shape, dtype = a.shape, a.dtype
    out = a.data[index]
    if out.ndim == 0:
        out = out.reshape(1)

    basic = _is_basic_index(index)

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[index] = g.reshape(full[index].shape)
        else:
            np.add.at(full, index, g.reshape(full[index].shape))
        return (full,)

    return record(np.ascontiguousarray(out), (a,), back)


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(Ellipsis), type(None))) for i in items)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return record(out, (a,), back)


# -- branch tracing -----------------------------------------------------------

def _trace_branch(mask: np.ndarray):
    traces = getattr(_local, "branch_traces", None)
    if traces:
        for t in traces:
            t.append(np.packbits(mask, axis=None))


@contextmanager
def trace_branches():
    """Record the branch taken by every piecewise op (relu, clip, maximum,
    minimum, absolute) executed inside the block.

    Yields a list of packed boolean masks in execution order.  Two runs of the
    same graph took identical branches iff their lists compare equal, which
    tells whether a perturbation stayed on one smooth piece of the function.
    """
    traces = getattr(_local, "branch_traces", None)
    if traces is None:
        traces = _local.branch_traces = []
    cell: list = []
    traces.append(cell)
    try:
        yield cell
    finally:
        traces.remove(cell)


def same_branches(a: list, b: list) -> bool:
    return len(a) == len(b) and all(x.shape == y.shape and np.array_equal(x, y)
                                    for x, y in zip(a, b))


# -- multiply-accumulate accounting ------------------------------------------

def _count_macs(n: int):
    counters = getattr(_local, "mac_counters", None)
    if counters:
        for c in counters:
            c[0] += int(n)


@contextmanager
def count_macs():
    """Count multiply-accumulates executed by matmul and conv kernels.

    Yields a one-element list holding the running total.
    """
    counters = getattr(_local, "mac_counters", None)
    if counters is None:
        counters = _local.mac_counters = []
    cell = [0]
    counters.append(cell)
    try:
        yield cell
    finally:
        counters.remove(cell)
