"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every primitive goes through :func:`emit`, which checks the result for
non-finite values and, when a :class:`Tape` is active and some input
requires a gradient, appends a node to that tape. Backward rules live in
the ``BACKWARD`` registry keyed by op name, so other modules can add
primitives of their own with :func:`register_backward`.

Usage::

    w = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        loss = reduce(mul(w, w), axis=0, kind="sum")
    grads = tape.backward(loss)
    grads[w]  # array([2., 4.])
"""
from __future__ import annotations

import contextvars
from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import kernels
from .errors import AxisError, ContractError, DimensionError, FeatureIndexError, NumericalError

MAX_RANK = 3

_ACTIVE_TAPE: contextvars.ContextVar = contextvars.ContextVar("dcap_active_tape", default=None)

BACKWARD: dict[str, Callable] = {}


def register_backward(name):
    def deco(fn):
        BACKWARD[name] = fn
        return fn

    return deco


class Tensor:
    """Immutable-by-convention float64 array of rank 0 to 3.

    Rank 0 exists only so that losses can be true scalars. Parameters are
    leaves created with ``requires_grad=True``; the optimizer is the only
    code allowed to overwrite their ``data``.
    """

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=np.float64, copy=True, order="C")
        if arr.ndim > MAX_RANK:
            raise DimensionError(f"rank {arr.ndim} exceeds the maximum of {MAX_RANK}")
        if any(s <= 0 for s in arr.shape):
            raise DimensionError(f"tensor extents must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name

    @classmethod
    def _wrap(cls, arr):
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.name = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def values(self):
        """Flat row-major view of the data."""
        return self.data.reshape(-1)

    def numpy(self):
        return self.data.copy()

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Node(NamedTuple):
    op: str
    output: Tensor
    inputs: tuple
    ctx: object


class Tape:
    """Append-only record of differentiable operations.

    A tape is single-writer; it becomes the active recorder inside a
    ``with`` block (per thread / async context).
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._token = None

    def __enter__(self):
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPE.reset(self._token)
        self._token = None
        return False

    def __len__(self):
        return len(self.nodes)

    def backward(self, root: Tensor, wrt: Sequence[Tensor] | None = None) -> dict:
        """Gradients of the scalar ``root`` with respect to parameter leaves.

        With ``wrt`` given, the result has exactly those keys (zeros where
        no path exists). Otherwise it holds every leaf that fed the tape.
        """
        if root.data.size != 1:
            raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
        grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        produced = set()
        leaves: dict[int, Tensor] = {}
        for node in self.nodes:
            produced.add(id(node.output))
        for node in self.nodes:
            for t in node.inputs:
                if t.requires_grad and id(t) not in produced:
                    leaves.setdefault(id(t), t)

        for node in reversed(self.nodes):
            g = grads.get(id(node.output))
            if g is None:
                continue
            in_grads = BACKWARD[node.op](g, node.ctx)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if gi.shape != t.shape:
                    raise DimensionError(
                        f"backward rule for {node.op!r} returned shape {gi.shape}, "
                        f"expected {t.shape}"
                    )
                prev = grads.get(id(t))
                grads[id(t)] = gi if prev is None else prev + gi

        targets = list(wrt) if wrt is not None else list(leaves.values())
        out = {}
        for t in targets:
            g = grads.get(id(t))
            out[t] = np.zeros_like(t.data) if g is None else g
        return out


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE.get()


def emit(op: str, data, inputs: Sequence[Tensor], ctx=None) -> Tensor:
    """Wrap a primitive's result and record it on the active tape."""
    data = np.asarray(data, dtype=np.float64)
    if not data.flags.c_contiguous:
        data = data.copy(order="C")
    if data.ndim > MAX_RANK:
        raise DimensionError(f"{op} would produce rank {data.ndim}")
    if not np.isfinite(data).all():
        raise NumericalError(f"{op} produced non-finite values")
    out = Tensor._wrap(data)
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(Node(op, out, tuple(inputs), ctx))
    return out


def _axis(axis, ndim):
    if not -ndim <= axis < ndim:
        raise AxisError(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


def _swap(a):
    return np.swapaxes(a, -1, -2)


# ---------------------------------------------------------------- matmul


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; either side may carry a leading batch axis."""
    if a.ndim not in (2, 3) or b.ndim not in (2, 3):
        raise DimensionError(f"matmul needs rank-2/3 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents disagree: {a.shape} @ {b.shape}")
    if a.ndim == 3 and b.ndim == 3 and a.shape[0] != b.shape[0]:
        raise DimensionError(f"matmul batch extents disagree: {a.shape} @ {b.shape}")
    return emit("matmul", np.matmul(a.data, b.data), (a, b), (a.data, b.data))


@register_backward("matmul")
def _matmul_bw(g, ctx):
    A, B = ctx
    gA = np.matmul(g, _swap(B))
    if B.ndim == 2 and g.ndim == 3:
        gB = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
    else:
        gB = np.matmul(_swap(A), g)
    if A.ndim == 2 and gA.ndim == 3:
        gA = gA.sum(axis=0)
    return gA, gB


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.ndim < 2:
        raise DimensionError(f"transpose needs rank >= 2, got {a.shape}")
    return emit("transpose", _swap(a.data), (a,))


@register_backward("transpose")
def _transpose_bw(g, ctx):
    return (_swap(g),)


# ----------------------------------------------------------- elementwise


def elementwise(a: Tensor, b: Tensor, kind: str) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"elementwise {kind} needs identical shapes, got {a.shape} and {b.shape}")
    if kind == "add":
        return emit("add", a.data + b.data, (a, b))
    if kind == "sub":
        return emit("sub", a.data - b.data, (a, b))
    if kind == "mul":
        return emit("mul", a.data * b.data, (a, b), (a.data, b.data))
    raise ContractError(f"unknown elementwise kind {kind!r}")


def add(a, b):
    return elementwise(as_tensor(a), as_tensor(b), "add")


def sub(a, b):
    return elementwise(as_tensor(a), as_tensor(b), "sub")


def mul(a, b):
    return elementwise(as_tensor(a), as_tensor(b), "mul")


@register_backward("add")
def _add_bw(g, ctx):
    return g, g


@register_backward("sub")
def _sub_bw(g, ctx):
    return g, -g


@register_backward("mul")
def _mul_bw(g, ctx):
    A, B = ctx
    return g * B, g * A


def add_bias(a: Tensor, bias: Tensor) -> Tensor:
    """Add a vector along the last axis of ``a``."""
    if bias.ndim != 1 or bias.shape[0] != a.shape[-1]:
        raise DimensionError(f"bias {bias.shape} does not match last axis of {a.shape}")
    return emit("add_bias", a.data + bias.data, (a, bias))


@register_backward("add_bias")
def _add_bias_bw(g, ctx):
    return g, g.reshape(-1, g.shape[-1]).sum(axis=0)


def scale(a: Tensor, c: float) -> Tensor:
    return emit("scale", a.data * float(c), (a,), float(c))


@register_backward("scale")
def _scale_bw(g, c):
    return (g * c,)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return emit("relu", np.where(mask, a.data, 0.0), (a,), mask)


@register_backward("relu")
def _relu_bw(g, mask):
    return (g * mask,)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return emit("sigmoid", y, (a,), y)


@register_backward("sigmoid")
def _sigmoid_bw(g, y):
    return (g * y * (1.0 - y),)


def log(a: Tensor) -> Tensor:
    if (a.data <= 0).any():
        raise NumericalError("log of a non-positive value")
    return emit("log", np.log(a.data), (a,), a.data)


@register_backward("log")
def _log_bw(g, x):
    return (g / x,)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only strictly inside the interval."""
    inside = (a.data > lo) & (a.data < hi)
    return emit("clip", np.clip(a.data, lo, hi), (a,), inside)


@register_backward("clip")
def _clip_bw(g, inside):
    return (g * inside,)


# -------------------------------------------------------------- softmax


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting the row max."""
    x = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(x)
    y = e / e.sum(axis=-1, keepdims=True)
    return emit("softmax_rows", y, (a,), y)


@register_backward("softmax_rows")
def _softmax_bw(g, y):
    return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)


def normalize_last(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Zero-mean, unit-variance along the last axis (no affine part)."""
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    y = xc * inv
    return emit("normalize_last", y, (a,), (y, inv))


@register_backward("normalize_last")
def _normalize_bw(g, ctx):
    y, inv = ctx
    gm = g.mean(axis=-1, keepdims=True)
    gym = (g * y).mean(axis=-1, keepdims=True)
    return (inv * (g - gm - y * gym),)


# ----------------------------------------------------------- reductions


def reduce(a: Tensor, axis: int, kind: str = "sum") -> Tensor:
    ax = _axis(axis, a.ndim)
    if kind == "sum":
        out = a.data.sum(axis=ax)
    elif kind == "mean":
        out = a.data.mean(axis=ax)
    else:
        raise ContractError(f"unknown reduce kind {kind!r}")
    return emit("reduce", out, (a,), (ax, kind, a.shape))


@register_backward("reduce")
def _reduce_bw(g, ctx):
    ax, kind, shape = ctx
    g = np.expand_dims(g, ax)
    if kind == "mean":
        g = g / shape[ax]
    return (np.broadcast_to(g, shape).copy(),)


# ------------------------------------------------------ shape movement


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ContractError("concat needs at least one part")
    ndim = parts[0].ndim
    ax = _axis(axis, ndim)
    for p in parts[1:]:
        if p.ndim != ndim or any(
            p.shape[k] != parts[0].shape[k] for k in range(ndim) if k != ax
        ):
            raise DimensionError(
                f"concat along axis {ax}: ragged shapes {[q.shape for q in parts]}"
            )
    sizes = [p.shape[ax] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=ax)
    return emit("concat", out, parts, (ax, sizes))


@register_backward("concat")
def _concat_bw(g, ctx):
    ax, sizes = ctx
    cuts = np.cumsum(sizes)[:-1]
    return tuple(np.ascontiguousarray(s) for s in np.split(g, cuts, axis=ax))


def take(a: Tensor, start: int, stop: int, axis: int = 0) -> Tensor:
    """Contiguous slice ``[start, stop)`` along ``axis``."""
    ax = _axis(axis, a.ndim)
    if not 0 <= start < stop <= a.shape[ax]:
        raise DimensionError(f"slice [{start}, {stop}) out of range for extent {a.shape[ax]}")
    idx = [slice(None)] * a.ndim
    idx[ax] = slice(start, stop)
    return emit("take", a.data[tuple(idx)], (a,), (a.shape, tuple(idx)))


@register_backward("take")
def _take_bw(g, ctx):
    shape, idx = ctx
    out = np.zeros(shape)
    out[idx] = g
    return (out,)


def split(a: Tensor, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    ax = _axis(axis, a.ndim)
    if sum(sizes) != a.shape[ax]:
        raise DimensionError(f"split sizes {list(sizes)} do not add up to {a.shape[ax]}")
    out, start = [], 0
    for s in sizes:
        out.append(take(a, start, start + s, ax))
        start += s
    return out


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    return emit("reshape", a.data.reshape(shape), (a,), a.shape)


@register_backward("reshape")
def _reshape_bw(g, shape):
    return (g.reshape(shape),)


# ---------------------------------------------------------------- gather


def gather_rows(table: Tensor, ids) -> Tensor:
    """Select rows of a 2-D table; the gradient scatters back into those rows."""
    ids = np.asarray(ids, dtype=np.int64).reshape(-1)
    if table.ndim != 2:
        raise DimensionError(f"gather_rows needs a rank-2 table, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        bad = ids[(ids < 0) | (ids >= table.shape[0])][0]
        raise FeatureIndexError(f"row id {bad} outside table of {table.shape[0]} rows")
    return emit("gather_rows", table.data[ids], (table,), (table.shape, ids))


@register_backward("gather_rows")
def _gather_bw(g, ctx):
    shape, ids = ctx
    out = np.zeros(shape)
    kernels.scatter_add_rows(out, ids, g)
    return (out,)
