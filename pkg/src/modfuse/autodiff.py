"""Define-by-run reverse-mode automatic differentiation over dense tensors.

Every op computes its forward value eagerly with numpy and, when a
:class:`Tape` is active on the current thread and at least one input
requires a gradient, records a backward closure on that tape.

    >>> w = Tensor([[1.0, 2.0]], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = total(mul(w, w))
    >>> tape.backward(loss)[w.node_id].data
    array([[2., 4.]], dtype=float32)

Shape rules are deliberately narrow: elementwise ops accept identical
shapes or a Python scalar, and anything else needs an explicit
:func:`reshape` or :func:`expand`.  The one exception is :func:`matmul`,
which accepts a stack of matrices on the left and either a matching stack
or a single shared matrix on the right.
"""

from __future__ import annotations

import itertools
import math
import os
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ConfigError, ShapeError, UsageError

__all__ = [
    "Tensor",
    "Tape",
    "OPS",
    "backward",
    "current_tape",
    "set_finite_checks",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "gelu",
    "total",
    "mean",
    "reshape",
    "transpose",
    "swap_last",
    "slice_axis",
    "concat",
    "expand",
    "softmax",
    "conv1d_depthwise",
]

_node_ids = itertools.count(1)
_local = threading.local()
_SUPPORTED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_check_finite = os.environ.get("MODFUSE_CHECK_FINITE", "0") not in ("", "0")

OPS: dict[str, Callable[..., "Tensor"]] = {}


def set_finite_checks(enabled: bool) -> None:
    """Turn NaN/Inf checking of every op output on or off (process-wide)."""
    global _check_finite
    _check_finite = bool(enabled)


def register_op(name: str):
    def deco(fn):
        OPS[name] = fn
        return fn

    return deco


class Tensor:
    """Row-major float array of rank >= 1 with optional gradient tracking.

    Data is float32 unless float64 is requested explicitly (used by the
    gradient checker). A 0-d input is promoted to shape ``(1,)``.
    """

    __slots__ = ("data", "requires_grad", "node_id", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float32):
        dtype = np.dtype(dtype)
        if dtype not in _SUPPORTED_DTYPES:
            raise TypeError(f"unsupported tensor dtype {dtype}")
        arr = np.array(data, dtype=dtype)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if 0 in arr.shape:
            raise ShapeError(f"zero-size dimension in shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_node_ids)
        self._tape: Tape | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        t.data = arr
        t.requires_grad = False
        t.node_id = next(_node_ids)
        t._tape = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data, requires_grad=self.requires_grad, dtype=dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, data={self.data!r})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(scale(self, -1.0), other)

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ShapeError("division is only defined by a Python scalar")
        return scale(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


class _Node:
    __slots__ = ("inputs", "output_id", "backward")

    def __init__(self, inputs, output_id, backward):
        self.inputs = inputs
        self.output_id = output_id
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations on one thread.

    Use as a context manager; ops executed inside the ``with`` block are
    recorded. Tapes nest (the innermost is active) and are thread-local, so
    two tapes never share nodes. Tensors produced on another tape are treated
    as constants-with-identity (leaves) here.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._outputs: set[int] = set()

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise UsageError("tape exited out of order")
        stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward_fn) -> None:
        out.requires_grad = True
        out._tape = self
        self.nodes.append(_Node(tuple(inputs), out.node_id, backward_fn))
        self._outputs.add(out.node_id)

    def backward(self, loss: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[int, Tensor]:
        """Gradient of scalar ``loss`` with respect to leaf tensors.

        Returns ``{node_id: gradient}`` for every ``requires_grad`` leaf that
        fed into ``loss``.  With ``wrt`` given, the map is restricted to those
        tensors, and any that did not participate get a zero gradient.
        """
        if loss.size != 1:
            raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise UsageError("loss was not recorded on this tape")
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(node.output_id, None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp._tape is not self:
                    leaves[inp.node_id] = inp
                prev = grads.get(inp.node_id)
                grads[inp.node_id] = gi if prev is None else prev + gi
        if wrt is None:
            return {nid: Tensor._wrap(grads[nid]) for nid in leaves}
        out = {}
        for t in wrt:
            g = grads.get(t.node_id) if t.node_id in leaves else None
            out[t.node_id] = Tensor._wrap(g if g is not None else np.zeros_like(t.data))
        return out


def _tape_stack() -> list[Tape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def current_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def backward(loss: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[int, Tensor]:
    """Run the backward pass on the tape that recorded ``loss``."""
    if loss._tape is None:
        raise UsageError("loss is not on any tape; compute it inside `with Tape():`")
    return loss._tape.backward(loss, wrt)


def op_result(data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap a forward value and record its backward rule when needed.

    ``backward_fn(g)`` receives the upstream gradient and returns one array
    (or None) per input, in order.
    """
    out = Tensor._wrap(data)
    if _check_finite and not np.all(np.isfinite(out.data)):
        if all(np.all(np.isfinite(t.data)) for t in inputs):
            raise FloatingPointError("non-finite values produced from finite inputs")
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(out, inputs, backward_fn)
    return out


def _axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (no broadcasting)")


@register_op("matmul")
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product ``a @ b`` over the last two axes.

    ``a`` may carry leading batch axes; ``b`` is either 2-D (shared) or has
    exactly the same leading axes as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    shared = b.ndim == 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dimensions disagree: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if shared:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return op_result(ad @ bd, (a, b), bw)


@register_op("add")
def add(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _same_shape(a, b, "add")
        return op_result(a.data + b.data, (a, b), lambda g: (g, g))
    c = float(b)
    return op_result(a.data + a.data.dtype.type(c), (a,), lambda g: (g,))


def sub(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        return add(a, scale(b, -1.0))
    return add(a, -float(b))


@register_op("mul")
def mul(a: Tensor, b: Tensor) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(a, b)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return op_result(ad * bd, (a, b), lambda g: (g * bd, g * ad))


@register_op("scale")
def scale(x: Tensor, c: float) -> Tensor:
    c = x.data.dtype.type(c)
    return op_result(x.data * c, (x,), lambda g: (g * c,))


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


@register_op("gelu")
def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the standard normal CDF."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))

    def bw(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return op_result(xd * cdf, (x,), bw)


@register_op("sum")
def total(x: Tensor, axis: int | None = None) -> Tensor:
    """Sum of all elements (shape ``(1,)``) or along one axis."""
    shape = x.shape
    if axis is None:
        return op_result(x.data.sum().reshape(1), (x,), lambda g: (np.broadcast_to(g.reshape(()), shape).copy(),))
    ax = _axis(axis, x.ndim)

    def bw(g):
        g = g.reshape(shape[:ax] + (1,) + shape[ax + 1 :])
        return (np.broadcast_to(g, shape).copy(),)

    return op_result(x.data.sum(axis=ax), (x,), bw)


@register_op("mean")
def mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.size if axis is None else x.shape[_axis(axis, x.ndim)]
    return scale(total(x, axis), 1.0 / n)


@register_op("reshape")
def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}") from exc
    if 0 in out.shape or out.ndim == 0:
        raise ShapeError(f"reshape to {shape} yields an empty or rank-0 tensor")
    orig = x.shape
    return op_result(out, (x,), lambda g: (g.reshape(orig),))


@register_op("transpose")
def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(_axis(a, x.ndim) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose axes {axes} are not a permutation of rank {x.ndim}")
    inverse = tuple(np.argsort(axes))
    return op_result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def swap_last(x: Tensor) -> Tensor:
    """Transpose the last two axes."""
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


@register_op("slice")
def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous sub-range ``[start, stop)`` along ``axis``."""
    ax = _axis(axis, x.ndim)
    n = x.shape[ax]
    if not 0 <= start < stop <= n:
        raise ShapeError(f"slice [{start}:{stop}] invalid for axis of length {n}")
    index = (slice(None),) * ax + (slice(start, stop),)
    shape, dtype = x.shape, x.dtype

    def bw(g):
        gx = np.zeros(shape, dtype=dtype)
        gx[index] = g
        return (gx,)

    return op_result(x.data[index].copy(), (x,), bw)


@register_op("concat")
def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of an empty list")
    ax = _axis(axis, tensors[0].ndim)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or t.shape[:ax] + t.shape[ax + 1 :] != ref[:ax] + ref[ax + 1 :]:
            raise ShapeError(f"concat along axis {ax}: incompatible shapes {ref} and {t.shape}")
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    return op_result(out, tensors, lambda g: tuple(np.split(g, bounds, axis=ax)))


@register_op("expand")
def expand(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit broadcast: prepend axes and/or stretch size-1 axes."""
    shape = tuple(int(s) for s in shape)
    lead = len(shape) - x.ndim
    if lead < 0 or any(s != t and s != 1 for s, t in zip(x.shape, shape[lead:])):
        raise ShapeError(f"cannot expand {x.shape} to {shape}")
    stretched = tuple(lead + i for i, (s, t) in enumerate(zip(x.shape, shape[lead:])) if s == 1 and t != 1)
    orig = x.shape

    def bw(g):
        if lead:
            g = g.sum(axis=tuple(range(lead)))
        if stretched:
            g = g.sum(axis=tuple(a - lead for a in stretched), keepdims=True)
        return (g.reshape(orig),)

    return op_result(np.broadcast_to(x.data, shape).copy(), (x,), bw)


@register_op("softmax")
def softmax(x: Tensor, axis: int = -1) -> Tensor:
    ax = _axis(axis, x.ndim)
    z = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=ax, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=ax, keepdims=True)),)

    return op_result(y, (x,), bw)


@register_op("conv1d_depthwise")
def conv1d_depthwise(x: Tensor, kernels: Tensor, stride: int = 1) -> Tensor:
    """Per-channel 1-D cross-correlation, no padding.

    ``x`` is ``[..., C, T]`` and ``kernels`` is ``[C, K]``; output channel c
    only sees input channel c.  Output length is ``(T - K) // stride + 1``.
    """
    if kernels.ndim != 2 or x.ndim < 2 or x.shape[-2] != kernels.shape[0]:
        raise ShapeError(f"conv1d_depthwise: input {x.shape} vs kernels {kernels.shape}")
    if stride < 1:
        raise ConfigError(f"stride must be positive, got {stride}")
    k_len, t_len = kernels.shape[1], x.shape[-1]
    if k_len > t_len:
        raise ConfigError(f"kernel length {k_len} exceeds signal length {t_len}")
    t_out = (t_len - k_len) // stride + 1
    xd, kd = x.data, kernels.data
    windows = np.lib.stride_tricks.sliding_window_view(xd, k_len, axis=-1)[..., ::stride, :]
    out = np.einsum("...ctk,ck->...ct", windows, kd)

    def bw(g):
        c = kd.shape[0]
        gk = np.einsum("bctk,bct->ck", windows.reshape(-1, c, t_out, k_len), g.reshape(-1, c, t_out))
        gx = np.zeros_like(xd)
        span = stride * (t_out - 1) + 1
        for k in range(k_len):
            gx[..., k : k + span : stride] += g * kd[:, k : k + 1]
        return gx, gk

    return op_result(out, (x, kernels), bw)
