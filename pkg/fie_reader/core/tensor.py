"""Dense arrays with reverse-mode automatic differentiation.

Every primitive below computes its forward value with numpy and, when a
``Tape`` is active and at least one input needs a gradient, appends a node
holding the backward rule. ``backward(loss)`` walks the tape of the loss in
reverse recording order and accumulates into ``Parameter.grad``.
"""

from __future__ import annotations

import math
from contextvars import ContextVar
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ContractError, DegenerateError, NumericError, ShapeError, VocabularyError


Precision = str  # "f32" | "f64"

_DTYPES = {"f32": np.float32, "f64": np.float64}


def resolve_dtype(precision: Precision) -> np.dtype:
    try:
        return np.dtype(_DTYPES[precision])
    except KeyError:
        raise ValueError(f"unknown precision {precision!r}; expected one of {sorted(_DTYPES)}") from None


class Array:
    """Immutable wrapper around a numpy array taking part in autodiff."""

    __slots__ = ("data", "tape")

    def __init__(self, data: np.ndarray, tape: Optional["Tape"] = None) -> None:
        self.data = data
        self.tape = tape

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def requires_grad(self) -> bool:
        return self.tape is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Array(shape={self.shape}, dtype={self.dtype})"

    def __add__(self, other: "Operand") -> "Array":
        return add(self, other)

    def __radd__(self, other: "Operand") -> "Array":
        return add(other, self)

    def __sub__(self, other: "Operand") -> "Array":
        return sub(self, other)

    def __rsub__(self, other: "Operand") -> "Array":
        return sub(other, self)

    def __mul__(self, other: "Operand") -> "Array":
        return mul(self, other)

    def __rmul__(self, other: "Operand") -> "Array":
        return mul(other, self)

    def __neg__(self) -> "Array":
        return scale(self, -1.0)

    def __matmul__(self, other: "Array") -> "Array":
        return matmul(self, other)


class Parameter(Array):
    """A named trainable leaf; ``grad`` always has the shape of ``data``."""

    __slots__ = ("name", "grad")

    def __init__(self, name: str, value: np.ndarray) -> None:
        super().__init__(np.ascontiguousarray(value))
        self.name = name
        self.grad = np.zeros_like(self.data)

    @property
    def requires_grad(self) -> bool:
        return True

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def assign(self, value: np.ndarray) -> None:
        if value.shape != self.data.shape:
            raise ShapeError(f"cannot assign {value.shape} to parameter {self.name} of shape {self.data.shape}")
        self.data = np.ascontiguousarray(value.astype(self.data.dtype, copy=False))

    def __repr__(self) -> str:
        return f"Parameter({self.name}, shape={self.shape}, dtype={self.dtype})"


Operand = Union[Array, np.ndarray, float, int]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Node:
    op: str
    output: Array
    inputs: Tuple[Array, ...]
    backward: BackwardFn


_ACTIVE_TAPE: ContextVar[Optional["Tape"]] = ContextVar("fie_reader_active_tape", default=None)


class Tape:
    """Ordered record of the primitives applied during one forward pass.

    Use as a context manager; arrays produced inside the block remember the
    tape so ``backward(loss)`` knows what to traverse.
    """

    def __init__(self) -> None:
        self.nodes: List[Node] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc: object) -> None:
        if self._token is not None:
            _ACTIVE_TAPE.reset(self._token)
            self._token = None

    def __len__(self) -> int:
        return len(self.nodes)


def active_tape() -> Optional[Tape]:
    return _ACTIVE_TAPE.get()


def constant(value: Union[np.ndarray, float, Sequence[float]], dtype: Optional[np.dtype] = None) -> Array:
    arr = np.asarray(value, dtype=dtype)
    return Array(arr)


def _wrap(x: Operand, like: Optional[Array] = None) -> Array:
    if isinstance(x, Array):
        return x
    dtype = like.dtype if like is not None else None
    return Array(np.asarray(x, dtype=dtype))


def _record(op: str, data: np.ndarray, inputs: Tuple[Array, ...], backward: BackwardFn) -> Array:
    if data.dtype.kind == "f" and not np.isfinite(data).all():
        raise NumericError(f"non-finite values produced by {op} (shape {data.shape})")
    tape = active_tape()
    out = Array(data)
    if tape is not None and any(inp.requires_grad for inp in inputs):
        out.tape = tape
        tape.nodes.append(Node(op=op, output=out, inputs=inputs, backward=backward))
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, dim in enumerate(shape) if dim == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _swap_last(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


# ---------------------------------------------------------------------------
# Linear algebra and elementwise arithmetic
# ---------------------------------------------------------------------------


def matmul(a: Array, b: Array) -> Array:
    """Batched matrix product over the last two axes."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        ga = np.matmul(g, _swap_last(b.data))
        gb = np.matmul(_swap_last(a.data), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record("matmul", out, (a, b), backward)


def add(a: Operand, b: Operand) -> Array:
    a_arr = _wrap(a, b if isinstance(b, Array) else None)
    b_arr = _wrap(b, a_arr)
    try:
        out = a_arr.data + b_arr.data
    except ValueError as e:
        raise ShapeError(f"add shape mismatch: {a_arr.shape} + {b_arr.shape}") from e

    def backward(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(g, a_arr.shape), _unbroadcast(g, b_arr.shape)

    return _record("add", out, (a_arr, b_arr), backward)


def sub(a: Operand, b: Operand) -> Array:
    a_arr = _wrap(a, b if isinstance(b, Array) else None)
    b_arr = _wrap(b, a_arr)
    try:
        out = a_arr.data - b_arr.data
    except ValueError as e:
        raise ShapeError(f"sub shape mismatch: {a_arr.shape} - {b_arr.shape}") from e

    def backward(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(g, a_arr.shape), _unbroadcast(-g, b_arr.shape)

    return _record("sub", out, (a_arr, b_arr), backward)


def mul(a: Operand, b: Operand) -> Array:
    if isinstance(b, (int, float)) and isinstance(a, Array):
        return scale(a, float(b))
    if isinstance(a, (int, float)) and isinstance(b, Array):
        return scale(b, float(a))
    a_arr = _wrap(a, b if isinstance(b, Array) else None)
    b_arr = _wrap(b, a_arr)
    try:
        out = a_arr.data * b_arr.data
    except ValueError as e:
        raise ShapeError(f"mul shape mismatch: {a_arr.shape} * {b_arr.shape}") from e

    def backward(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(g * b_arr.data, a_arr.shape), _unbroadcast(g * a_arr.data, b_arr.shape)

    return _record("mul", out, (a_arr, b_arr), backward)


def scale(a: Array, factor: float) -> Array:
    out = a.data * a.dtype.type(factor)

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return (g * a.dtype.type(factor),)

    return _record("scale", out, (a,), backward)


def exp(a: Array) -> Array:
    out = np.exp(a.data)

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return (g * out,)

    return _record("exp", out, (a,), backward)


def log(a: Array) -> Array:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return (g / a.data,)

    return _record("log", out, (a,), backward)


def sum(a: Array, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> Array:  # noqa: A001
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record("sum", out, (a,), backward)


def mean(a: Array, axis: Optional[int] = None, keepdims: bool = False) -> Array:
    count = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# Nonlinearities and normalisation
# ---------------------------------------------------------------------------

_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Array) -> Array:
    """GELU, tanh approximation."""
    c = x.dtype.type(_GELU_C)
    k = x.dtype.type(0.044715)
    inner = c * (x.data + k * x.data ** 3)
    t = np.tanh(inner)
    out = 0.5 * x.data * (1.0 + t)

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        d_inner = c * (1.0 + 3.0 * k * x.data ** 2)
        local = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * d_inner
        return (g * local,)

    return _record("gelu", out.astype(x.dtype, copy=False), (x,), backward)


def layer_norm(x: Array, gain: Array, bias: Array, eps: float = 1e-12) -> Array:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match last dimension of {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = centered * rstd
    out = xhat * gain.data + bias.data

    def backward(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        reduce_axes = tuple(range(g.ndim - 1))
        g_gain = (g * xhat).sum(axis=reduce_axes)
        g_bias = g.sum(axis=reduce_axes)
        dxhat = g * gain.data
        gx = rstd * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, g_gain, g_bias

    return _record("layer_norm", out, (x, gain, bias), backward)


def _full_mask(mask: Optional[np.ndarray], shape: Tuple[int, ...]) -> Optional[np.ndarray]:
    if mask is None:
        return None
    try:
        return np.broadcast_to(np.asarray(mask, dtype=bool), shape)
    except ValueError as e:
        raise ShapeError(f"mask shape {np.shape(mask)} does not broadcast to {shape}") from e


def _masked_max(x: np.ndarray, mask: Optional[np.ndarray], axis: int) -> np.ndarray:
    if mask is None:
        return x.max(axis=axis, keepdims=True)
    if x.shape[axis] == 0 or not mask.any(axis=axis).all():
        raise DegenerateError(f"softmax over a fully masked slice along axis {axis} of shape {x.shape}")
    return np.where(mask, x, -np.inf).max(axis=axis, keepdims=True)


def _softmax_data(x: np.ndarray, mask: Optional[np.ndarray], axis: int) -> np.ndarray:
    if mask is None and x.shape[axis] == 0:
        raise DegenerateError(f"softmax over an empty axis {axis} of shape {x.shape}")
    m = _masked_max(x, mask, axis)
    shifted = x - m
    if mask is not None:
        shifted = np.where(mask, shifted, -np.inf)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x: Array, axis: int = -1, mask: Optional[np.ndarray] = None) -> Array:
    """Max-subtracted softmax; masked positions come out exactly zero."""
    full = _full_mask(mask, x.shape)
    y = _softmax_data(x.data, full, axis)

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record("softmax", y, (x,), backward)


def log_softmax(x: Array, axis: int = -1, mask: Optional[np.ndarray] = None) -> Array:
    """Log-probabilities; masked positions are set to 0 and receive no gradient."""
    full = _full_mask(mask, x.shape)
    m = _masked_max(x.data, full, axis)
    shifted = x.data - m
    e = np.exp(shifted) if full is None else np.where(full, np.exp(np.where(full, shifted, 0.0)), 0.0)
    lse = np.log(e.sum(axis=axis, keepdims=True))
    out = shifted - lse
    if full is not None:
        out = np.where(full, out, 0.0).astype(x.dtype, copy=False)
    probs = e / e.sum(axis=axis, keepdims=True)

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        if full is not None:
            g = np.where(full, g, 0.0)
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _record("log_softmax", out, (x,), backward)


def logsumexp(x: Array, axis: int = -1, keepdims: bool = False) -> Array:
    if x.shape[axis] == 0:
        raise DegenerateError(f"logsumexp over an empty axis of shape {x.shape}")
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = m + np.log(s)
    probs = e / s
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * probs,)

    return _record("logsumexp", np.asarray(out), (x,), backward)


# ---------------------------------------------------------------------------
# Shape manipulation and indexing
# ---------------------------------------------------------------------------


def reshape(a: Array, shape: Tuple[int, ...]) -> Array:
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"cannot reshape {a.shape} into {shape}") from e

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return (g.reshape(a.shape),)

    return _record("reshape", out, (a,), backward)


def transpose(a: Array, axes: Tuple[int, ...]) -> Array:
    out = np.transpose(a.data, axes)
    inverse = tuple(np.argsort(axes))

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return (np.transpose(g, inverse),)

    return _record("transpose", out, (a,), backward)


def broadcast_to(a: Array, shape: Tuple[int, ...]) -> Array:
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError as e:
        raise ShapeError(f"cannot broadcast {a.shape} to {shape}") from e

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return (_unbroadcast(g, a.shape),)

    return _record("broadcast_to", out, (a,), backward)


def concat(arrays: Sequence[Array], axis: int = 0) -> Array:
    """Concatenate along ``axis``; the gradient splits back by original extents."""
    if not arrays:
        raise ShapeError("concat needs at least one array")
    if len(arrays) == 1:
        return arrays[0]
    try:
        out = np.concatenate([a.data for a in arrays], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat shape mismatch along axis {axis}: {[a.shape for a in arrays]}") from e
    bounds = np.cumsum([a.shape[axis] for a in arrays])[:-1]

    def backward(g: np.ndarray) -> List[np.ndarray]:
        return list(np.split(g, bounds, axis=axis))

    return _record("concat", out, tuple(arrays), backward)


def slice_axis(a: Array, axis: int, start: int, stop: int) -> Array:
    index: List[Union[slice, int]] = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    key = tuple(index)
    out = a.data[key].copy()

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        full = np.zeros_like(a.data)
        full[key] = g
        return (full,)

    return _record("slice", out, (a,), backward)


def take(a: Array, indices: np.ndarray, axis: int = 0) -> Array:
    """Gather along ``axis`` with a 1-D index array; repeated indices accumulate."""
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[axis]):
        raise ShapeError(f"take indices out of range for axis {axis} of shape {a.shape}")
    out = np.take(a.data, idx, axis=axis)

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        full = np.zeros_like(a.data)
        np.add.at(np.moveaxis(full, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (full,)

    return _record("take", out, (a,), backward)


def embedding_lookup(table: Array, ids: np.ndarray) -> Array:
    ids = np.asarray(ids, dtype=np.int64)
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        bad = int(ids.max()) if ids.max() >= vocab else int(ids.min())
        raise VocabularyError(f"token id {bad} outside vocabulary of size {vocab}")
    out = table.data[ids]

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _record("embedding", out, (table,), backward)


# ---------------------------------------------------------------------------
# Reverse pass
# ---------------------------------------------------------------------------


def backward(loss: Array) -> None:
    """Accumulate d(loss)/d(param) into every reachable ``Parameter.grad``."""
    if loss.data.size != 1 or loss.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss.tape
    if tape is None:
        return
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    params: Dict[int, Parameter] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, inp_grad in zip(node.inputs, node.backward(g)):
            if inp_grad is None or not inp.requires_grad:
                continue
            key = id(inp)
            if isinstance(inp, Parameter):
                params[key] = inp
            prev = grads.get(key)
            grads[key] = inp_grad if prev is None else prev + inp_grad
    for key, param in params.items():
        param.grad = param.grad + grads[key].astype(param.dtype, copy=False)
