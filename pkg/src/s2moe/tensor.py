"""Reverse-mode automatic differentiation over dense numpy arrays.

A ``Tensor`` wraps an ndarray; primitives record themselves on a ``Tape`` in
execution order (which is a topological order), and ``backward`` replays the
records in exact reverse order to accumulate gradients into the leaves.

Precision is selectable per tensor: float32 is the training default, float64
is used wherever gradients are verified against finite differences.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

OP_KINDS = frozenset({
    "matmul", "add", "sub", "mul", "div", "pow", "neg",
    "relu", "sigmoid", "softmax", "layer-norm", "log", "exp",
    "sum", "mean", "variance", "reshape", "transpose", "concat",
    "embedding-lookup", "gather-rows", "scatter-rows", "take-pairs",
    "cross-entropy-with-logits",
})


class TensorError(Exception):
    """Base class for tensor-core failures."""


class ShapeError(TensorError):
    """Operand shapes do not conform; message names both shapes."""


class NonFiniteError(TensorError):
    """An op produced NaN/inf while the NaN guard was enabled."""


class GraphError(TensorError):
    """Misuse of the tape: detached tensors, double backward, non-scalar loss."""


_nan_guard = True


def set_nan_guard(enabled: bool) -> None:
    """Enable or disable the finite-output check after every primitive."""
    global _nan_guard
    _nan_guard = bool(enabled)


class _Record:
    """One tape entry: the op, its inputs, and how to push gradients back."""

    __slots__ = ("op", "inputs", "out_id", "backward_fn")

    def __init__(self, op, inputs, out_id, backward_fn):
        self.op = op
        self.inputs = inputs
        self.out_id = out_id
        self.backward_fn = backward_fn


class Tape:
    """Ordered op records for one forward graph.

    Records are appended in execution order, so the list is topologically
    sorted by construction. ``clear()`` drops the records and invalidates
    every node id handed out so far.
    """

    def __init__(self):
        self._records: list[_Record] = []
        self._consumed: set[int] = set()
        self._generation = 0

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack.pop()

    def append(self, record: _Record) -> int:
        self._records.append(record)
        return len(self._records) - 1

    def clear(self) -> None:
        self._records = []
        self._consumed = set()
        self._generation += 1

    def __len__(self) -> int:
        return len(self._records)


_default_tape = Tape()
_tape_stack: list[Tape] = [_default_tape]
_grad_enabled = True


def active_tape() -> Tape:
    return _tape_stack[-1]


@contextlib.contextmanager
def no_grad():
    """Run ops without recording them; outputs do not require grad."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Dense array with an optional handle onto the active tape."""

    __slots__ = ("data", "requires_grad", "grad", "node_id", "tape", "_generation")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node_id: int | None = None
        self.tape: Tape | None = None
        self._generation = 0

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # operator sugar; scalars are promoted to constant tensors
    def __add__(self, other): return add(self, _coerce(other, self.dtype))
    def __radd__(self, other): return add(_coerce(other, self.dtype), self)
    def __sub__(self, other): return sub(self, _coerce(other, self.dtype))
    def __rsub__(self, other): return sub(_coerce(other, self.dtype), self)
    def __mul__(self, other): return mul(self, _coerce(other, self.dtype))
    def __rmul__(self, other): return mul(_coerce(other, self.dtype), self)
    def __truediv__(self, other): return div(self, _coerce(other, self.dtype))
    def __rtruediv__(self, other): return div(_coerce(other, self.dtype), self)
    def __matmul__(self, other): return matmul(self, other)
    def __neg__(self): return neg(self)
    def __pow__(self, p): return power(self, p)


def _coerce(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _on_active_tape(t: Tensor) -> bool:
    tape = active_tape()
    return t.tape is tape and t.node_id is not None and t._generation == tape._generation


def _finish(op: str, out_data: np.ndarray, inputs: Sequence[Tensor],
            backward_fn: Callable[[np.ndarray], list]) -> Tensor:
    """Wrap an op result, run the NaN guard, and record on the tape."""
    requires = _grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=requires)
    if _nan_guard:
        # single-pass screen: any NaN/inf poisons the float64 sum; a finite
        # sum of finite values cannot overflow float64, so only a non-finite
        # sum warrants the exact (slower) check
        if not math.isfinite(float(np.sum(out_data, dtype=np.float64))):
            if not np.all(np.isfinite(out_data)):
                raise NonFiniteError(
                    f"op '{op}' produced non-finite values (tape position {len(active_tape())})")
    if requires:
        tape = active_tape()
        out.tape = tape
        out._generation = tape._generation
        out.node_id = tape.append(_Record(op, tuple(inputs), len(tape), backward_fn))
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires grad.

    The loss must be a scalar living on the current tape; a second backward
    through the same node without re-running forward is rejected.
    """
    tape = loss.tape
    if tape is None or loss.node_id is None:
        raise GraphError("backward: tensor is detached from the tape")
    if tape is not active_tape() or loss._generation != tape._generation:
        raise GraphError("backward: tensor's tape is no longer active (cleared or replaced)")
    if loss.data.size != 1:
        raise GraphError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    if loss.node_id in tape._consumed:
        raise GraphError("backward: already called for this node; re-run forward first")

    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for idx in range(loss.node_id, -1, -1):
        g_out = grads.pop(idx, None)
        if g_out is None:
            continue
        rec = tape._records[idx]
        input_grads = rec.backward_fn(g_out)
        for t, g in zip(rec.inputs, input_grads):
            if g is None:
                continue
            if _on_active_tape(t):
                nid = t.node_id
                if nid in grads:
                    grads[nid] = grads[nid] + g
                else:
                    grads[nid] = g
            elif t.requires_grad:
                t.grad = g if t.grad is None else t.grad + g
    tape._consumed.add(loss.node_id)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcasted gradient back down to ``shape``."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        _check_broadcast("add", a, b)
    out = a.data + b.data

    def bw(g):
        return [_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)]

    return _finish("add", out, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        _check_broadcast("sub", a, b)
    out = a.data - b.data

    def bw(g):
        return [_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)]

    return _finish("sub", out, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        _check_broadcast("mul", a, b)
    out = a.data * b.data
    a_data, b_data = a.data, b.data

    def bw(g):
        return [_unbroadcast(g * b_data, a.shape), _unbroadcast(g * a_data, b.shape)]

    return _finish("mul", out, (a, b), bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("div", a, b)
    out = a.data / b.data
    a_data, b_data = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g / b_data, a.shape)
        gb = _unbroadcast(-g * a_data / (b_data * b_data), b.shape)
        return [ga, gb]

    return _finish("div", out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _finish("neg", -a.data, (a,), lambda g: [-g])


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)
    out = a.data ** p
    a_data = a.data

    def bw(g):
        return [g * p * a_data ** (p - 1.0)]

    return _finish("pow", out, (a,), bw)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)
    mask = a.data > 0

    def bw(g):
        return [g * mask]

    return _finish("relu", out, (a,), bw)


def sigmoid(a: Tensor) -> Tensor:
    # split by sign for overflow safety
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = out.astype(x.dtype, copy=False)

    def bw(g):
        return [g * out * (1.0 - out)]

    return _finish("sigmoid", out, (a,), bw)


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)
    a_data = a.data

    def bw(g):
        return [g / a_data]

    return _finish("log", out, (a,), bw)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bw(g):
        return [g * out]

    return _finish("exp", out, (a,), bw)


# ---------------------------------------------------------------------------
# reductions


def _axis_tuple(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axis_tuple(axis, a.data.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    shape = a.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes) if axes else g
        return [np.broadcast_to(g, shape).copy()]

    return _finish("sum", out, (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axis_tuple(axis, a.data.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)
    shape = a.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes) if axes else g
        return [np.broadcast_to(g, shape) / n]

    return _finish("mean", out, (a,), bw)


def variance(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Population variance (ddof 0) over the given axes."""
    axes = _axis_tuple(axis, a.data.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    mu = a.data.mean(axis=axes, keepdims=True)
    centered = a.data - mu
    out = (centered * centered).mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes) if axes else g
        return [2.0 * centered * g / n]

    return _finish("variance", out, (a,), bw)


# ---------------------------------------------------------------------------
# structural ops


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    out = a.data.reshape(shape)

    def bw(g):
        return [g.reshape(old)]

    return _finish("reshape", out, (a,), bw)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.transpose(a.data, axes)

    def bw(g):
        return [np.transpose(g, inv)]

    return _finish("transpose", out, (a,), bw)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return list(np.split(g, splits, axis=axis))

    return _finish("concat", out, tuple(tensors), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[-1] != b.shape[-2 if b.data.ndim > 1 else 0]:
        raise ShapeError(f"matmul: inner dimensions of {a.shape} and {b.shape} do not match")
    if a.data.ndim == 2 and b.data.ndim == 2 and a.shape[0] == 1:
        # keep single-row products on the same BLAS kernel as multi-row ones,
        # so a token's result does not depend on how many rows share its slab
        out = (np.concatenate([a.data, a.data]) @ b.data)[:1]
    else:
        out = a.data @ b.data
    a_data, b_data = a.data, b.data

    def bw(g):
        if a_data.ndim == 1 and b_data.ndim == 1:
            return [g * b_data, g * a_data]
        if b_data.ndim == 1:
            # (..., n) @ (n,) -> (...)
            ga = g[..., None] * b_data
            gb = np.tensordot(g, a_data, axes=(tuple(range(g.ndim)), tuple(range(a_data.ndim - 1))))
            return [ga, gb]
        if a_data.ndim == 1:
            # (n,) @ (n, m) -> (m,)
            return [g @ b_data.T, np.outer(a_data, g)]
        ga = g @ np.swapaxes(b_data, -1, -2)
        gb = np.swapaxes(a_data, -1, -2) @ g
        return [_unbroadcast(ga, a_data.shape), _unbroadcast(gb, b_data.shape)]

    return _finish("matmul", out, (a, b), bw)


# ---------------------------------------------------------------------------
# lookup / scatter


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``weight[ids]``; gradient scatter-adds into the table."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ShapeError(f"embedding-lookup: ids outside [0, {weight.shape[0]}) for table {weight.shape}")
    out = weight.data[ids]
    w_shape, w_dtype = weight.shape, weight.dtype

    def bw(g):
        gw = np.zeros(w_shape, dtype=w_dtype)
        np.add.at(gw, ids, g)
        return [gw]

    return _finish("embedding-lookup", out, (weight,), bw)


def _strictly_increasing(idx: np.ndarray) -> bool:
    return idx.ndim == 1 and (idx.size < 2 or bool(np.all(idx[1:] > idx[:-1])))


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows along axis 0."""
    idx = np.asarray(idx)
    out = a.data[idx]
    a_shape, a_dtype = a.shape, a.dtype
    unique = _strictly_increasing(idx)

    def bw(g):
        ga = np.zeros(a_shape, dtype=a_dtype)
        if unique:
            ga[idx] = g
        else:
            np.add.at(ga, idx, g)
        return [ga]

    return _finish("gather-rows", out, (a,), bw)


def scatter_rows(idx: np.ndarray, rows: Tensor, size: int) -> Tensor:
    """Place ``rows`` at positions ``idx`` of a zero array with ``size`` rows.

    Duplicate indices accumulate.
    """
    idx = np.asarray(idx)
    out = np.zeros((size,) + rows.shape[1:], dtype=rows.dtype)
    np.add.at(out, idx, rows.data)

    def bw(g):
        return [g[idx]]

    return _finish("scatter-rows", out, (rows,), bw)


def take_pairs(a: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Fancy-index a 2-D tensor at (rows[i], cols[i]) pairs."""
    rows = np.asarray(rows)
    cols = np.asarray(cols)
    out = a.data[rows, cols]
    a_shape, a_dtype = a.shape, a.dtype
    unique = _strictly_increasing(rows)

    def bw(g):
        ga = np.zeros(a_shape, dtype=a_dtype)
        if unique:
            ga[rows, cols] = g
        else:
            np.add.at(ga, (rows, cols), g)
        return [ga]

    return _finish("take-pairs", out, (a,), bw)


def combine_rows(segments: list[tuple[np.ndarray, "Tensor"]], size: int) -> Tensor:
    """Scatter-accumulate several row blocks into one array of ``size`` rows.

    Each segment is (idx, rows) with idx strictly increasing within the
    segment; segments may overlap each other. Fuses what would otherwise be a
    chain of scatter + add ops.
    """
    first = segments[0][1]
    out = np.zeros((size,) + first.shape[1:], dtype=first.dtype)
    idxs = []
    inputs = []
    for idx, rows in segments:
        idx = np.asarray(idx)
        out[idx] += rows.data
        idxs.append(idx)
        inputs.append(rows)

    def bw(g):
        return [g[idx] for idx in idxs]

    return _finish("scatter-rows", out, tuple(inputs), bw)


# ---------------------------------------------------------------------------
# fused neural-net primitives


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Softmax with row-max subtraction for overflow safety."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return [out * (g - dot)]

    return _finish("softmax", out, (a,), bw)


def layernorm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis to zero mean, unit variance (no affine)."""
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = centered * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * y).mean(axis=-1, keepdims=True)
        return [inv * (g - gm - y * gym)]

    return _finish("layer-norm", y, (a,), bw)


def cross_entropy_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean token cross-entropy in nats for integer targets.

    Accepts logits of shape (..., V); targets have the leading shape.
    """
    targets = np.asarray(targets)
    v = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise ShapeError(f"cross-entropy-with-logits: target outside [0, {v})")
    flat = logits.data.reshape(-1, v)
    tflat = targets.reshape(-1)
    m = flat.max(axis=-1, keepdims=True)
    z = flat - m
    lse = np.log(np.exp(z).sum(axis=-1))
    nll = lse - z[np.arange(flat.shape[0]), tflat]
    out = np.asarray(nll.mean(), dtype=logits.dtype)
    n = flat.shape[0]
    l_shape = logits.shape

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(n), tflat] -= 1.0
        return [(p * (g.reshape(()) / n)).reshape(l_shape)]

    return _finish("cross-entropy-with-logits", out, (logits,), bw)


# ---------------------------------------------------------------------------
# verification harness


def grad_check(f: Callable[[Tensor], Tensor], point: Tensor, epsilon: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must map a tensor to a scalar and be deterministic (fix any RNG
    before calling). Relative error per coordinate is
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    if epsilon <= 0:
        raise ValueError("grad_check: epsilon must be positive")
    x = Tensor(point.data.copy(), requires_grad=True)
    with Tape():
        out = f(x)
        if not isinstance(out, Tensor) or out.data.size != 1:
            raise GraphError("grad_check: f must return a scalar tensor")
        backward(out)
    analytic = x.grad if x.grad is not None else np.zeros_like(x.data)

    flat = point.data.reshape(-1).copy()
    numeric = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size):
            for sign in (+1.0, -1.0):
                probe = flat.copy()
                probe[i] += sign * epsilon
                val = f(Tensor(probe.reshape(point.shape), dtype=point.dtype)).item()
                if not np.isfinite(val):
                    raise NonFiniteError(f"grad_check: f non-finite at perturbed coordinate {i}")
                numeric[i] += sign * val
            numeric[i] /= 2.0 * epsilon
    numeric = numeric.reshape(point.shape)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
