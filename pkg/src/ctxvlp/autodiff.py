"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations executed inside an active :class:`Tape` are recorded when at least
one input is trainable or was itself recorded on that tape.  Outside a tape the
same functions simply compute values, which is what inference paths use.

    >>> w = DiffTensor([1.0, 2.0], trainable=True)
    >>> with Tape() as tape:
    ...     loss = sum_(mul(w, w))
    ...     grads = tape.backward(loss)
    >>> grads[w]
    array([2., 4.])
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "DiffTensor", "Tape", "NumericError", "DimensionError", "ContractError",
    "add", "sub", "mul", "div", "neg", "scale", "exp", "log", "clip", "sum_", "mean",
    "matmul", "transpose", "reshape", "concat", "split", "index", "take",
    "softmax", "log_softmax", "layer_norm", "gelu", "sigmoid", "l2_normalize",
    "grad_check", "no_tape",
]

LOG_FLOOR = 1e-30


class NumericError(ArithmeticError):
    """Raised on non-finite inputs or values outside an operation's domain."""


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class ContractError(ValueError):
    """Raised when a caller violates a precondition (e.g. non-scalar loss)."""


_state = threading.local()

# op name -> multiplier applied to that op's input gradients; fault injection only
_FAULTS: dict[str, float] = {}


def _active_tape() -> "Tape | None":
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class DiffTensor:
    """An n-dimensional float64 array that can take part in differentiation."""

    __slots__ = ("values", "grad", "trainable", "node_id", "name", "_tape", "__weakref__")
    __array_priority__ = 100

    def __init__(self, values, trainable: bool = False, name: str | None = None):
        arr = np.array(values, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.values = arr
        self.grad: np.ndarray | None = None
        self.trainable = trainable
        self.node_id: int | None = None
        self.name = name
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def T(self) -> "DiffTensor":
        return transpose(self)

    def item(self) -> float:
        return float(self.values.reshape(-1)[0]) if self.values.size == 1 else float(self.values)

    def numpy(self) -> np.ndarray:
        return self.values

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"DiffTensor(shape={self.shape}{tag}, trainable={self.trainable})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)


class _Record:
    __slots__ = ("op", "out_id", "parent_ids", "backward", "leaf")

    def __init__(self, op, out_id, parent_ids, backward, leaf=None):
        self.op = op
        self.out_id = out_id
        self.parent_ids = parent_ids
        self.backward = backward
        self.leaf = leaf


class Tape:
    """Ordered record of primitive operations for one forward/backward pass.

    Records are appended in execution order, so the list is topologically
    sorted and backward is a plain reverse sweep.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_state, "stack", None)
        if stack is None:
            stack = _state.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def tracks(self, t: DiffTensor) -> bool:
        return t._tape is self or t.trainable

    def _node(self, t: DiffTensor) -> int:
        if t._tape is not self:
            # first use of a trainable leaf on this tape
            t._tape = self
            t.node_id = len(self.records)
            self.records.append(_Record("leaf", t.node_id, (), None, leaf=t))
        return t.node_id

    def record(self, op: str, out: DiffTensor, parents: Sequence[DiffTensor], backward) -> None:
        parent_ids = tuple(self._node(p) if self.tracks(p) else None for p in parents)
        out._tape = self
        out.node_id = len(self.records)
        self.records.append(_Record(op, out.node_id, parent_ids, backward))

    def backward(self, loss: DiffTensor) -> dict[DiffTensor, np.ndarray]:
        """Propagate d(loss)/d(.) to every trainable leaf reached from ``loss``.

        Leaf gradients are stored on ``leaf.grad`` and also returned.
        """
        if loss.values.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise ContractError("loss was not recorded on this tape")
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.values)}
        result: dict[DiffTensor, np.ndarray] = {}
        for rec in reversed(self.records):
            g = grads.pop(rec.out_id, None)
            if g is None:
                continue
            if rec.leaf is not None:
                rec.leaf.grad = g
                result[rec.leaf] = g
                continue
            parent_grads = rec.backward(g)
            fault = _FAULTS.get(rec.op)
            for pid, pg in zip(rec.parent_ids, parent_grads):
                if pid is None or pg is None:
                    continue
                if fault is not None:
                    pg = pg * fault
                prev = grads.get(pid)
                grads[pid] = pg if prev is None else prev + pg
        return result


class no_tape:
    """Context manager that suspends recording (inference scope)."""

    def __enter__(self):
        stack = getattr(_state, "stack", None)
        self._saved = list(stack) if stack else []
        _state.stack = []
        return self

    def __exit__(self, *exc):
        _state.stack = self._saved


def _t(x) -> DiffTensor:
    return x if isinstance(x, DiffTensor) else DiffTensor(x)


def _out(op: str, values: np.ndarray, parents: Sequence[DiffTensor], backward) -> DiffTensor:
    out = DiffTensor.__new__(DiffTensor)
    out.values = values
    out.grad = None
    out.trainable = False
    out.node_id = None
    out.name = None
    out._tape = None
    tape = _active_tape()
    if tape is not None and any(tape.tracks(p) for p in parents):
        tape.record(op, out, parents, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(a: DiffTensor, b: DiffTensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> DiffTensor:
    a, b = _t(a), _t(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _out("add", a.values + b.values, (a, b),
                lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> DiffTensor:
    a, b = _t(a), _t(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _out("sub", a.values - b.values, (a, b),
                lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> DiffTensor:
    a, b = _t(a), _t(b)
    _broadcast_shape(a, b, "mul")
    av, bv = a.values, b.values
    return _out("mul", av * bv, (a, b),
                lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b) -> DiffTensor:
    a, b = _t(a), _t(b)
    _broadcast_shape(a, b, "div")
    av, bv = a.values, b.values
    out = av / bv
    return _out("div", out, (a, b),
                lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)))


def neg(a) -> DiffTensor:
    a = _t(a)
    return _out("neg", -a.values, (a,), lambda g: (-g,))


def scale(a, c: float) -> DiffTensor:
    a = _t(a)
    c = float(c)
    return _out("scale", a.values * c, (a,), lambda g: (g * c,))


def exp(a) -> DiffTensor:
    a = _t(a)
    out = np.exp(a.values)
    return _out("exp", out, (a,), lambda g: (g * out,))


def log(a) -> DiffTensor:
    a = _t(a)
    v = a.values
    if not np.all(np.isfinite(v)) or np.any(v <= 0):
        raise NumericError("log of non-positive or non-finite value")
    return _out("log", np.log(v), (a,), lambda g: (g / v,))


def clip(a, lo: float, hi: float) -> DiffTensor:
    """Clamp to [lo, hi]; gradient passes only where the input was inside."""
    a = _t(a)
    v = a.values
    inside = (v >= lo) & (v <= hi)
    return _out("clip", np.clip(v, lo, hi), (a,), lambda g: (g * inside,))


def sigmoid(a) -> DiffTensor:
    a = _t(a)
    v = a.values
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return _out("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> DiffTensor:
    """Tanh-approximated GELU."""
    a = _t(a)
    x = a.values
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th ** 2) * dinner),)

    return _out("gelu", out, (a,), backward)


# ---------------------------------------------------------------- reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims: bool = False) -> DiffTensor:
    a = _t(a)
    shape = a.shape
    axes = _norm_axis(axis, a.ndim)
    out = a.values.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _out("sum", np.asarray(out, dtype=np.float64), (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> DiffTensor:
    a = _t(a)
    axes = _norm_axis(axis, a.ndim)
    n = 1
    for ax in axes:
        n *= a.shape[ax]
    return scale(sum_(a, axis=axes, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> DiffTensor:
    """Matrix product over the last two axes.

    ``b`` may be a plain matrix shared across the leading (batch) axes of ``a``,
    or carry the same batch axes as ``a``.
    """
    a, b = _t(a), _t(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch axes differ, {a.shape} and {b.shape}")
    av, bv = a.values, b.values
    out = av @ bv

    if bv.ndim == 2:
        def backward(g):
            ga = g @ bv.T
            gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb
    else:
        def backward(g):
            return g @ np.swapaxes(bv, -1, -2), np.swapaxes(av, -1, -2) @ g

    return _out("matmul", out, (a, b), backward)


def transpose(a, axes: Sequence[int] | None = None) -> DiffTensor:
    """Permute axes; by default swap the last two."""
    a = _t(a)
    if axes is None:
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _out("transpose", np.transpose(a.values, axes), (a,),
                lambda g: (np.transpose(g, inv),))


def reshape(a, shape: Sequence[int]) -> DiffTensor:
    a = _t(a)
    old = a.shape
    try:
        out = a.values.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {old} as {tuple(shape)}") from None
    return _out("reshape", out, (a,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence, axis: int = 0) -> DiffTensor:
    ts = [_t(x) for x in tensors]
    if not ts:
        raise DimensionError("concat: nothing to concatenate")
    ax = axis % ts[0].ndim
    ref = ts[0].shape
    for x in ts[1:]:
        if x.ndim != len(ref) or any(x.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise DimensionError(f"concat: incompatible shapes {ref} and {x.shape} on axis {ax}")
    bounds = np.cumsum([0] + [x.shape[ax] for x in ts])

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(ts)))

    return _out("concat", np.concatenate([x.values for x in ts], axis=ax), ts, backward)


def index(a, idx) -> DiffTensor:
    """Numpy-style indexing (basic or advanced) with scatter-add backward."""
    a = _t(a)
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _out("index", np.array(a.values[idx], dtype=np.float64), (a,), backward)


def split(a, sizes: Sequence[int], axis: int = 0) -> list[DiffTensor]:
    a = _t(a)
    ax = axis % a.ndim
    if sum(sizes) != a.shape[ax]:
        raise DimensionError(f"split: sizes {list(sizes)} do not cover axis of length {a.shape[ax]}")
    pieces, start = [], 0
    for n in sizes:
        sl = [slice(None)] * a.ndim
        sl[ax] = slice(start, start + n)
        pieces.append(index(a, tuple(sl)))
        start += n
    return pieces


def take(a, indices, axis: int = 0) -> DiffTensor:
    """Gather slices of ``a`` along ``axis`` (embedding lookup, row repetition)."""
    a = _t(a)
    idx = np.asarray(indices, dtype=np.int64)
    ax = axis % a.ndim
    shape = a.shape
    if idx.size and (idx.min() < 0 or idx.max() >= shape[ax]):
        raise IndexError(f"take: index out of range for axis {ax} of length {shape[ax]}")

    def backward(g):
        full = np.zeros(shape)
        moved = np.moveaxis(full, ax, 0)
        gm = np.moveaxis(g, list(range(ax, ax + idx.ndim)), list(range(idx.ndim)))
        np.add.at(moved, idx, gm)
        return (full,)

    return _out("take", np.take(a.values, idx, axis=ax), (a,), backward)


# ---------------------------------------------------------------- normalisation

def softmax(a, axis: int = -1) -> DiffTensor:
    a = _t(a)
    v = a.values
    if not np.all(np.isfinite(v)):
        raise NumericError("softmax of non-finite input")
    e = np.exp(v - v.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)
    return _out("softmax", out, (a,),
                lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def log_softmax(a, axis: int = -1) -> DiffTensor:
    a = _t(a)
    v = a.values
    if not np.all(np.isfinite(v)):
        raise NumericError("log_softmax of non-finite input")
    shifted = v - v.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)
    return _out("log_softmax", out, (a,),
                lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def layer_norm(x, gain, bias, eps: float = 1e-5) -> DiffTensor:
    """Normalise over the last axis, then apply ``gain * x_hat + bias``."""
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    x, gain, bias = _t(x), _t(gain), _t(bias)
    v = x.values
    d = v.shape[-1]
    mu = v.mean(axis=-1, keepdims=True)
    xc = v - mu
    inv = 1.0 / np.sqrt((xc ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gv = gain.values

    def backward(g):
        gx = g * gv
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        lead = g.reshape(-1, d)
        return dx, (lead * xhat.reshape(-1, d)).sum(axis=0), lead.sum(axis=0)

    return _out("layer_norm", xhat * gv + bias.values, (x, gain, bias), backward)


def l2_normalize(a, axis: int = -1, eps: float = 1e-12) -> DiffTensor:
    """Divide by the L2 norm along ``axis``; the norm is floored at ``eps``."""
    a = _t(a)
    v = a.values
    norm = np.sqrt((v ** 2).sum(axis=axis, keepdims=True))
    floored = norm < eps
    denom = np.where(floored, eps, norm)
    out = v / denom

    def backward(g):
        proj = np.where(floored, 0.0, (g * out).sum(axis=axis, keepdims=True))
        return ((g - out * proj) / denom,)

    return _out("l2_normalize", out, (a,), backward)


# ---------------------------------------------------------------- verification

def grad_check(fn: Callable[[], DiffTensor], params: Iterable[DiffTensor], step: float = 1e-5,
               max_coords: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Largest relative error between tape gradients and central differences.

    ``fn`` builds a scalar from ``params`` (which are perturbed in place).
    Relative error per coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``.
    With ``max_coords`` only a random subset of coordinates per parameter is probed.
    """
    if step <= 0:
        raise ContractError("grad_check step must be positive")
    params = list(params)
    with Tape() as tape:
        loss = fn()
        grads = tape.backward(loss)
    worst = 0.0
    for p in params:
        analytic = grads.get(p, np.zeros_like(p.values)).reshape(-1)
        flat = p.values.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = (rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + step
            with no_tape():
                f_plus = fn().item()
            flat[c] = orig - step
            with no_tape():
                f_minus = fn().item()
            flat[c] = orig
            numeric = (f_plus - f_minus) / (2 * step)
            a = analytic[c]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
