"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations executed while a :class:`Tape` is active are recorded on it when at
least one input requires a gradient.  :func:`backward` replays the tape in
reverse and accumulates into every reachable :class:`Parameter`.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class GradientError(RuntimeError):
    """Raised when backward cannot run (non-scalar loss, loss not on tape)."""


class Tensor:
    __slots__ = ("data", "requires_grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, Tensor(-1.0))


class Parameter(Tensor):
    """Trainable leaf tensor; ``grad`` accumulates across backward passes."""

    __slots__ = ("grad", "name")

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.grad = np.zeros_like(self.data)
        self.name = name

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def zero_grad(params: Sequence[Parameter]) -> None:
    for p in params:
        p.zero_grad()


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --------------------------------------------------------------------------
# tape


@dataclass
class Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    name: str


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; tapes nest per thread and only the innermost
    one records.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape stack corrupted")
        stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def op_names(self) -> list[str]:
        return [n.name for n in self.nodes]


_local = threading.local()


def _tape_stack() -> list[Tape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def record(name: str, out_data: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    """Wrap ``out_data`` and record it if any input needs a gradient."""
    if not np.all(np.isfinite(out_data)):
        raise FloatingPointError(f"{name} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = False
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(Node(out, tuple(inputs), vjp, name))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    if loss.size != 1:
        raise GradientError(f"loss must be scalar, got shape {loss.shape}")
    if not any(node.out is loss for node in tape.nodes):
        raise GradientError("loss was not produced on this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            if isinstance(inp, Parameter):
                inp.grad += gi
            else:
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi


# --------------------------------------------------------------------------
# elementwise


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _unbroadcast(g: np.ndarray, t: Tensor) -> np.ndarray:
    # scalar-vs-tensor is the only broadcasting allowed
    if t.shape == g.shape:
        return g
    return np.array([g.sum()]).reshape(t.shape)


def elementwise(op: str, a: Tensor, b: Tensor) -> Tensor:
    if op == "add":
        return add(a, b)
    if op == "sub":
        return sub(a, b)
    if op == "mul":
        return mul(a, b)
    raise ValueError(f"unknown elementwise op {op!r}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same("add", a, b)
    return record("add", a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same("sub", a, b)
    return record("sub", a.data - b.data, (a, b),
                  lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same("mul", a, b)
    ad, bd = a.data, b.data
    return record("mul", ad * bd, (a, b),
                  lambda g: (_unbroadcast(g * bd, a), _unbroadcast(g * ad, b)))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(t: Tensor) -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise FloatingPointError("sigmoid: non-finite input")
    s = _sigmoid(t.data)
    return record("sigmoid", s, (t,), lambda g: (g * s * (1.0 - s),))


def relu(t: Tensor) -> Tensor:
    mask = t.data > 0
    return record("relu", t.data * mask, (t,), lambda g: (g * mask,))


def reshape(t: Tensor, shape: Sequence[int]) -> Tensor:
    src = t.shape
    return record("reshape", t.data.reshape(shape), (t,), lambda g: (g.reshape(src),))


def transpose(t: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return record("transpose", np.ascontiguousarray(t.data.transpose(axes)), (t,),
                  lambda g: (g.transpose(inv),))


def concat(ts: Sequence[Tensor], axis: int) -> Tensor:
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return record("concat", np.concatenate([t.data for t in ts], axis=axis), tuple(ts), vjp)


def tensor_sum(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = t.shape
    out = t.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g.reshape(()), src).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, src).copy(),)

    return record("sum", np.asarray(out, dtype=np.float64), (t,), vjp)


def mean(t: Tensor) -> Tensor:
    n = t.size
    return record("mean", np.array([t.data.mean()]), (t,),
                  lambda g: (np.full(t.shape, g.reshape(-1)[0] / n),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes (no broadcasting)."""
    if a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return record("matmul", ad @ bd, (a, b),
                  lambda g: (g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g))


def softmax(t: Tensor, axis: int = -1) -> Tensor:
    z = t.data - t.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return record("softmax", s, (t,), vjp)


def log_softmax(t: Tensor, axis: int = -1) -> Tensor:
    z = t.data - t.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def vjp(g):
        return (g - s * g.sum(axis=axis, keepdims=True),)

    return record("log_softmax", out, (t,), vjp)


def take_along(t: Tensor, index: np.ndarray, axis: int = -1) -> Tensor:
    """Select one element per slice along ``axis`` (index has that axis dropped)."""
    idx = np.expand_dims(np.asarray(index, dtype=np.int64), axis)
    out = np.take_along_axis(t.data, idx, axis=axis)

    def vjp(g):
        full = np.zeros_like(t.data)
        np.put_along_axis(full, idx, g, axis=axis)
        return (full,)

    return record("take_along", np.squeeze(out, axis=axis), (t,), lambda g: vjp(np.expand_dims(g, axis)))


def smooth_l1(t: Tensor) -> Tensor:
    x = t.data
    ax = np.abs(x)
    small = ax < 1.0
    out = np.where(small, 0.5 * x * x, ax - 0.5)
    return record("smooth_l1", out, (t,), lambda g: (g * np.where(small, x, np.sign(x)),))


def expand_channels(t: Tensor, channels: int) -> Tensor:
    """Repeat a single-channel map (axis -3) ``channels`` times."""
    if t.shape[-3] != 1:
        raise ShapeError(f"expand_channels needs one channel, got shape {t.shape}")
    reps = [1] * t.ndim
    reps[-3] = channels
    return record("expand_channels", np.tile(t.data, reps), (t,),
                  lambda g: (g.sum(axis=-3, keepdims=True),))


# --------------------------------------------------------------------------
# gradient oracle


def finite_difference(f: Callable[[Tensor], Tensor | float], t: Tensor, h: float = 1e-5) -> Tensor:
    """Central-difference gradient of scalar ``f`` at ``t``."""
    base = np.array(t.data, dtype=np.float64)
    out = np.empty_like(base)
    flat = out.reshape(-1)
    for i in range(base.size):
        x = base.copy()
        x.reshape(-1)[i] += h
        fp = _scalar(f(Tensor(x)))
        x.reshape(-1)[i] -= 2 * h
        fm = _scalar(f(Tensor(x)))
        flat[i] = (fp - fm) / (2 * h)
    return Tensor(out)


def _scalar(v) -> float:
    val = v.item() if isinstance(v, Tensor) else float(v)
    if not np.isfinite(val):
        raise FloatingPointError("finite_difference: non-finite function value")
    return val


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray,
                       zero_tol: float = 1e-8) -> tuple[float, float]:
    """Return (max relative error, max absolute error on near-zero entries)."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    near = np.abs(a) < zero_tol
    rel = np.abs(a - n)[~near] / np.abs(a[~near])
    absd = np.abs(a - n)[near]
    return (float(rel.max()) if rel.size else 0.0, float(absd.max()) if absd.size else 0.0)
