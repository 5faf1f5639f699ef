"""Dense float64 tensors with a recorded reverse-mode gradient engine.

Operations only build a graph while a :class:`ComputationRecord` is active::

    with ComputationRecord() as rec:
        loss = tensor.sum(tensor.square(x))
    rec.backward(loss)
    x.grad  # -> 2 * x.data

Outside a record every op is a plain numpy evaluation, which is what
inference and metric computation use.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Shapes of operands do not agree."""


class NumericError(ArithmeticError):
    """An op produced or received NaN/Inf, or a domain was violated."""


class ContractError(ValueError):
    """A precondition on arguments was violated."""


# per-thread stack of open records
_LOCAL = threading.local()


def _active_stack() -> list["ComputationRecord"]:
    stack = getattr(_LOCAL, "stack", None)
    if stack is None:
        stack = _LOCAL.stack = []
    return stack


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node_id", "_record")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node_id: int | None = None
        self._record: ComputationRecord | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; all route through the functional ops below
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a: int, b: int):
        return swapaxes(self, a, b)


@dataclass
class _Node:
    out: Tensor
    parents: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    kind: str


@dataclass
class ComputationRecord:
    """Append-only list of recorded ops; list order is a topological order."""

    nodes: list[_Node] = field(default_factory=list)

    def __enter__(self) -> "ComputationRecord":
        _active_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_stack().remove(self)

    def append(self, out: Tensor, parents, backward, kind: str) -> Tensor:
        out.node_id = len(self.nodes)
        out._record = self
        out.requires_grad = True
        self.nodes.append(_Node(out, tuple(parents), backward, kind))
        return out

    def backward(self, root: Tensor) -> None:
        backward(self, root)


def active_record() -> ComputationRecord | None:
    stack = _active_stack()
    return stack[-1] if stack else None


def _as_tensor(a) -> Tensor:
    return a if isinstance(a, Tensor) else Tensor(a)


def _emit(value: np.ndarray, parents, backward_fn, kind: str) -> Tensor:
    out = Tensor(value)
    rec = active_record()
    if rec is not None and any(p.requires_grad for p in parents):
        rec.append(out, parents, backward_fn, kind)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, kind: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{kind}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")
    return _emit(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _emit(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _emit(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "div")
    if np.any(b.data == 0):
        raise NumericError("div: zero in denominator")
    out = a.data / b.data
    return _emit(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
        "div",
    )


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _emit(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def exp(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    if not np.all(np.isfinite(out)):
        raise NumericError("exp: overflow")
    return _emit(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(~(a.data > 0)):
        raise NumericError("log: nonpositive or NaN argument")
    return _emit(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def square(a) -> Tensor:
    a = _as_tensor(a)
    return _emit(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "relu": relu,
    "exp": exp,
    "log": log,
    "square": square,
}


def elementwise(kind: str, a, b=None) -> Tensor:
    """Dispatch by name; binary kinds require ``b``."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ContractError(f"unknown elementwise kind {kind!r}") from None
    if kind in ("add", "sub", "mul", "div"):
        if b is None:
            raise ContractError(f"{kind} needs two operands")
        return fn(a, b)
    return fn(a)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not agree")

    if b.ndim == 2:
        # shared right operand: fold leading axes into rows
        k = a.shape[-1]

        def backward_fn(g):
            ga = g @ b.data.T
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            return ga, gb

        out = (a.data.reshape(-1, k) @ b.data).reshape(a.shape[:-1] + (b.shape[1],))
        return _emit(out, (a, b), backward_fn, "matmul")

    def backward_fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _emit(np.matmul(a.data, b.data), (a, b), backward_fn, "matmul")


def linear(a, w, b) -> Tensor:
    """``a @ w + b`` with ``b`` broadcast over rows."""
    a, w, b = _as_tensor(a), _as_tensor(w), _as_tensor(b)
    if a.shape[-1] != w.shape[0] or w.ndim != 2 or b.shape != (w.shape[1],):
        raise DimensionError(f"linear: input {a.shape}, weight {w.shape}, bias {b.shape}")
    out = a.data @ w.data + b.data

    def backward_fn(g):
        flat_a = a.data.reshape(-1, a.shape[-1])
        flat_g = g.reshape(-1, g.shape[-1])
        return g @ w.data.T, flat_a.T @ flat_g, flat_g.sum(axis=0)

    return _emit(out, (a, w, b), backward_fn, "linear")


def softmax_rows(a) -> Tensor:
    """Softmax along the last axis, stabilized by subtracting the row max."""
    a = _as_tensor(a)
    if np.isnan(a.data).any():
        raise NumericError("softmax_rows: NaN input")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward_fn(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _emit(out, (a,), backward_fn, "softmax")


# ---------------------------------------------------------------- shape ops

def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}") from None
    return _emit(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = _as_tensor(a)
    return _emit(
        np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),), "swapaxes"
    )


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as err:
        raise DimensionError(f"concat: {err}") from None
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward_fn(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _emit(out, ts, backward_fn, "concat")


def take(a, index) -> Tensor:
    """Basic/advanced indexing; gradient scatters back with accumulation."""
    a = _as_tensor(a)

    def backward_fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _emit(a.data[index], (a,), backward_fn, "take")


# ---------------------------------------------------------------- reductions

def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit(np.asarray(out), (a,), backward_fn, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


def mean_pool(a) -> Tensor:
    """Mean over the token axis (second to last) of a ``[..., tokens, d]`` tensor."""
    a = _as_tensor(a)
    if a.ndim < 2 or a.shape[-2] == 0:
        raise DimensionError(f"mean_pool: need a nonempty token axis, got shape {a.shape}")
    return mean(a, axis=-2)


# ---------------------------------------------------------------- batch norm

@dataclass
class NormState:
    """Learnable scale/shift plus running statistics of one BatchNorm layer."""

    scale: Tensor
    shift: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def create(cls, d: int, momentum: float = 0.1, eps: float = 1e-5) -> "NormState":
        return cls(
            scale=Tensor(np.ones(d), requires_grad=True),
            shift=Tensor(np.zeros(d), requires_grad=True),
            running_mean=np.zeros(d),
            running_var=np.ones(d),
            momentum=momentum,
            eps=eps,
        )


def batch_norm(a, state: NormState, mode: str = "train", update_stats: bool = True) -> Tensor:
    """Normalize each feature (last axis) over all leading axes.

    For ``[batch, tokens, d]`` input the statistics pool batch and tokens.
    """
    a = _as_tensor(a)
    d = a.shape[-1]
    if state.scale.shape != (d,):
        raise DimensionError(f"batch_norm: input width {d} vs state width {state.scale.shape}")
    if mode == "eval":
        inv = 1.0 / np.sqrt(state.running_var + state.eps)
        normed = (a - state.running_mean) * inv
        return normed * state.scale + state.shift
    if mode != "train":
        raise ContractError(f"batch_norm: unknown mode {mode!r}")

    flat = a.data.reshape(-1, d)
    n = flat.shape[0]
    if n < 2:
        raise ContractError("batch_norm: degenerate batch of 1 in train mode")
    mu = flat.mean(axis=0)
    centered = flat - mu
    var = (centered**2).mean(axis=0)
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = centered * inv_std
    out = (xhat * state.scale.data + state.shift.data).reshape(a.shape)

    if update_stats:
        m = state.momentum
        state.running_mean = (1 - m) * state.running_mean + m * mu
        state.running_var = (1 - m) * state.running_var + m * var * n / (n - 1)

    def backward_fn(g):
        gf = g.reshape(-1, d)
        g_shift = gf.sum(axis=0)
        g_scale = (gf * xhat).sum(axis=0)
        gx = gf * state.scale.data
        ga = inv_std * (gx - gx.mean(axis=0) - xhat * (gx * xhat).mean(axis=0))
        return ga.reshape(a.shape), g_scale, g_shift

    return _emit(out, (a, state.scale, state.shift), backward_fn, "batch_norm")


# ---------------------------------------------------------------- backward

def backward(record: ComputationRecord, root: Tensor) -> None:
    """Fill ``.grad`` of every tensor reachable from ``root`` in ``record``."""
    if root.data.size != 1:
        raise ContractError(f"backward: root must be scalar, got shape {root.shape}")
    if root._record is not record:
        raise ContractError("backward: root does not belong to this record")

    root.grad = np.ones_like(root.data)
    for node in reversed(record.nodes[: root.node_id + 1]):
        g = node.out.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NumericError(f"backward: non-finite gradient at node {node.out.node_id} ({node.kind})")
        for parent, pg in zip(node.parents, node.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if not np.all(np.isfinite(pg)):
                raise NumericError(f"backward: non-finite gradient leaving node {node.out.node_id} ({node.kind})")
            if parent.grad is None:
                parent.grad = np.array(pg, dtype=np.float64, copy=True)
            else:
                parent.grad = parent.grad + pg
    for node in record.nodes:
        if node.out.grad is None:
            node.out.grad = np.zeros_like(node.out.data)


# ---------------------------------------------------------------- finite differences

def finite_diff_check(f: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-5) -> float:
    """Max over parameter entries of ``|analytic - central| / max(1, |central|)``.

    ``f`` is a zero-argument callable reading the current ``params`` values.
    Returns ``inf`` if any derivative is NaN.
    """
    if step <= 0:
        raise ContractError("finite_diff_check: step must be positive")
    for p in params:
        p.requires_grad = True
        p.zero_grad()
    with ComputationRecord() as rec:
        loss = f()
    try:
        rec.backward(loss)
    except NumericError:
        return math.inf
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = float(f().data)
            flat[i] = orig - step
            down = float(f().data)
            flat[i] = orig
            central = (up - down) / (2.0 * step)
            err = abs(gflat[i] - central) / max(1.0, abs(central))
            if math.isnan(err):
                return math.inf
            worst = max(worst, err)
    return worst


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)
