"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the operations needed by the fusion layer and the toy backbone are
provided. Every op records its parents and a backward closure on the output
tensor; :func:`build_tape` linearises the graph reachable from a loss into a
topologically ordered :class:`Tape`, and :func:`backward` replays it in
reverse.
"""

from __future__ import annotations

import contextlib
import contextvars
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np
from scipy.special import erf

DTYPE = np.float64

_ids = itertools.count()

# Instrumentation hooks. Context variables keep concurrent tapes independent.
_mac_counter: contextvars.ContextVar[list[int] | None] = contextvars.ContextVar(
    "mac_counter", default=None
)
_corrupted: contextvars.ContextVar[frozenset[str]] = contextvars.ContextVar(
    "corrupted_backward", default=frozenset()
)


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class UsageError(RuntimeError):
    pass


class Tensor:
    """A dense array of float64 values that remembers how it was produced."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "op", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE)  # always a private copy
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id = next(_ids)
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item()

    def is_valid(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, op={self.op})"

    # operator sugar
    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _raise_item():
    raise UsageError("item() requires a single-element tensor")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _result(data: np.ndarray, op: str, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    out.node_id = next(_ids)
    out.op = op
    out.name = None
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=DTYPE).reshape(t.shape)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot combine shapes {a.shape} and {b.shape}") from None


def _is_corrupted(op: str) -> bool:
    return op in _corrupted.get()


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _result(a.data + b.data, "add", (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _result(a.data - b.data, "sub", (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b)

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, "mul", (a, b), backward)


def scale(a: Tensor, k: float) -> Tensor:
    def backward(g):
        _accumulate(a, g * k)

    return _result(a.data * k, "scale", (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    # split by sign so exp never overflows
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g):
        _accumulate(a, g * out * (1.0 - out))

    return _result(out, "sigmoid", (a,), backward)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    bad = _is_corrupted("tanh")

    def backward(g):
        d = 1.0 - out * out
        _accumulate(a, g * d * (1.1 if bad else 1.0))

    return _result(out, "tanh", (a,), backward)


def log_shifted(a: Tensor, eps: float) -> Tensor:
    """Elementwise ``log(a + eps)``; every entry must exceed ``-eps``."""
    shifted = a.data + eps
    if np.any(shifted <= 0):
        raise DomainError(f"log_shifted needs inputs > -{eps}")
    out = np.log(shifted)

    def backward(g):
        _accumulate(a, g / shifted)

    return _result(out, "log_shifted", (a,), backward)


def gelu(a: Tensor) -> Tensor:
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    out = x * cdf

    def backward(g):
        pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
        _accumulate(a, g * (cdf + x * pdf))

    return _result(out, "gelu", (a,), backward)


def square(a: Tensor) -> Tensor:
    return mul(a, a)


# ---------------------------------------------------------------- reductions


def sum_all(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _result(np.array(a.data.sum()), "sum", (a,), backward)


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.size)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., m, k] @ b[k, p]`` or ``a[..., m, k] @ b[..., k, p]`` with equal batch dims."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul operands need at least two dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"inner extents differ: {a.shape} @ {b.shape}")
    if b.data.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise ShapeError(f"batch extents differ: {a.shape} @ {b.shape}")

    counter = _mac_counter.get()
    if counter is not None:
        counter[0] += int(np.prod(a.shape[:-1])) * a.shape[-1] * b.shape[-1]

    out = np.matmul(a.data, b.data)

    def backward(g):
        _accumulate(a, np.matmul(g, np.swapaxes(b.data, -1, -2)))
        if b.requires_grad:
            if b.data.ndim == 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, b.shape[-1])
            else:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            _accumulate(b, gb)

    return _result(out, "matmul", (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if weight.data.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not fit weight {weight.shape}")
    if x.data.ndim == 1:
        y = reshape(matmul(reshape(x, (1, -1)), weight), (weight.shape[1],))
    else:
        y = matmul(x, weight)
    if bias is None:
        return y
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear: bias {bias.shape} does not fit weight {weight.shape}")
    return add(y, bias)


def softmax_lastdim(x: Tensor) -> Tensor:
    if x.data.ndim == 0 or x.shape[-1] < 1:
        raise ShapeError("softmax needs a non-empty last axis")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        _accumulate(x, s * (g - (g * s).sum(axis=-1, keepdims=True)))

    return _result(s, "softmax", (x,), backward)


# ---------------------------------------------------------------- layout


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if shape.count(-1) == 1:
        known = int(np.prod([s for s in shape if s != -1]))
        if known and x.size % known == 0:
            shape = tuple(x.size // known if s == -1 else s for s in shape)
    if int(np.prod(shape)) != x.size or min(shape, default=0) < 0:
        raise ShapeError(f"cannot reshape {x.shape} into {shape}")
    old = x.shape

    def backward(g):
        _accumulate(x, g.reshape(old))

    return _result(x.data.reshape(shape), "reshape", (x,), backward)


def transpose_last2(x: Tensor) -> Tensor:
    if x.data.ndim < 2:
        raise ShapeError("transpose_last2 needs at least two dimensions")

    def backward(g):
        _accumulate(x, np.swapaxes(g, -1, -2))

    return _result(np.swapaxes(x.data, -1, -2).copy(), "transpose", (x,), backward)


# ---------------------------------------------------------------- tape


@dataclass
class Tape:
    """Topologically ordered record of the operations that produced an output."""

    nodes: list[Tensor] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self.nodes)

    def is_topological(self) -> bool:
        position = {t.node_id: i for i, t in enumerate(self.nodes)}
        return all(
            position[p.node_id] < position[t.node_id]
            for t in self.nodes
            for p in t._parents
        )


def build_tape(output: Tensor) -> Tape:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for p in node._parents:
            if p.node_id not in seen:
                stack.append((p, False))
    return Tape(order)


def backward(loss: Tensor, params: Iterable[Tensor] = ()) -> Tape:
    """Fill ``.grad`` on every tensor that ``loss`` depends on.

    Gradients are recomputed from scratch on each call, not accumulated.

    Parameters listed in ``params`` that the loss does not reach get a zero
    gradient rather than ``None``.
    """
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    params = list(params)
    for p in params:
        p.grad = None
    tape = build_tape(loss)
    for node in tape:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
    return tape


def sgd_step(params: Iterable[Tensor], lr: float) -> None:
    params = list(params)
    for p in params:
        if p.grad is None:
            raise UsageError(f"parameter {p!r} has no gradient; run backward first")
    for p in params:
        p.data -= lr * p.grad
        p.grad = None


# ---------------------------------------------------------------- instrumentation


@contextlib.contextmanager
def count_macs() -> Iterator[list[int]]:
    """Count multiply-accumulates done by :func:`matmul` inside the block.

    Yields a one-element list whose entry is updated in place.
    """
    box = [0]
    token = _mac_counter.set(box)
    try:
        yield box
    finally:
        _mac_counter.reset(token)


@contextlib.contextmanager
def corrupted_backward(*ops: str) -> Iterator[None]:
    """Deliberately break the backward rule of ``ops``; negative control for gradchecks."""
    token = _corrupted.set(frozenset(ops))
    try:
        yield
    finally:
        _corrupted.reset(token)
