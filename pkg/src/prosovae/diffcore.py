"""Reverse-mode autodiff over dense float64 tensors.

Every trainable computation in this package is expressed through the ops
here.  The design is a dynamic tape: each op records its parents and a
vector-Jacobian closure on the output tensor, and ``backward`` replays the
tape in reverse topological order, visiting each node exactly once.

Contracts:
  * all data is float64; gradients always have the shape of their tensor
  * broadcasting is restricted to trailing-dimension expansion (the smaller
    operand's shape must be a suffix of the larger's); anything else raises
  * ``backward`` accumulates into ``.grad`` additively, so calling it twice
    doubles gradients; use ``zero_grad`` or the non-mutating ``grad`` to get
    fresh values
  * forward is pure: no op mutates its inputs
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when op inputs have incompatible shapes."""


class GradientError(RuntimeError):
    """Raised on invalid backward requests or non-finite gradient checks."""


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Tensor:
    """A dense float64 array plus the tape metadata needed for backward."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _vjp=None, op="leaf"):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in _parents)
        self.op = op
        self._parents: tuple[Tensor, ...] = _parents if self.requires_grad else ()
        self._vjp: Callable[[np.ndarray], tuple] | None = _vjp if self.requires_grad else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __pow__(self, p):
        return pow_const(self, p)

    def __getitem__(self, idx):
        return take(self, idx)

    # -- backward -------------------------------------------------------

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every requires_grad tensor.

        ``self`` must hold a single value.  Gradients add across calls.
        """
        grads = _backprop(self)
        for node, g in grads.items():
            if node.grad is None:
                node.grad = g.copy()
            else:
                node.grad = node.grad + g

    def zero_grad(self) -> None:
        self.grad = None


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# broadcasting (trailing dimensions only)


def _broadcast_result(op: str, a: np.ndarray, b: np.ndarray) -> tuple[int, ...]:
    sa, sb = a.shape, b.shape
    if sa == sb:
        return sa
    if len(sa) >= len(sb) and sa[len(sa) - len(sb):] == sb:
        return sa
    if len(sb) > len(sa) and sb[len(sb) - len(sa):] == sa:
        return sb
    raise ShapeError(f"{op}: shape {sa} does not trailing-broadcast with {sb}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over the leading axes introduced by broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    return g


# ---------------------------------------------------------------------------
# primitive ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_result("add", a.data, b.data)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor(out, _parents=(a, b), _vjp=vjp, op="add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_result("sub", a.data, b.data)
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor(out, _parents=(a, b), _vjp=vjp, op="sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_result("mul", a.data, b.data)
    out = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor(out, _parents=(a, b), _vjp=vjp, op="mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_result("div", a.data, b.data)
    out = a.data / b.data

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return Tensor(out, _parents=(a, b), _vjp=vjp, op="div")


def neg(a: Tensor) -> Tensor:
    return Tensor(-a.data, _parents=(a,), _vjp=lambda g: (-g,), op="neg")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul: expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor(out, _parents=(a, b), _vjp=vjp, op="matmul")


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return Tensor(y, _parents=(a,), _vjp=lambda g: (g * (1.0 - y * y),), op="tanh")


def sigmoid(a: Tensor) -> Tensor:
    y = _stable_sigmoid(a.data)
    return Tensor(y, _parents=(a,), _vjp=lambda g: (g * y * (1.0 - y),), op="sigmoid")


def softplus(a: Tensor) -> Tensor:
    y = np.logaddexp(0.0, a.data)
    return Tensor(y, _parents=(a,), _vjp=lambda g: (g * _stable_sigmoid(a.data),), op="softplus")


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return Tensor(y, _parents=(a,), _vjp=lambda g: (g * y,), op="exp")


def expm1(a: Tensor) -> Tensor:
    y = np.expm1(a.data)
    return Tensor(y, _parents=(a,), _vjp=lambda g: (g * np.exp(a.data),), op="expm1")


def log(a: Tensor) -> Tensor:
    y = np.log(a.data)
    return Tensor(y, _parents=(a,), _vjp=lambda g: (g / a.data,), op="log")


def pow_const(a: Tensor, p: float) -> Tensor:
    p = float(p)
    y = a.data ** p

    def vjp(g):
        return (g * p * a.data ** (p - 1.0),)

    return Tensor(y, _parents=(a,), _vjp=vjp, op=f"pow{p}")


def tsum(a: Tensor, axis: int | None = None) -> Tensor:
    out = a.data.sum(axis=axis)

    def vjp(g):
        if axis is None:
            return (np.full(a.shape, g),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return Tensor(out, _parents=(a,), _vjp=vjp, op="sum")


def tmean(a: Tensor, axis: int | None = None) -> Tensor:
    count = a.size if axis is None else a.shape[axis]
    out = a.data.mean(axis=axis)

    def vjp(g):
        if axis is None:
            return (np.full(a.shape, g / count),)
        return (np.broadcast_to(np.expand_dims(g / count, axis), a.shape).copy(),)

    return Tensor(out, _parents=(a,), _vjp=vjp, op="mean")


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("concat: needs at least one input")
    out = np.concatenate([p.data for p in parts], axis=axis)
    widths = [p.shape[axis] for p in parts]

    def vjp(g):
        grads = []
        start = 0
        for w in widths:
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(start, start + w)
            grads.append(g[tuple(sl)])
            start += w
        return tuple(grads)

    return Tensor(out, _parents=tuple(parts), _vjp=vjp, op="concat")


def take(a: Tensor, idx) -> Tensor:
    """Basic slicing / integer indexing with gradient scatter-add."""
    out = a.data[idx]

    def vjp(g):
        full = np.zeros(a.shape)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor(np.array(out, copy=True), _parents=(a,), _vjp=vjp, op="take")


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return Tensor(out, _parents=(a,), _vjp=lambda g: (g.reshape(a.shape),), op="reshape")


# ---------------------------------------------------------------------------
# backward engine


def trace(output: Tensor) -> list[Tensor]:
    """Topological order (parents first) of the requires_grad subgraph."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(output, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _backprop(output: Tensor) -> dict:
    if output.size != 1:
        raise GradientError(f"backward: output must be scalar, got shape {output.shape}")
    if not output.requires_grad:
        return {}
    order = trace(output)
    acc: dict[int, np.ndarray] = {id(output): np.ones(output.shape)}
    nodes: dict[int, Tensor] = {id(n): n for n in order}
    for node in reversed(order):
        g = acc.get(id(node))
        if g is None or node._vjp is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if not parent.requires_grad:
                continue
            pid = id(parent)
            if pid in acc:
                acc[pid] = acc[pid] + pg
            else:
                acc[pid] = pg
    return {nodes[i]: g for i, g in acc.items()}


def grad(output: Tensor, inputs: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of a scalar output w.r.t. ``inputs``, without touching ``.grad``."""
    grads = _backprop(output)
    return [np.asarray(grads.get(t, np.zeros(t.shape))) for t in inputs]


def zero_grad(tensors) -> None:
    for t in tensors:
        t.grad = None


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps the input tensors to a scalar tensor.  Error per coordinate is
    |analytic - numeric| / (|numeric| + 1e-8); the max over all coordinates of
    all inputs is returned.  Raises ``GradientError`` on non-finite values.
    """
    if step <= 0:
        raise ValueError("grad_check: step must be positive")
    inputs = list(inputs)
    out = f(*inputs)
    analytic = grad(out, inputs)
    if any(not np.all(np.isfinite(g)) for g in analytic):
        raise GradientError("grad_check: non-finite analytic gradient")

    def eval_at(datas) -> float:
        ts = [Tensor(d, requires_grad=t.requires_grad) for d, t in zip(datas, inputs)]
        return float(f(*ts).data)

    base = [t.data.copy() for t in inputs]
    max_err = 0.0
    for i, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        flat = base[i].reshape(-1)
        gflat = analytic[i].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            fp = eval_at(base)
            flat[j] = orig - step
            fm = eval_at(base)
            flat[j] = orig
            numeric = (fp - fm) / (2.0 * step)
            if not np.isfinite(numeric):
                raise GradientError("grad_check: non-finite numeric gradient")
            err = abs(gflat[j] - numeric) / (abs(numeric) + 1e-8)
            max_err = max(max_err, err)
    return max_err
