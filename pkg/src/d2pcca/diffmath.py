"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every network and objective in the package is written against this module.
A :class:`Tape` records primitive operations while it is active::

    with Tape() as tape:
        loss = square_norm(matmul(x, w))
    (gw,) = tape.backward(loss, [w])

Broadcasting is deliberately narrow: two operands of an elementwise op must
have equal shapes, or the shape of one must be a trailing suffix of the other
(a leading batch axis), or one must be a scalar.
"""

from __future__ import annotations

import threading
from collections.abc import Callable, Sequence
from dataclasses import dataclass

import numpy as np

from d2pcca.errors import DomainError, NumericalError, ShapeError

__all__ = [
    "Tensor",
    "Tape",
    "Node",
    "parameter",
    "constant",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "concat",
    "take",
    "embed",
    "take_rows",
    "sum",
    "mean",
    "sigmoid",
    "tanh",
    "relu",
    "softplus",
    "exp",
    "log",
    "sqrt",
    "square_norm",
    "clip",
    "grad_check",
]


class Tensor:
    """A float64 array plus the bookkeeping needed to differentiate through it."""

    __slots__ = ("data", "requires_grad", "name")
    __array_priority__ = 1000  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim and 0 in arr.shape:
            raise ShapeError(f"tensor shape must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    __add__ = lambda self, o: add(self, o)  # noqa: E731
    __radd__ = lambda self, o: add(o, self)  # noqa: E731
    __sub__ = lambda self, o: sub(self, o)  # noqa: E731
    __rsub__ = lambda self, o: sub(o, self)  # noqa: E731
    __mul__ = lambda self, o: mul(self, o)  # noqa: E731
    __rmul__ = lambda self, o: mul(o, self)  # noqa: E731
    __truediv__ = lambda self, o: div(self, o)  # noqa: E731
    __rtruediv__ = lambda self, o: div(o, self)  # noqa: E731
    __matmul__ = lambda self, o: matmul(self, o)  # noqa: E731
    __neg__ = lambda self: neg(self)  # noqa: E731


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def constant(data) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data)


# ---------------------------------------------------------------------------
# tape


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    forward: Callable[..., np.ndarray]
    vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


_local = threading.local()


def _active_tape() -> Tape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of the differentiable operations executed while active.

    A tape belongs to the thread that entered it.  Nested tapes are allowed;
    only the innermost one records.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._produced: set[int] = set()

    def __enter__(self) -> Tape:
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: Node) -> None:
        self.nodes.append(node)
        self._produced.add(id(node.output))

    def backward(self, loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of a scalar ``loss`` with respect to each of ``params``.

        Parameters that ``loss`` does not depend on get exact zeros.  The tape
        is not consumed, so calling this twice gives identical results.
        """
        if loss.data.shape != ():
            raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
        if id(loss) not in self._produced:
            raise ValueError("backward: loss was not produced on this tape")
        adj: dict[int, np.ndarray] = {id(loss): np.ones(())}
        for node in reversed(self.nodes):
            g = adj.pop(id(node.output), None)
            if g is None:
                continue
            grads = node.vjp(g)
            for inp, gi in zip(node.inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in adj:
                    adj[key] = adj[key] + gi
                else:
                    adj[key] = gi
        return [
            np.array(adj[id(p)], dtype=np.float64) if id(p) in adj else np.zeros_like(p.data)
            for p in params
        ]

    def replay(self) -> bool:
        """Re-run every recorded forward op and report whether all outputs match exactly."""
        for node in self.nodes:
            fresh = node.forward(*(t.data for t in node.inputs))
            if not np.array_equal(fresh, node.output.data):
                return False
        return True


def _emit(op: str, inputs: tuple[Tensor, ...], forward, vjp) -> Tensor:
    out = forward(*(t.data for t in inputs))
    needs = any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=needs)
    if needs:
        tape = _active_tape()
        if tape is not None:
            tape.record(Node(op, inputs, result, forward, vjp))
    return result


# ---------------------------------------------------------------------------
# broadcasting helpers


def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or sa == () or sb == ():
        return
    if len(sa) > len(sb) and sa[len(sa) - len(sb):] == sb:
        return
    if len(sb) > len(sa) and sb[len(sb) - len(sa):] == sa:
        return
    raise ShapeError(f"{op}: incompatible shapes {sa} and {sb}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


# ---------------------------------------------------------------------------
# binary ops


def add(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _check_broadcast("add", a.data, b.data)
    sa, sb = a.shape, b.shape
    return _emit("add", (a, b), np.add, lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _check_broadcast("sub", a.data, b.data)
    sa, sb = a.shape, b.shape
    return _emit("sub", (a, b), np.subtract, lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _check_broadcast("mul", a.data, b.data)
    av, bv = a.data, b.data
    return _emit(
        "mul",
        (a, b),
        np.multiply,
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def div(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _check_broadcast("div", a.data, b.data)
    if np.any(b.data == 0):
        raise DomainError("div: division by zero")
    av, bv = a.data, b.data
    return _emit(
        "div",
        (a, b),
        np.divide,
        lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * av / (bv * bv), bv.shape)),
    )


def neg(a) -> Tensor:
    a = constant(a)
    return _emit("neg", (a,), np.negative, lambda g: (-g,))


def matmul(a, b) -> Tensor:
    """``a @ b`` where ``b`` is a matrix and ``a`` has any number of leading axes."""
    a, b = constant(a), constant(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.data, b.data

    def vjp(g):
        ga = g @ bv.T
        if av.ndim == 1:
            gb = np.outer(av, g)
        else:
            gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _emit("matmul", (a, b), np.matmul, vjp)


# ---------------------------------------------------------------------------
# structural ops


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(constant(t) for t in tensors)
    if not ts:
        raise ShapeError("concat: need at least one tensor")
    nd = ts[0].ndim
    ax = axis % nd
    for t in ts[1:]:
        if t.ndim != nd or t.shape[:ax] + t.shape[ax + 1:] != ts[0].shape[:ax] + ts[0].shape[ax + 1:]:
            raise ShapeError(f"concat: incompatible shapes {ts[0].shape} and {t.shape}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def vjp(g):
        idx = [slice(None)] * nd
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[ax] = slice(lo, hi)
            out.append(g[tuple(idx)])
        return tuple(out)

    return _emit("concat", ts, lambda *xs: np.concatenate(xs, axis=ax), vjp)


def take(a, start: int, stop: int) -> Tensor:
    """Contiguous slice ``a[..., start:stop]`` along the last axis."""
    a = constant(a)
    n = a.shape[-1]
    if not 0 <= start < stop <= n:
        raise ShapeError(f"take: slice [{start}:{stop}] out of range for last axis of {a.shape}")
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        full[..., start:stop] = g
        return (full,)

    return _emit("slice", (a,), lambda x: x[..., start:stop].copy(), vjp)


def take_rows(a, start: int, stop: int) -> Tensor:
    """Rows ``a[start:stop]`` of a matrix."""
    a = constant(a)
    if a.ndim != 2 or not 0 <= start < stop <= a.shape[0]:
        raise ShapeError(f"take_rows: rows [{start}:{stop}] out of range for shape {a.shape}")
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        full[start:stop] = g
        return (full,)

    return _emit("slice", (a,), lambda x: x[start:stop].copy(), vjp)


def embed(shape: tuple[int, int], pieces: Sequence[tuple[object, int, int]]) -> Tensor:
    """A zero matrix of ``shape`` with each 2-D piece written at its ``(row, col)`` offset.

    Pieces must not overlap.  Used to pack per-chain weights into one
    block-structured matrix whose structural zeros stay exactly zero.
    """
    ts = tuple(constant(t) for t, _, _ in pieces)
    offs = [(r, c) for _, r, c in pieces]
    for t, (r, c) in zip(ts, offs):
        if t.ndim != 2 or r < 0 or c < 0 or r + t.shape[0] > shape[0] or c + t.shape[1] > shape[1]:
            raise ShapeError(f"embed: piece of shape {t.shape} at {(r, c)} does not fit {shape}")

    def forward(*xs):
        out = np.zeros(shape)
        for x, (r, c) in zip(xs, offs):
            out[r:r + x.shape[0], c:c + x.shape[1]] = x
        return out

    def vjp(g):
        return tuple(g[r:r + t.shape[0], c:c + t.shape[1]] for t, (r, c) in zip(ts, offs))

    return _emit("embed", ts, forward, vjp)


def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001
    a = constant(a)
    shape = a.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _emit("sum", (a,), lambda x: np.sum(x, axis=axis), vjp)


def mean(a, axis: int | None = None) -> Tensor:
    a = constant(a)
    shape = a.shape
    count = a.data.size if axis is None else shape[axis]

    def vjp(g):
        if axis is None:
            return (np.full(shape, g / count),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape) / count,)

    return _emit("mean", (a,), lambda x: np.mean(x, axis=axis), vjp)


def square_norm(a, axis: int | None = None) -> Tensor:
    """Sum of squares, over all entries or along ``axis``."""
    a = constant(a)
    av = a.data

    def vjp(g):
        if axis is None:
            return (2.0 * g * av,)
        return (2.0 * np.expand_dims(g, axis) * av,)

    return _emit("square_norm", (a,), lambda x: np.sum(x * x, axis=axis), vjp)


# ---------------------------------------------------------------------------
# unary ops


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softplus(x: np.ndarray) -> np.ndarray:
    # log(1 + e^x) = max(x, 0) + log1p(e^{-|x|}); never overflows
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(a) -> Tensor:
    a = constant(a)
    s = _sigmoid(a.data)
    return _emit("sigmoid", (a,), _sigmoid, lambda g: (g * s * (1.0 - s),))


def tanh(a) -> Tensor:
    a = constant(a)
    t = np.tanh(a.data)
    return _emit("tanh", (a,), np.tanh, lambda g: (g * (1.0 - t * t),))


def relu(a) -> Tensor:
    a = constant(a)
    mask = a.data > 0.0  # subgradient 0 at the kink
    return _emit("relu", (a,), lambda x: np.where(x > 0.0, x, 0.0), lambda g: (g * mask,))


def softplus(a) -> Tensor:
    a = constant(a)
    s = _sigmoid(a.data)
    return _emit("softplus", (a,), _softplus, lambda g: (g * s,))


def exp(a) -> Tensor:
    a = constant(a)
    with np.errstate(over="ignore"):
        e = np.exp(a.data)
    if not np.all(np.isfinite(e)):
        raise DomainError(f"exp: overflow (max input {a.data.max():.6g})")
    return _emit("exp", (a,), np.exp, lambda g: (g * e,))


def log(a) -> Tensor:
    a = constant(a)
    av = a.data
    if np.any(av <= 0.0) or np.any(np.isnan(av)):
        raise DomainError(f"log: non-positive input (min {np.nanmin(av):.6g})")
    return _emit("log", (a,), np.log, lambda g: (g / av,))


def sqrt(a) -> Tensor:
    a = constant(a)
    if np.any(a.data <= 0.0):
        raise DomainError(f"sqrt: non-positive input (min {a.data.min():.6g})")
    r = np.sqrt(a.data)
    return _emit("sqrt", (a,), np.sqrt, lambda g: (0.5 * g / r,))


def clip(a, lo: float = -np.inf, hi: float = np.inf) -> Tensor:
    """Clamp to ``[lo, hi]``; the gradient is zero where the clamp is active."""
    a = constant(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _emit("clip", (a,), lambda x: np.clip(x, lo, hi), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# checking


def grad_check(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    epsilon: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn`` takes no arguments and builds a scalar from ``params``; the
    parameters are perturbed in place and restored afterwards.  The error of
    one coordinate is ``|analytic - numeric| / max(1, |numeric|)``.  With
    ``max_coords`` set, a random subset of coordinates is checked.
    """
    with Tape() as tape:
        loss = fn()
    analytic = tape.backward(loss, params)

    coords = [(i, j) for i, p in enumerate(params) for j in range(p.data.size)]
    if max_coords is not None and len(coords) > max_coords:
        rng = rng or np.random.default_rng(0)
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[k] for k in sorted(pick)]

    worst = 0.0
    for i, j in coords:
        flat = params[i].data.reshape(-1)
        orig = flat[j]
        flat[j] = orig + epsilon
        up = float(fn().data)
        flat[j] = orig - epsilon
        down = float(fn().data)
        flat[j] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NumericalError(f"grad_check: non-finite value perturbing parameter {i}, entry {j}")
        numeric = (up - down) / (2.0 * epsilon)
        err = abs(analytic[i].reshape(-1)[j] - numeric) / max(1.0, abs(numeric))
        worst = max(worst, err)
    return worst
