"""Dense 2-D tensors with a small reverse-mode autodiff tape.

Every value is a float64 matrix. Operations record themselves when any input
requires a gradient; ``backward`` replays the recorded nodes in strict reverse
execution order and accumulates gradients into the leaves.
"""
from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

LOG_EPS = 1e-12
NORM_EPS = 1e-12

_counter = itertools.count()


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class Tensor:
    """A row-major float64 matrix with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_seq", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(f"expected at most 2 dimensions, got {arr.ndim}")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None
        self._seq = next(_counter)
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        if self.data.shape != (1, 1):
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._seq = next(_counter)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    # row-vector (1×m) and scalar (1×1) operands broadcast over rows/cols
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, name: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# differentiable ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")

    def backward(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _node(a.data @ b.data, (a, b), backward, "matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _node(a.data + b.data, (a, b), backward, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, -_unbroadcast(g, b.shape))

    return _node(a.data - b.data, (a, b), backward, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with row/column broadcasting."""
    _check_broadcast(a, b, "mul")

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _node(a.data * b.data, (a, b), backward, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    def backward(g):
        _accumulate(a, g * c)

    return _node(a.data * c, (a,), backward, "scale")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g):
        _accumulate(a, g * mask)

    return _node(np.where(mask, a.data, 0.0), (a,), backward, "relu")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def backward(g):
        _accumulate(a, g * (1.0 - out * out))

    return _node(out, (a,), backward, "tanh")


def identity(a: Tensor) -> Tensor:
    return a


def sum_all(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, np.full(a.shape, g[0, 0]))

    return _node(np.array([[a.data.sum()]]), (a,), backward, "sum")


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size

    def backward(g):
        _accumulate(a, np.full(a.shape, g[0, 0] / n))

    return _node(np.array([[a.data.mean()]]), (a,), backward, "mean")


def sum_rows(a: Tensor) -> Tensor:
    """Sum across columns of each row: n×m -> n×1."""

    def backward(g):
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _node(a.data.sum(axis=1, keepdims=True), (a,), backward, "sum_rows")


def mean_rows(a: Tensor) -> Tensor:
    m = a.shape[1]

    def backward(g):
        _accumulate(a, np.broadcast_to(g / m, a.shape))

    return _node(a.data.mean(axis=1, keepdims=True), (a,), backward, "mean_rows")


def softmax_rows(z: Tensor) -> Tensor:
    shifted = z.data - z.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        dot = (g * s).sum(axis=1, keepdims=True)
        _accumulate(z, s * (g - dot))

    return _node(s, (z,), backward, "softmax_rows")


def log_clamped(p: Tensor, eps: float = LOG_EPS) -> Tensor:
    """log(max(p, eps)); the gradient is zero where the clamp is active."""
    if np.any(p.data < 0):
        raise DomainError("log_clamped: negative entry")
    clipped = np.maximum(p.data, eps)
    active = p.data > eps

    def backward(g):
        _accumulate(p, np.where(active, g / clipped, 0.0))

    return _node(np.log(clipped), (p,), backward, "log_clamped")


def cosine_sim_matrix(a: Tensor, b: Tensor, eps: float = NORM_EPS) -> Tensor:
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"cosine_sim_matrix: widths differ, {a.shape} vs {b.shape}")
    na = np.sqrt((a.data ** 2).sum(axis=1, keepdims=True))  # n×1
    nb = np.sqrt((b.data ** 2).sum(axis=1, keepdims=True))  # m×1
    dots = a.data @ b.data.T
    denom = na @ nb.T + eps
    out = dots / denom

    def backward(g):
        # d out_ij / d a_i = b_j / D_ij - dots_ij * nb_j * a_i / (na_i * D_ij^2)
        gd = g / denom
        w = g * dots / denom ** 2
        safe_na = np.where(na > 0, na, 1.0)
        safe_nb = np.where(nb > 0, nb, 1.0)
        if a.requires_grad:
            ga = gd @ b.data - (w @ nb) * a.data / safe_na
            _accumulate(a, np.where(na > 0, ga, gd @ b.data))
        if b.requires_grad:
            gb = gd.T @ a.data - (w.T @ na) * b.data / safe_nb
            _accumulate(b, np.where(nb > 0, gb, gd.T @ a.data))

    return _node(out, (a, b), backward, "cosine_sim")


# ---------------------------------------------------------------------------
# tape


class Tape:
    """Ordered record of the ops that produced a value.

    Built by walking the graph back from an output; ``nodes`` is sorted by
    execution order, so iterating it reversed is a valid backward schedule.
    """

    def __init__(self, output: Tensor):
        seen: set[int] = set()
        nodes: list[Tensor] = []
        leaves: list[Tensor] = []
        stack = [output]
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            if t._parents:
                nodes.append(t)
                stack.extend(t._parents)
            elif t.requires_grad:
                leaves.append(t)
        nodes.sort(key=lambda t: t._seq)
        leaves.sort(key=lambda t: t._seq)
        self.output = output
        self.nodes = nodes
        self.leaves = leaves

    def __len__(self):
        return len(self.nodes)

    def ops(self) -> list[str]:
        return [t.op for t in self.nodes]


def backward(loss: Tensor) -> Tape:
    """Populate ``grad`` on every leaf reachable from a scalar ``loss``."""
    if loss.shape != (1, 1):
        raise ShapeError(f"backward needs a 1x1 loss, got {loss.shape}")
    tape = Tape(loss)
    for t in tape.nodes:
        t.grad = None
    loss.grad = np.ones((1, 1))
    # every consumer of a node ran later, so its grad is complete when reached
    for t in reversed(tape.nodes):
        if t.grad is not None:
            t._backward(t.grad)
    return tape


# ---------------------------------------------------------------------------
# finite differences


def grad_check(
    loss_fn: Callable[[], Tensor],
    leaves: Iterable[Tensor],
    h: float = 1e-5,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``loss_fn`` must rebuild the graph from the current leaf values each call.
    """
    leaves = list(leaves)
    for leaf in leaves:
        leaf.grad = None
    backward(loss_fn())
    worst = 0.0
    for leaf in leaves:
        analytic = np.zeros(leaf.shape) if leaf.grad is None else leaf.grad.copy()
        flat = leaf.data.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            up = loss_fn().item()
            flat[k] = orig - h
            down = loss_fn().item()
            flat[k] = orig
            numeric = (up - down) / (2 * h)
            a = analytic.reshape(-1)[k]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    for leaf in leaves:
        leaf.grad = None
    return worst
