"""Small define-by-run reverse-mode autodiff over dense float64 numpy arrays.

Every op builds a :class:`Node` stamped with a monotonically increasing
sequence number, so creation order is a valid topological order and
:func:`backward` can simply walk the reachable nodes newest-first.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

_sequence = itertools.count()


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple["Tensor", ...]
    backward_fn: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]
    seq: int


class Tensor:
    """A float64 array that can take part in a computation graph.

    Leaves created by the user carry ``requires_grad``; results of ops carry a
    :class:`Node` when at least one input requires a gradient. After
    :func:`backward`, leaves that require grad hold ``grad`` with the same
    shape as ``data``.
    """

    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __neg__(self):
        return scale(self, -1.0)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, inputs: Sequence[Tensor], op: str, backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = any(t.requires_grad for t in inputs)
    out.node = Node(op, tuple(inputs), backward_fn, next(_sequence)) if out.requires_grad else None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum with numpy broadcasting (e.g. a bias row over a matrix)."""
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), "add",
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), "sub",
                   lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), "mul",
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(x.data * c, (x,), "scale", lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    # subgradient at 0 is 0
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), "relu", lambda g: (g * mask,))


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return _result(np.array(x.data.sum()), (x,), "sum", lambda g: (np.broadcast_to(g, shape).copy(),))


# ---------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a: Tensor, b: Tensor, exact_rows: bool = False) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast.

    With ``exact_rows=True`` the forward product is evaluated by a non-BLAS
    kernel so that each output row is bit-identical regardless of how many
    other rows share the call. BLAS blocking does not give that guarantee.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions differ for shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul: batch dimensions differ for shapes {a.shape} and {b.shape}") from None
    ad, bd = a.data, b.data
    if exact_rows:
        out = np.einsum("...ik,...kj->...ij", ad, bd)
    else:
        out = ad @ bd

    def backward_fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _result(out, (a, b), "matmul", backward_fn)


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    return _result(np.swapaxes(x.data, -1, -2).copy(), (x,), "transpose",
                   lambda g: (np.swapaxes(g, -1, -2).copy(),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _result(x.data.reshape(shape).copy(), (x,), "reshape", lambda g: (g.reshape(old),))


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        out = np.broadcast_to(x.data, tuple(shape)).copy()
    except ValueError:
        raise DimensionError(f"broadcast_to: cannot broadcast {old} to {tuple(shape)}") from None
    return _result(out, (x,), "broadcast_to", lambda g: (_unbroadcast(g, old),))


def concat(tensors: Sequence[Tensor], axis: int = -2) -> Tensor:
    if not tensors:
        raise DimensionError("concat: no tensors given")
    ndim = tensors[0].ndim
    ax = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != ax):
            raise DimensionError(
                f"concat: shapes {tensors[0].shape} and {t.shape} differ off axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    return _result(out, tuple(tensors), "concat",
                   lambda g: tuple(np.split(g, cuts, axis=ax)))


def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    """Stack ``a`` on top of ``b`` along the row axis (``[P; E]``)."""
    if a.shape[-1] != b.shape[-1]:
        raise DimensionError(f"concat_rows: column counts differ for shapes {a.shape} and {b.shape}")
    return concat([a, b], axis=-2)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    shape = x.shape

    def backward_fn(g):
        full = np.zeros(shape)
        full[..., start:stop, :] = g
        return (full,)

    return _result(x.data[..., start:stop, :].copy(), (x,), "slice_rows", backward_fn)


def row_select(table: Tensor, ids) -> Tensor:
    """Gather rows of a 2-D table; ``ids`` may have any shape.

    The gradient is scattered back onto the selected rows only (repeated ids
    accumulate).
    """
    if table.ndim != 2:
        raise DimensionError(f"row_select: table must be 2-D, got {table.shape}")
    idx = np.asarray(ids, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        bad = idx[(idx < 0) | (idx >= table.shape[0])].reshape(-1)[0]
        raise IndexError(f"row_select: id {int(bad)} outside [0, {table.shape[0]})")
    shape = table.shape

    def backward_fn(g):
        full = np.zeros(shape)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return _result(table.data[idx], (table,), "row_select", backward_fn)


# ---------------------------------------------------------------------------
# nonlinear reductions


def row_softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis with max subtraction."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward_fn(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), "row_softmax", backward_fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply per-feature gain and bias."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain/bias {gain.shape}/{bias.shape} do not match width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data

    def backward_fn(g):
        gxhat = g * gd
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, (d,)), _unbroadcast(g, (d,))

    return _result(xhat * gd + bias.data, (x, gain, bias), "layer_norm", backward_fn)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under row softmax."""
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy: logits must be 2-D, got {logits.shape}")
    n, c = logits.shape
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.shape[0] != n:
        raise DimensionError(f"cross_entropy: {y.shape[0]} labels for {n} rows")
    if y.size and (y.min() < 0 or y.max() >= c):
        raise IndexError(f"cross_entropy: label outside [0, {c})")
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logz
    rows = np.arange(n)
    loss = -logp[rows, y].mean()

    def backward_fn(g):
        p = np.exp(logp)
        p[rows, y] -= 1.0
        return (p * (g / n),)

    return _result(np.array(loss), (logits,), "cross_entropy", backward_fn)


# ---------------------------------------------------------------------------
# graph traversal


def graph_nodes(root: Tensor) -> list[Node]:
    """Nodes reachable from ``root``, in creation (topological) order."""
    seen: set[int] = set()
    nodes: list[Node] = []
    stack = [root]
    while stack:
        t = stack.pop()
        node = t.node
        if node is None or id(node) in seen:
            continue
        seen.add(id(node))
        nodes.append(node)
        stack.extend(node.inputs)
    nodes.sort(key=lambda nd: nd.seq)
    return nodes


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``grad`` of every reachable trainable leaf.

    Each node is visited exactly once, newest first. Frozen tensors
    (``requires_grad=False``) never receive a gradient.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if loss.node is None:
        return
    # intermediate results own exactly one node, so key their grads by it
    grads: dict[int, np.ndarray] = {id(loss.node): np.ones_like(loss.data)}
    for node in reversed(graph_nodes(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.node is None:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp.node)
                grads[key] = gi if key not in grads else grads[key] + gi


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between backprop and central differences.

    ``f`` rebuilds the graph from ``params`` on every call and returns a
    scalar. Each coordinate is perturbed in place by +/- ``eps``; relative
    error is ``|a - n| / max(|a|, |n|, 1e-12)``.
    """
    if eps <= 0:
        raise ContractError("grad_check: eps must be positive")
    for p in params:
        p.grad = None
    backward(f())
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            up = f().item()
            flat[j] = orig - eps
            down = f().item()
            flat[j] = orig
            numeric = (up - down) / (2.0 * eps)
            a = analytic.reshape(-1)[j]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-12)
            worst = max(worst, err)
    return worst
