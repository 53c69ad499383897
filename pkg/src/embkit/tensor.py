"""Float64 tensors with a reverse-mode gradient tape.

Only the operations needed by the encoder and the training objectives are
provided. Broadcasting is limited to scalar operands; anything else must go
through an explicit op (``add_bias``, ``add_constant``) so shape bugs raise
instead of silently broadcasting.

Every op that touches a tensor with ``requires_grad`` appends a node to the
tape. Nodes carry a monotonically increasing sequence number and ``backward``
visits the nodes reachable from the loss in exact reverse append order.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "TensorError",
    "ShapeError",
    "DomainError",
    "NonFiniteError",
    "RankError",
    "EmptySequenceError",
    "DegenerateEmbeddingError",
    "Graph",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "relu",
    "log1p",
    "exp",
    "log",
    "gelu",
    "elementwise",
    "matmul",
    "transpose_last",
    "permute",
    "reshape",
    "tsum",
    "mean",
    "add_bias",
    "add_constant",
    "take",
    "concat",
    "layer_norm",
    "softmax_rows",
    "log_softmax_rows",
    "max_over_positions",
    "cosine_matrix",
    "backward",
    "no_grad",
]


class TensorError(Exception):
    """Base class for tensor failures."""


class ShapeError(TensorError, ValueError):
    pass


class DomainError(TensorError, ValueError):
    pass


class NonFiniteError(TensorError, FloatingPointError):
    pass


class RankError(TensorError, ValueError):
    pass


class EmptySequenceError(TensorError, ValueError):
    pass


class DegenerateEmbeddingError(TensorError, ValueError):
    pass


_SEQ = itertools.count()
_GRAD_ENABLED = [True]


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple["Tensor", ...]
    backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]
    seq: int = field(default_factory=lambda: next(_SEQ))


class Graph:
    """Optional recorder of appended nodes, for inspection and tests.

    >>> with Graph() as g:
    ...     y = x * x
    >>> [n.op for n in g.nodes]
    ['mul']
    """

    _active: list["Graph"] = []

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def __enter__(self) -> "Graph":
        Graph._active.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Graph._active.remove(self)


class no_grad:
    """Context manager that disables tape recording."""

    def __enter__(self):
        self._prev = _GRAD_ENABLED[0]
        _GRAD_ENABLED[0] = False

    def __exit__(self, *exc):
        _GRAD_ENABLED[0] = self._prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor data contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: Node | None = None
        self.name = name

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
        return float(self.data.item())

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return _wrap(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(arr: np.ndarray) -> Tensor:
    t = Tensor.__new__(Tensor)
    t.data = arr
    t.requires_grad = False
    t.grad = None
    t._node = None
    t.name = None
    return t


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(op: str, data: np.ndarray, inputs: Sequence[Tensor], bw) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced NaN or Inf")
    out = _wrap(data)
    if _GRAD_ENABLED[0] and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = Node(op, tuple(inputs), bw)
        for g in Graph._active:
            g.nodes.append(out._node)
    return out


def _is_scalar(t: Tensor) -> bool:
    return t.ndim == 0


def _unbroadcast(grad: np.ndarray, t: Tensor) -> np.ndarray:
    return np.asarray(grad.sum()) if _is_scalar(t) and grad.ndim else grad


def _check_binary(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (only scalar broadcasting)")


# elementwise ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary("add", a, b)
    return _result(
        "add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a), _unbroadcast(g, b))
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary("sub", a, b)
    return _result(
        "sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b))
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary("mul", a, b)
    return _result(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a), _unbroadcast(g * a.data, b)),
    )


def neg(x: Tensor) -> Tensor:
    return _result("neg", -x.data, (x,), lambda g: (-g,))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result("scale", x.data * c, (x,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    # relu'(0) = 0
    pos = x.data > 0
    return _result("relu", np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


def log1p(x: Tensor) -> Tensor:
    if np.any(x.data <= -1.0):
        raise DomainError("log1p of value <= -1")
    return _result("log1p", np.log1p(x.data), (x,), lambda g: (g / (1.0 + x.data),))


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _result("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0.0):
        raise DomainError("log of non-positive value")
    return _result("log", np.log(x.data), (x,), lambda g: (g / x.data,))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh approximation of GELU."""
    v = x.data
    inner = _GELU_C * (v + 0.044715 * v**3)
    th = np.tanh(inner)
    out = 0.5 * v * (1.0 + th)

    def bw(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * v**2)
        return (g * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th**2) * d_inner),)

    return _result("gelu", out, (x,), bw)


_UNARY = {"relu": relu, "log1p": log1p, "exp": exp, "log": log, "gelu": gelu, "neg": neg}


def elementwise(op: str, *args, c: float | None = None) -> Tensor:
    """Dispatch by name: add, mul, relu, log1p, exp, log, scale."""
    if op == "add":
        return add(*args)
    if op == "mul":
        return mul(*args)
    if op == "scale":
        if c is None:
            raise ValueError("scale needs a constant c")
        return scale(args[0], c)
    try:
        fn = _UNARY[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# linear algebra ------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    Supports 2-D x 2-D, N-D x 2-D (applied to the last axis of ``a``) and
    N-D x N-D with identical leading dimensions.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims {a.shape} x {b.shape} do not match")
    if b.ndim == 2:
        out = a.data @ b.data

        def bw(g):
            k, n = b.shape
            ga = g @ b.data.T
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            return ga, gb

    else:
        if a.shape[:-2] != b.shape[:-2]:
            raise ShapeError(f"matmul: leading dims {a.shape} x {b.shape} differ")
        out = a.data @ b.data

        def bw(g):
            return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return _result("matmul", out, (a, b), bw)


def transpose_last(x: Tensor) -> Tensor:
    return _result(
        "transpose", np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),)
    )


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result("permute", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _result("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


# reductions ----------------------------------------------------------------


def tsum(x: Tensor, axis: int | None = None) -> Tensor:
    out = np.sum(x.data, axis=axis)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result("sum", np.asarray(out), (x,), bw)


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    return scale(tsum(x, axis), 1.0 / n)


# structural ----------------------------------------------------------------


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a vector along the last axis of ``x``."""
    if b.ndim != 1 or b.shape[0] != x.shape[-1]:
        raise ShapeError(f"add_bias: bias {b.shape} does not match last dim of {x.shape}")
    return _result(
        "add_bias",
        x.data + b.data,
        (x, b),
        lambda g: (g, g.reshape(-1, b.shape[0]).sum(axis=0)),
    )


def add_constant(x: Tensor, c) -> Tensor:
    """Add a non-differentiable array that broadcasts onto ``x``'s shape."""
    c = np.asarray(c, dtype=np.float64)
    out = x.data + c
    if out.shape != x.shape:
        raise ShapeError(f"add_constant: {c.shape} would change shape {x.shape}")
    return _result("add_constant", out, (x,), lambda g: (g,))


def take(x: Tensor, index) -> Tensor:
    """Numpy-style indexing (basic or integer-array) with scatter-add gradient."""
    out = np.array(x.data[index])

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return _result("take", out, (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result("concat", out, tensors, bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-12) -> Tensor:
    h = x.shape[-1]
    if gamma.shape != (h,) or beta.shape != (h,):
        raise ShapeError("layer_norm: gamma/beta must match the last dimension")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        gg = (g * xhat).reshape(-1, h).sum(axis=0)
        gb = g.reshape(-1, h).sum(axis=0)
        dxhat = g * gamma.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, gg, gb

    return _result("layer_norm", out, (x, gamma, beta), bw)


# normalizations ------------------------------------------------------------


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis with row-max subtraction."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _result("softmax", p, (x,), bw)


def log_softmax_rows(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _result("log_softmax", out, (x,), bw)


def max_over_positions(x: Tensor, mask=None) -> Tensor:
    """Column-wise max over the position axis, skipping masked-out rows.

    ``x`` is ``[L, V]`` (``mask`` is ``[L]``) or ``[B, L, V]`` (``mask`` is
    ``[B, L]``); ``mask`` is true for real positions. The gradient goes to the
    first arg-max row of each column.
    """
    if x.ndim not in (2, 3):
        raise ShapeError("max_over_positions expects [L, V] or [B, L, V]")
    lead = x.shape[:-1]
    m = np.ones(lead, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if m.shape != lead:
        raise ShapeError(f"mask shape {m.shape} does not match positions {lead}")
    if not np.all(m.any(axis=-1)):
        raise EmptySequenceError("max over positions with every position masked")
    masked = np.where(m[..., None], x.data, -np.inf)
    pos_axis = x.ndim - 2
    arg = np.argmax(masked, axis=pos_axis)  # first occurrence on ties
    out = np.take_along_axis(masked, np.expand_dims(arg, pos_axis), axis=pos_axis)
    out = np.squeeze(out, axis=pos_axis)

    def bw(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, np.expand_dims(arg, pos_axis), np.expand_dims(g, pos_axis), axis=pos_axis)
        return (gx,)

    return _result("max_over_positions", out, (x,), bw)


def cosine_matrix(a: Tensor, b: Tensor, tau: float = 1.0) -> Tensor:
    """Pairwise cosine similarity of rows, divided by ``tau``."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"cosine_matrix: incompatible shapes {a.shape}, {b.shape}")
    na = np.linalg.norm(a.data, axis=1, keepdims=True)
    nb = np.linalg.norm(b.data, axis=1, keepdims=True)
    if np.any(na == 0) or np.any(nb == 0):
        raise DegenerateEmbeddingError("zero-norm embedding row")
    ah, bh = a.data / na, b.data / nb
    out = (ah @ bh.T) / tau

    def bw(g):
        g = g / tau
        d_ah = g @ bh
        d_bh = g.T @ ah
        ga = (d_ah - ah * (d_ah * ah).sum(axis=1, keepdims=True)) / na
        gb = (d_bh - bh * (d_bh * bh).sum(axis=1, keepdims=True)) / nb
        return ga, gb

    return _result("cosine_matrix", out, (a, b), bw)


# backward ------------------------------------------------------------------


def _reachable(loss: Tensor) -> list[Node]:
    seen: set[int] = set()
    nodes: list[Node] = []
    stack = [loss]
    while stack:
        t = stack.pop()
        node = t._node
        if node is None or id(node) in seen:
            continue
        seen.add(id(node))
        nodes.append(node)
        stack.extend(node.inputs)
    nodes.sort(key=lambda n: n.seq, reverse=True)
    return nodes


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every ``requires_grad`` leaf feeding ``loss``.

    Leaf gradients accumulate across calls; call ``zero_grad`` to reset.
    """
    if loss.ndim != 0:
        raise RankError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if loss._node is None:
        loss.grad = np.ones(()) if loss.grad is None else loss.grad + 1.0
        return
    nodes = _reachable(loss)
    pending: dict[int, np.ndarray] = {id(loss._node): np.ones(())}
    for node in nodes:
        g = pending.pop(id(node), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._node is None:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp._node)
                prev = pending.get(key)
                pending[key] = gi if prev is None else prev + gi


def parameters_grad_norm(params: Iterable[Tensor]) -> float:
    return float(np.sqrt(sum(float((p.grad**2).sum()) for p in params if p.grad is not None)))
