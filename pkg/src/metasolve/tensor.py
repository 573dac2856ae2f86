"""A small reverse-mode autodiff engine over float64 numpy arrays.

Every value lives in a :class:`Node`. Operations build new nodes that keep a
reference to their parents and a closure mapping the output gradient to one
gradient per parent. :func:`backward` sweeps the graph once in reverse
topological order.

Broadcasting is deliberately narrow: equal shapes, scalar with anything, and
a row vector (``(k,)`` or ``(1, k)``) with an ``(n, k)`` matrix.
"""

from __future__ import annotations

import contextlib
import contextvars
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

from . import _kernels
from .errors import DimensionError, DomainError, SingularMatrixError, ValidationError

LEAKY_SLOPE = 0.1

# test hook: ops listed here get their backward rule scaled by 1.5
_corrupted: contextvars.ContextVar[frozenset] = contextvars.ContextVar(
    "metasolve_corrupted", default=frozenset()
)


@contextlib.contextmanager
def corrupt_backward(*ops: str):
    """Deliberately break the backward rule of ``ops`` (negative-control hook)."""
    token = _corrupted.set(_corrupted.get() | frozenset(ops))
    try:
        yield
    finally:
        _corrupted.reset(token)


class Node:
    __slots__ = ("value", "grad", "requires_grad", "parents", "op", "_backward", "name")
    # make ndarray <op> Node dispatch to Node's reflected operators
    __array_ufunc__ = None

    def __init__(self, value, requires_grad: bool = False, *, name: str | None = None,
                 parents: tuple = (), op: str = "leaf", backward: Callable | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.parents = parents
        self.op = op
        self._backward = backward
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def T(self) -> "Node":
        return transpose(self)

    def item(self) -> float:
        return float(self.value)

    def backward(self) -> dict:
        return backward(self)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Node{label}(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return scale(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)
    def __rmatmul__(self, other): return matmul(other, self)

    def __getitem__(self, rows):
        return take_rows(self, rows)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def _make(value, op: str, parents: Sequence[tuple[Node, str]], backward: Callable) -> Node:
    if any(p.requires_grad for p, _ in parents):
        return Node(value, True, parents=tuple(parents), op=op, backward=backward)
    return Node(value, op=op)


# ---------------------------------------------------------------------------
# backward sweep

def _topo_order(root: Node) -> list[Node]:
    order: list[Node] = []
    state: dict[int, int] = {}
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        key = id(node)
        if expanded:
            state[key] = 2
            order.append(node)
            continue
        seen = state.get(key)
        if seen == 2:
            continue
        if seen == 1:
            raise RuntimeError("cycle detected in computation graph")
        state[key] = 1
        stack.append((node, True))
        for parent, _ in node.parents:
            if parent.requires_grad and state.get(id(parent)) != 2:
                if state.get(id(parent)) == 1:
                    raise RuntimeError("cycle detected in computation graph")
                stack.append((parent, False))
    return order


def backward(root: Node) -> dict[Node, np.ndarray]:
    """Back-propagate from scalar ``root``.

    Every requires-grad node visited gets ``.grad`` set (overwritten, not
    accumulated across calls). Returns ``{leaf: gradient}`` for the
    requires-grad leaves reachable from ``root``.
    """
    if root.value.size != 1:
        raise DimensionError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return {}
    corrupted = _corrupted.get()
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    leaves: dict[Node, np.ndarray] = {}
    for node in reversed(_topo_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            g = np.zeros_like(node.value)
        node.grad = g
        if not node.parents:
            leaves[node] = g
            continue
        pgrads = node._backward(g)
        factor = 1.5 if node.op in corrupted else None
        for (parent, _role), pg in zip(node.parents, pgrads):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=np.float64)
            if pg.shape != parent.shape:
                raise RuntimeError(
                    f"internal: {node.op} produced grad {pg.shape} for parent {parent.shape}"
                )
            if factor is not None:
                pg = pg * factor
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return leaves


# ---------------------------------------------------------------------------
# broadcasting helpers

def _is_scalar(shape: tuple) -> bool:
    return len(shape) <= 2 and all(n == 1 for n in shape)


def _broadcast_shape(a: tuple, b: tuple) -> tuple:
    if a == b:
        return a
    if _is_scalar(a):
        return b
    if _is_scalar(b):
        return a
    for row, mat in ((a, b), (b, a)):
        if len(mat) == 2 and (row == (mat[1],) or row == (1, mat[1])):
            return mat
    raise DimensionError(f"shapes {a} and {b} are not broadcast-compatible")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if _is_scalar(shape):
        return np.full(shape, g.sum())
    return g.sum(axis=0).reshape(shape)


# ---------------------------------------------------------------------------
# elementwise binary

def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make(a.value + b.value, "add", [(a, "lhs"), (b, "rhs")],
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make(a.value - b.value, "sub", [(a, "lhs"), (b, "rhs")],
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _broadcast_shape(a.shape, b.shape)
    av, bv = a.value, b.value
    return _make(av * bv, "mul", [(a, "lhs"), (b, "rhs")],
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _broadcast_shape(a.shape, b.shape)
    av, bv = a.value, b.value
    if np.any(bv == 0.0):
        raise DomainError("division by zero")
    out = av / bv

    def back(g):
        return _unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)

    return _make(out, "div", [(a, "lhs"), (b, "rhs")], back)


def scale(x, c: float) -> Node:
    x = as_node(x)
    c = float(c)
    return _make(x.value * c, "scale", [(x, "x")], lambda g: (g * c,))


# ---------------------------------------------------------------------------
# elementwise unary

def sigmoid(x) -> Node:
    x = as_node(x)
    out = expit(x.value)
    return _make(out, "sigmoid", [(x, "x")], lambda g: (g * out * (1.0 - out),))


def leaky_relu(x, slope: float = LEAKY_SLOPE) -> Node:
    x = as_node(x)
    pos = x.value > 0
    out = np.where(pos, x.value, slope * x.value)
    return _make(out, "leaky_relu", [(x, "x")], lambda g: (np.where(pos, g, slope * g),))


def log(x) -> Node:
    x = as_node(x)
    if np.any(x.value <= 0.0):
        raise DomainError("log of non-positive value")
    xv = x.value
    return _make(np.log(xv), "log", [(x, "x")], lambda g: (g / xv,))


def exp(x) -> Node:
    x = as_node(x)
    out = np.exp(x.value)
    return _make(out, "exp", [(x, "x")], lambda g: (g * out,))


def softplus(x) -> Node:
    x = as_node(x)
    xv = x.value
    return _make(np.logaddexp(0.0, xv), "softplus", [(x, "x")], lambda g: (g * expit(xv),))


def clamp_min(x, lo: float) -> Node:
    """max(x, lo); gradient flows only where x > lo."""
    x = as_node(x)
    keep = x.value > lo
    return _make(np.where(keep, x.value, lo), "clamp_min", [(x, "x")],
                 lambda g: (np.where(keep, g, 0.0),))


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "scale": scale,
    "sigmoid": sigmoid,
    "leaky-relu": leaky_relu,
    "log": log,
    "exp": exp,
    "softplus": softplus,
}


def elementwise(op_id: str, *inputs, **kwargs) -> Node:
    try:
        fn = _ELEMENTWISE[op_id]
    except KeyError:
        raise ValidationError(f"unknown elementwise op {op_id!r}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# shape and reduction ops

def matmul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    return _make(av @ bv, "matmul", [(a, "lhs"), (b, "rhs")],
                 lambda g: (g @ bv.T, av.T @ g))


def transpose(x) -> Node:
    x = as_node(x)
    if x.ndim != 2:
        raise DimensionError(f"transpose needs a matrix, got shape {x.shape}")
    return _make(x.value.T, "transpose", [(x, "x")], lambda g: (g.T,))


def reshape(x, shape) -> Node:
    x = as_node(x)
    old = x.shape
    return _make(x.value.reshape(shape), "reshape", [(x, "x")], lambda g: (g.reshape(old),))


def sum(x, axis: int | None = None) -> Node:  # noqa: A001 - mirrors numpy naming
    x = as_node(x)
    shape = x.shape
    if axis is None:
        return _make(np.array(x.value.sum()), "sum", [(x, "x")],
                     lambda g: (np.broadcast_to(g, shape).copy(),))
    out = x.value.sum(axis=axis, keepdims=True)
    return _make(out, "sum", [(x, "x")], lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x) -> Node:
    x = as_node(x)
    return scale(sum(x), 1.0 / x.value.size)


def concat(nodes: Sequence[Node], axis: int = 1) -> Node:
    nodes = [as_node(n) for n in nodes]
    try:
        out = np.concatenate([n.value for n in nodes], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from None
    bounds = np.cumsum([0] + [n.shape[axis] for n in nodes])

    def back(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(nodes))
        )

    return _make(out, "concat", [(n, f"part{i}") for i, n in enumerate(nodes)], back)


def take_rows(x, rows) -> Node:
    """Row selection by slice or integer index array."""
    x = as_node(x)
    if not isinstance(rows, slice):
        rows = np.asarray(rows, dtype=np.int64)
    shape = x.shape

    def back(g):
        full = np.zeros(shape)
        if isinstance(rows, slice):
            full[rows] = g
        else:
            np.add.at(full, rows, g)
        return (full,)

    return _make(x.value[rows], "take_rows", [(x, "x")], back)


# ---------------------------------------------------------------------------
# linear algebra

def gram(x, outer: bool = True) -> Node:
    """``x xᵀ`` when ``outer`` else ``xᵀ x``; always exactly symmetric."""
    x = as_node(x)
    if x.ndim != 2:
        raise DimensionError(f"gram needs a matrix, got shape {x.shape}")
    xv = x.value
    out = xv @ xv.T if outer else xv.T @ xv
    out = 0.5 * (out + out.T)

    def back(g):
        gs = g + g.T
        return ((gs @ xv) if outer else (xv @ gs),)

    return _make(out, "gram", [(x, "x")], back)


def add_diag(a, d) -> Node:
    """``a + diag(d)`` for a scalar or length-k vector ``d``."""
    a, d = as_node(a), as_node(d)
    k = a.shape[0]
    if a.ndim != 2 or a.shape[1] != k:
        raise DimensionError(f"add_diag needs a square matrix, got {a.shape}")
    dshape = d.shape
    scalar = _is_scalar(dshape)
    if not scalar and d.value.size != k:
        raise DimensionError(f"add_diag: diagonal of size {d.value.size} for matrix {a.shape}")
    out = a.value.copy()
    idx = np.arange(k)
    out[idx, idx] += d.value.reshape(-1) if not scalar else float(d.value.reshape(-1)[0])

    def back(g):
        diag = np.diagonal(g)
        gd = np.full(dshape, diag.sum()) if scalar else diag.reshape(dshape).copy()
        return g, gd

    return _make(out, "add_diag", [(a, "matrix"), (d, "diag")], back)


def solve_spd(a, b) -> Node:
    """Solve ``a z = b`` for symmetric positive definite ``a`` via Cholesky.

    Only the lower triangle of ``a`` is read. The gradient w.r.t. ``a`` is
    symmetrized since ``a`` is constrained symmetric.
    """
    a, b = as_node(a), as_node(b)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"solve_spd needs a square matrix, got {a.shape}")
    if b.ndim != 2 or b.shape[0] != a.shape[0]:
        raise DimensionError(f"solve_spd shape mismatch: {a.shape} and {b.shape}")
    L, info = _kernels.cholesky(a.value)
    if info:
        raise SingularMatrixError(info - 1, a.shape[0])
    z = _kernels.cho_solve(L, b.value)

    def back(g):
        gb = _kernels.cho_solve(L, g)
        ga = -gb @ z.T
        return 0.5 * (ga + ga.T), gb

    return _make(z, "solve_spd", [(a, "matrix"), (b, "rhs")], back)


def solve_shifted_spd(a, d, b) -> Node:
    """Column-wise ``(a + diag(d[:, j])) z[:, j] = b[:, j]``.

    ``a`` is a shared ``[k, k]`` symmetric matrix, ``d`` and ``b`` are
    ``[k, m]``. Each shifted system must be positive definite. One graph node
    covers all ``m`` solves.
    """
    a, d, b = as_node(a), as_node(d), as_node(b)
    k = a.shape[0]
    if a.ndim != 2 or a.shape[1] != k:
        raise DimensionError(f"solve_shifted_spd needs a square matrix, got {a.shape}")
    if b.ndim != 2 or b.shape[0] != k or d.shape != b.shape:
        raise DimensionError(f"solve_shifted_spd shape mismatch: {a.shape}, {d.shape}, {b.shape}")
    Ls, z, info, _ = _kernels.shifted_factor_solve(a.value, d.value, b.value)
    if info:
        raise SingularMatrixError(info - 1, k)

    def back(g):
        gb = _kernels.batched_cho_solve(Ls, g)
        ga = -gb @ z.T
        return 0.5 * (ga + ga.T), -gb * z, gb

    return _make(z, "solve_shifted_spd", [(a, "matrix"), (d, "shift"), (b, "rhs")], back)


def sqdist(q, c) -> Node:
    """Pairwise squared Euclidean distances between rows of ``q`` and ``c``."""
    q, c = as_node(q), as_node(c)
    if q.ndim != 2 or c.ndim != 2 or q.shape[1] != c.shape[1]:
        raise DimensionError(f"sqdist shape mismatch: {q.shape} and {c.shape}")
    qv, cv = q.value, c.value

    def back(g):
        gq = 2.0 * (g.sum(axis=1, keepdims=True) * qv - g @ cv)
        gc = 2.0 * (g.sum(axis=0)[:, None] * cv - g.T @ qv)
        return gq, gc

    return _make(_kernels.sqdist(qv, cv), "sqdist", [(q, "query"), (c, "centers")], back)


# ---------------------------------------------------------------------------
# losses

def _row_softmax(v: np.ndarray) -> np.ndarray:
    e = np.exp(v - v.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax(x) -> Node:
    x = as_node(x)
    p = _row_softmax(x.value)

    def back(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _make(p, "softmax", [(x, "x")], back)


def _check_one_hot(t: np.ndarray, shape: tuple) -> None:
    if t.shape != shape:
        raise DimensionError(f"targets shape {t.shape} does not match logits {shape}")
    if not (np.all((t == 0.0) | (t == 1.0)) and np.all(t.sum(axis=1) == 1.0)):
        raise ValidationError("targets must be one-hot rows")


def softmax_cross_entropy(logits, targets) -> Node:
    """Mean over rows of ``-log softmax(logits)[target]``."""
    logits = as_node(logits)
    t = np.asarray(targets.value if isinstance(targets, Node) else targets, dtype=np.float64)
    if logits.ndim != 2:
        raise DimensionError(f"logits must be a matrix, got {logits.shape}")
    _check_one_hot(t, logits.shape)
    v = logits.value
    shifted = v - v.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    b = v.shape[0]
    loss = float(np.mean(lse - (shifted * t).sum(axis=1)))
    p = _row_softmax(v)
    return _make(np.array(loss), "softmax_cross_entropy", [(logits, "logits")],
                 lambda g: (g * (p - t) / b,))


def binary_cross_entropy_with_logits(logits, labels) -> Node:
    """Mean of ``softplus(l) - y*l`` for labels ``y`` in {0, 1}."""
    logits = as_node(logits)
    y = np.asarray(labels, dtype=np.float64).reshape(logits.shape)
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValidationError("binary labels must be 0 or 1")
    v = logits.value
    n = v.size
    loss = float(np.mean(np.logaddexp(0.0, v) - y * v))
    return _make(np.array(loss), "bce_with_logits", [(logits, "logits")],
                 lambda g: (g * (expit(v) - y) / n,))


# ---------------------------------------------------------------------------
# gradient checking

def grad_check(f: Callable[[], Node], leaves: Iterable[Node], eps: float = 1e-5) -> float:
    """Max relative error between backward gradients and central differences.

    ``f`` must rebuild the graph from ``leaves`` on every call. Relative error
    per element is ``|a - n| / max(1, |a|, |n|)``.
    """
    leaves = list(leaves)
    analytic = backward(f())
    worst = 0.0
    for leaf in leaves:
        a = analytic.get(leaf)
        if a is None:
            a = np.zeros_like(leaf.value)
        v = leaf.value
        for idx in np.ndindex(v.shape):
            orig = v[idx]
            v[idx] = orig + eps
            fp = float(f().value)
            v[idx] = orig - eps
            fm = float(f().value)
            v[idx] = orig
            num = (fp - fm) / (2.0 * eps)
            an = float(a[idx])
            err = abs(an - num) / max(1.0, abs(an), abs(num))
            worst = max(worst, err)
    return worst
