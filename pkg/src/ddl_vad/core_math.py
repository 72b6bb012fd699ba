"""Dense float64 array primitives with a reverse-mode gradient tape.

Every primitive accepts either plain ``numpy`` arrays or :class:`Node` objects.
With plain arrays it simply returns the forward value. When at least one
operand is a node that requires gradients, the result is a new node recorded
on the operand's :class:`Tape`, together with the vector-Jacobian products
needed to push adjoints back to the operands.

Scalars are 0-d arrays, vectors 1-d, matrices 2-d.
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import ndtr

DTYPE = np.float64
LN_EPS = 1e-5
DEGENERATE_NORM = 1e-12


class ShapeError(ValueError):
    pass


class NonFiniteError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class Node:
    """A value recorded on a tape."""

    __slots__ = ("value", "tape", "parents", "index", "requires_grad", "name")
    __array_priority__ = 100  # make ndarray <op> Node dispatch to Node

    def __init__(self, value, tape, parents=(), requires_grad=True, name=None):
        self.value = value
        self.tape = tape
        self.parents = parents
        self.requires_grad = requires_grad
        self.name = name
        self.index = tape._push(self)

    @property
    def shape(self):
        return self.value.shape

    @property
    def T(self):
        return transpose(self)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Node{label}(shape={self.value.shape})"

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

    def __truediv__(self, other):
        if isinstance(other, Node):
            raise TypeError("division by a node is not supported")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return index(self, key)


class Tape:
    """Records primitive operations in execution order.

    Parameters are registered by name with :meth:`param`; :meth:`backward`
    returns one gradient array per registered parameter.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.params: dict[str, Node] = {}
        self._backward_done = False

    def _push(self, node):
        self.nodes.append(node)
        return len(self.nodes) - 1

    def param(self, name: str, value) -> Node:
        if name in self.params:
            raise TapeError(f"parameter {name!r} already registered")
        node = Node(_as_array(value), self, name=name)
        self.params[name] = node
        return node

    def params_from(self, values: dict) -> dict[str, Node]:
        return {name: self.param(name, v) for name, v in values.items()}

    def const(self, value) -> Node:
        return Node(_as_array(value), self, requires_grad=False)

    def reset(self):
        """Allow another backward pass over the recorded graph."""
        self._backward_done = False

    def backward(self, loss: Node) -> dict[str, np.ndarray]:
        if not isinstance(loss, Node) or loss.tape is not self:
            raise TapeError("loss was not recorded on this tape")
        if loss.value.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.value.shape}")
        if self._backward_done:
            raise TapeError("backward already ran on this tape; call reset() first")
        self._backward_done = True

        adjoints: dict[int, np.ndarray] = {loss.index: np.ones_like(loss.value)}
        for node in reversed(self.nodes[: loss.index + 1]):
            g = adjoints.pop(node.index, None)
            if g is None:
                continue
            if node.name is not None and node.name in self.params:
                adjoints[node.index] = g  # keep leaf adjoints
            for parent, vjp in node.parents:
                contrib = vjp(g)
                prev = adjoints.get(parent.index)
                adjoints[parent.index] = contrib if prev is None else prev + contrib
        return {
            name: np.array(adjoints.get(p.index, np.zeros_like(p.value)), dtype=DTYPE).reshape(p.value.shape)
            for name, p in self.params.items()
        }


def _as_array(x) -> np.ndarray:
    arr = np.asarray(x, dtype=DTYPE)
    return arr


def _value(x):
    return x.value if isinstance(x, Node) else _as_array(x)


def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Node) and x.requires_grad:
            return x.tape
    return None


def _record(value, inputs: Sequence, vjps: Sequence[Callable]):
    """Wrap ``value`` as a node if any input needs gradients."""
    tape = _tape_of(*inputs)
    if tape is None:
        return value
    parents = tuple(
        (x, vjp) for x, vjp in zip(inputs, vjps) if isinstance(x, Node) and x.requires_grad
    )
    return Node(value, tape, parents)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_finite(arr, op):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op}: non-finite input")


# elementwise arithmetic

def add(a, b):
    av, bv = _value(a), _value(b)
    return _record(av + bv, (a, b), (lambda g: _unbroadcast(g, av.shape), lambda g: _unbroadcast(g, bv.shape)))


def sub(a, b):
    av, bv = _value(a), _value(b)
    return _record(av - bv, (a, b), (lambda g: _unbroadcast(g, av.shape), lambda g: -_unbroadcast(g, bv.shape)))


def mul(a, b):
    av, bv = _value(a), _value(b)
    return _record(
        av * bv,
        (a, b),
        (lambda g: _unbroadcast(g * bv, av.shape), lambda g: _unbroadcast(g * av, bv.shape)),
    )


def square(a):
    av = _value(a)
    return _record(av * av, (a,), (lambda g: 2.0 * av * g,))


def absolute(a):
    av = _value(a)
    return _record(np.abs(av), (a,), (lambda g: np.sign(av) * g,))


def log(a):
    av = _value(a)
    return _record(np.log(av), (a,), (lambda g: g / av,))


def relu(a):
    av = _value(a)
    return _record(np.maximum(av, 0.0), (a,), (lambda g: g * (av > 0.0),))


# reductions and reshaping

def total(a):
    av = _value(a)
    return _record(np.sum(av), (a,), (lambda g: np.broadcast_to(g, av.shape).copy(),))


def mean(a):
    av = _value(a)
    n = av.size
    return _record(np.sum(av) / n, (a,), (lambda g: np.full(av.shape, g / n),))


def reshape(a, shape):
    av = _value(a)
    return _record(av.reshape(shape), (a,), (lambda g: g.reshape(av.shape),))


def transpose(a):
    av = _value(a)
    if av.ndim != 2:
        raise ShapeError(f"transpose needs a matrix, got shape {av.shape}")
    return _record(av.T.copy(), (a,), (lambda g: g.T,))


def index(a, key):
    """Basic or integer-array indexing; gradient scatters back with ``np.add.at``."""
    av = _value(a)
    out = np.array(av[key], dtype=DTYPE)

    def vjp(g):
        grad = np.zeros_like(av)
        np.add.at(grad, key, g)
        return grad

    return _record(out, (a,), (vjp,))


def concat(parts: Iterable, axis: int = 0):
    parts = list(parts)
    values = [_value(p) for p in parts]
    out = np.concatenate(values, axis=axis)
    bounds = np.cumsum([0] + [v.shape[axis] for v in values])

    def make_vjp(lo, hi):
        def vjp(g):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            return g[tuple(sl)]

        return vjp

    vjps = [make_vjp(bounds[i], bounds[i + 1]) for i in range(len(parts))]
    return _record(out, parts, vjps)


# linear algebra

def matmul(a, b):
    av, bv = _value(a), _value(b)
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {av.shape} x {bv.shape}")
    return _record(av @ bv, (a, b), (lambda g: g @ bv.T, lambda g: av.T @ g))


# nonlinearities

def softmax_rows(m):
    """Row-wise softmax, stabilized by subtracting each row's max."""
    mv = _value(m)
    if mv.ndim != 2:
        raise ShapeError(f"softmax_rows needs a matrix, got shape {mv.shape}")
    _check_finite(mv, "softmax_rows")
    e = np.exp(mv - mv.max(axis=1, keepdims=True))
    p = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return p * (g - np.sum(g * p, axis=1, keepdims=True))

    return _record(p, (m,), (vjp,))


def _layer_norm_grads(g, xhat, inv_std, gain):
    n = xhat.shape[1]
    dgain = np.sum(g * xhat, axis=0, keepdims=True)
    dbias = np.sum(g, axis=0, keepdims=True)
    dxhat = g * gain
    dx = inv_std / n * (
        n * dxhat - dxhat.sum(axis=1, keepdims=True) - xhat * np.sum(dxhat * xhat, axis=1, keepdims=True)
    )
    return dx, dgain, dbias


def layer_norm(m, gain, bias, eps: float = LN_EPS):
    mv, gv, bv = _value(m), _value(gain), _value(bias)
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    if mv.ndim != 2 or gv.shape != (1, mv.shape[1]) or bv.shape != (1, mv.shape[1]):
        raise ShapeError(f"layer_norm shapes: input {mv.shape}, gain {gv.shape}, bias {bv.shape}")
    mu = mv.mean(axis=1, keepdims=True)
    centered = mv - mu
    var = np.mean(centered * centered, axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = xhat * gv + bv

    cache = {}

    def grads(g):
        # one shared computation per upstream adjoint
        if cache.get("g") is not g:
            cache["g"] = g
            cache["res"] = _layer_norm_grads(g, xhat, inv_std, gv)
        return cache["res"]

    return _record(
        out,
        (m, gain, bias),
        (lambda g: grads(g)[0], lambda g: grads(g)[1], lambda g: grads(g)[2]),
    )


_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(m):
    """Exact GELU, ``x * Phi(x)``."""
    mv = _value(m)
    cdf = ndtr(mv)
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * mv * mv)
    return _record(mv * cdf, (m,), (lambda g: g * (cdf + mv * pdf),))


def _stable_sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(m):
    mv = _value(m)
    s = _stable_sigmoid(np.atleast_1d(mv)).reshape(mv.shape)
    return _record(s, (m,), (lambda g: g * s * (1.0 - s),))


# cosine distances

def cosine_distance(a, b) -> tuple[float, bool]:
    """``1 - cos(a, b)`` plus a flag that is set when either norm is ~0.

    Degenerate pairs get the neutral distance 1.
    """
    a = np.asarray(a, dtype=DTYPE).ravel()
    b = np.asarray(b, dtype=DTYPE).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < DEGENERATE_NORM or nb < DEGENERATE_NORM:
        return 1.0, True
    return float(1.0 - np.dot(a, b) / (na * nb)), False


def consecutive_cosine_distance(m):
    """Cosine distance between each row and the next: length ``rows - 1``.

    Pairs involving a near-zero row get distance 1 and no gradient.
    """
    mv = _value(m)
    if mv.ndim != 2 or mv.shape[0] < 2:
        raise ShapeError(f"need a matrix with at least 2 rows, got shape {mv.shape}")
    norms = np.linalg.norm(mv, axis=1)
    bad = norms < DEGENERATE_NORM
    safe = np.where(bad, 1.0, norms)
    u = mv / safe[:, None]
    a, b = u[:-1], u[1:]
    cos = np.sum(a * b, axis=1)
    degenerate = bad[:-1] | bad[1:]
    out = np.where(degenerate, 1.0, 1.0 - cos)

    def vjp(g):
        g = np.where(degenerate, 0.0, g)[:, None]
        # d cos / d x_t = (u_{t+1} - cos u_t) / |x_t|, and symmetrically
        da = -g * (b - cos[:, None] * a) / safe[:-1, None]
        db = -g * (a - cos[:, None] * b) / safe[1:, None]
        grad = np.zeros_like(mv)
        grad[:-1] += da
        grad[1:] += db
        return grad

    return _record(out, (m,), (vjp,))
