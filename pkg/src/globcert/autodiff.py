"""Minimal reverse-mode differentiation over numpy arrays.

Every operation on a :class:`Var` that depends on a differentiable leaf
records its parents together with a vector-Jacobian product. Operations
whose inputs are all constants produce constants, so the same code path
serves plain evaluation at almost no extra cost.

Nonsmooth operations (``abs``, positive/negative parts) keep the sign
pattern they branched on in ``Var.kink``; :func:`kink_signature` collects
those patterns so finite-difference checks can detect when a perturbation
crossed a nondifferentiable point.
"""
from __future__ import annotations

import hashlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Var",
    "as_var",
    "param",
    "grad",
    "where",
    "cross_entropy",
    "kink_signature",
    "value_of",
]

Vjp = Callable[[np.ndarray], np.ndarray]


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


class Var:
    """An array value on the differentiation tape."""

    __slots__ = ("value", "parents", "requires_grad", "kink")
    __array_priority__ = 1000.0

    def __init__(self, value, parents: Sequence[tuple["Var", Vjp]] = (), requires_grad: bool = False):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = tuple(parents)
        self.requires_grad = requires_grad or bool(self.parents)
        self.kink = None

    def __repr__(self) -> str:
        tag = ", grad" if self.requires_grad else ""
        return f"Var({self.value!r}{tag})"

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def T(self) -> "Var":
        return _make(self.value.T, [(self, lambda g: g.T)])

    def detach(self) -> "Var":
        return Var(self.value)

    # arithmetic -----------------------------------------------------------
    def __add__(self, other) -> "Var":
        other = as_var(other)
        a, b = self.shape, other.shape
        return _make(
            self.value + other.value,
            [(self, lambda g: _unbroadcast(g, a)), (other, lambda g: _unbroadcast(g, b))],
        )

    __radd__ = __add__

    def __neg__(self) -> "Var":
        return _make(-self.value, [(self, lambda g: -g)])

    def __sub__(self, other) -> "Var":
        other = as_var(other)
        a, b = self.shape, other.shape
        return _make(
            self.value - other.value,
            [(self, lambda g: _unbroadcast(g, a)), (other, lambda g: -_unbroadcast(g, b))],
        )

    def __rsub__(self, other) -> "Var":
        return as_var(other) - self

    def __mul__(self, other) -> "Var":
        other = as_var(other)
        x, y = self.value, other.value
        return _make(
            x * y,
            [(self, lambda g: _unbroadcast(g * y, x.shape)), (other, lambda g: _unbroadcast(g * x, y.shape))],
        )

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Var":
        other = as_var(other)
        x, y = self.value, other.value
        out = x / y
        return _make(
            out,
            [
                (self, lambda g: _unbroadcast(g / y, x.shape)),
                (other, lambda g: _unbroadcast(-g * out / y, y.shape)),
            ],
        )

    def __rtruediv__(self, other) -> "Var":
        return as_var(other) / self

    def __matmul__(self, other) -> "Var":
        other = as_var(other)
        x, y = self.value, other.value
        if y.ndim == 1:
            return _make(x @ y, [(self, lambda g: np.outer(g, y)), (other, lambda g: x.T @ g)])
        if x.ndim == 1:
            return _make(x @ y, [(self, lambda g: y @ g), (other, lambda g: np.outer(x, g))])
        return _make(x @ y, [(self, lambda g: g @ y.T), (other, lambda g: x.T @ g)])

    def __rmatmul__(self, other) -> "Var":
        return as_var(other) @ self

    def __getitem__(self, index) -> "Var":
        shape = self.shape

        def vjp(g):
            out = np.zeros(shape)
            np.add.at(out, index, g)
            return out

        return _make(self.value[index], [(self, vjp)])

    # reductions and reshapes ----------------------------------------------
    def sum(self, axis=None) -> "Var":
        shape = self.shape

        def vjp(g):
            if axis is not None:
                g = np.expand_dims(g, axis)
            return np.broadcast_to(g, shape).copy()

        return _make(self.value.sum(axis=axis), [(self, vjp)])

    def reshape(self, *shape) -> "Var":
        old = self.shape
        return _make(self.value.reshape(*shape), [(self, lambda g: g.reshape(old))])

    # nonsmooth elementwise maps ------------------------------------------
    def abs(self) -> "Var":
        s = np.sign(self.value)
        return _make(np.abs(self.value), [(self, lambda g: g * s)], kink=s)

    def pos(self) -> "Var":
        """Elementwise ``max(x, 0)``."""
        m = self.value > 0
        return _make(np.where(m, self.value, 0.0), [(self, lambda g: g * m)], kink=np.sign(self.value))

    def neg(self) -> "Var":
        """Elementwise ``min(x, 0)``."""
        m = self.value < 0
        return _make(np.where(m, self.value, 0.0), [(self, lambda g: g * m)], kink=np.sign(self.value))

    def scatter_add(self, cols: np.ndarray, values: "Var") -> "Var":
        """Return a copy with ``values`` added to columns ``cols`` of every row."""
        values = as_var(values)
        cols = np.asarray(cols, dtype=int)
        out = self.value.copy()
        out[..., cols] += values.value
        vshape = values.shape

        def vjp_values(g):
            return _unbroadcast(g[..., cols], vshape)

        return _make(out, [(self, lambda g: g), (values, vjp_values)])


def _make(value, parents, kink=None) -> Var:
    live = [(p, f) for p, f in parents if p.requires_grad]
    out = Var(value, live)
    if live and kink is not None:
        out.kink = kink
    return out


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def param(x) -> Var:
    """A differentiable leaf."""
    return Var(np.array(x, dtype=np.float64), requires_grad=True)


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def where(mask, a, b) -> Var:
    """Select ``a`` where ``mask`` holds, else ``b``. The mask is not differentiated."""
    mask = np.asarray(mask, dtype=bool)
    a, b = as_var(a), as_var(b)
    sa, sb = a.shape, b.shape
    return _make(
        np.where(mask, a.value, b.value),
        [
            (a, lambda g: _unbroadcast(np.where(mask, g, 0.0), sa)),
            (b, lambda g: _unbroadcast(np.where(mask, 0.0, g), sb)),
        ],
    )


def cross_entropy(logits: Var, labels: np.ndarray) -> Var:
    """Mean softmax cross-entropy of ``logits`` (batch, classes) against integer labels."""
    logits = as_var(logits)
    z = logits.value - logits.value.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    rows = np.arange(n)
    value = -logp[rows, labels].mean()

    def vjp(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return g * p / n

    return _make(value, [(logits, vjp)])


def _topo(out: Var) -> list[Var]:
    order, seen = [], set()
    stack = [(out, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p, _ in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def grad(out: Var, wrt: Iterable[Var]) -> list[np.ndarray]:
    """Gradients of the scalar ``out`` with respect to each leaf in ``wrt``."""
    wrt = list(wrt)
    if out.value.size != 1:
        raise ValueError("grad() needs a scalar output")
    grads: dict[int, np.ndarray] = {id(out): np.ones_like(out.value)}
    for node in reversed(_topo(out)):
        g = grads.pop(id(node), None) if node.parents else grads.get(id(node))
        if g is None:
            continue
        for parent, vjp in node.parents:
            contrib = vjp(g)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + contrib
            else:
                grads[key] = contrib
    return [grads.get(id(w), np.zeros_like(w.value)) for w in wrt]


def kink_signature(out: Var) -> str:
    """Digest of every branch decision taken by nonsmooth ops on the tape of ``out``."""
    h = hashlib.sha1()
    for node in _topo(out):
        if node.kink is not None:
            h.update(np.ascontiguousarray(node.kink, dtype=np.int8).tobytes())
    return h.hexdigest()
