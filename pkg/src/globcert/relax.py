"""Per-layer linear bounds on a layer's output distance.

For a layer ``x_i = f(x_j, x_k)`` a :class:`LayerRelaxation` holds
``psi_j dx_j + psi_k dx_k + lam <= dx_i <= omega_j dx_j + omega_k dx_k + mu``.
Elementwise layers store their coefficients as diagonal vectors.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Any

import numpy as np

from .autodiff import Var, as_var, value_of, where

STABLE_EPS = 1e-12


class RelaxationError(ValueError):
    pass


@dataclass(frozen=True)
class IntervalBound:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo, hi = value_of(self.lo), value_of(self.hi)
        if lo.shape != hi.shape:
            raise RelaxationError("interval bounds differ in shape")
        if np.any(lo > hi):
            raise RelaxationError("interval with lo > hi")

    @property
    def unstable(self) -> np.ndarray:
        """Neurons whose distance interval straddles zero."""
        return (value_of(self.lo) < 0) & (value_of(self.hi) > 0)


class BranchSign(enum.Enum):
    NONPOSITIVE = "nonpositive"  # dx_j <= 0
    NONNEGATIVE = "nonnegative"  # dx_j >= 0

    @property
    def lagrange_sign(self) -> int:
        return 1 if self is BranchSign.NONPOSITIVE else -1


@dataclass(frozen=True)
class Side:
    j: Any
    k: Any = None
    offset: Any = None


@dataclass(frozen=True)
class LayerRelaxation:
    lower: Side
    upper: Side
    diagonal: bool
    exact: bool = False  # lower is upper: no relaxation gap

    def as_numpy(self) -> "LayerRelaxation":
        def conv(side):
            return Side(*(None if v is None else value_of(v) for v in (side.j, side.k, side.offset)))

        lo = conv(self.lower)
        return LayerRelaxation(lo, lo if self.exact else conv(self.upper), self.diagonal, self.exact)

    def bounds(self, dx_j, dx_k=None) -> tuple[np.ndarray, np.ndarray]:
        """Evaluate the lower and upper lines at given input distances."""
        r = self.as_numpy()

        def ev(side):
            apply = (lambda c, x: c * x) if r.diagonal else (lambda c, x: x @ c.T)
            v = apply(side.j, np.asarray(dx_j, dtype=float))
            if side.k is not None:
                v = v + apply(side.k, np.asarray(dx_k, dtype=float))
            if side.offset is not None:
                v = v + side.offset
            return v

        return ev(r.lower), ev(r.upper)


def relax_linear(W) -> LayerRelaxation:
    s = Side(W)
    return LayerRelaxation(s, s, diagonal=False, exact=True)


def relax_identity(n: int) -> LayerRelaxation:
    s = Side(np.ones(n))
    return LayerRelaxation(s, s, diagonal=True, exact=True)


def relax_add(n: int) -> LayerRelaxation:
    s = Side(np.ones(n), np.ones(n))
    return LayerRelaxation(s, s, diagonal=True, exact=True)


def relax_sub(n: int) -> LayerRelaxation:
    s = Side(np.ones(n), -np.ones(n))
    return LayerRelaxation(s, s, diagonal=True, exact=True)


def relu_coefficients(lo, hi):
    """Slopes and offsets of the ReLU-distance hull over ``[lo, hi]``.

    Works on arrays or tape values; differentiable in ``lo`` and ``hi`` for
    neurons whose interval straddles zero. Returns
    ``(lower_slope, lower_offset, upper_slope, upper_offset)``.
    """
    lo, hi = as_var(lo), as_var(hi)
    l, u = lo.value, hi.value
    if np.any(l > u):
        raise RelaxationError("interval with lo > hi")
    zero = (np.abs(l) < STABLE_EPS) & (np.abs(u) < STABLE_EPS)
    neg = (u <= STABLE_EPS) & ~zero
    pos = (l >= -STABLE_EPS) & ~zero & ~neg
    unstable = ~(zero | neg | pos)
    den = where(unstable, hi - lo, 1.0)
    lo_u = where(unstable, lo, 0.0)
    hi_u = where(unstable, hi, 0.0)
    # lower line through (l, l) and (u, 0); upper line through (l, 0) and (u, u)
    lower_slope = where(unstable, -lo_u / den, np.where(neg, 1.0, 0.0))
    lower_offset = where(unstable, hi_u * lo_u / den, 0.0)
    upper_slope = where(unstable, hi_u / den, np.where(pos, 1.0, 0.0))
    upper_offset = where(unstable, -hi_u * lo_u / den, 0.0)
    return lower_slope, lower_offset, upper_slope, upper_offset


def relax_relu(bound: IntervalBound) -> LayerRelaxation:
    ls, lo, us, uo = (v.value for v in relu_coefficients(bound.lo, bound.hi))
    return LayerRelaxation(Side(ls, offset=lo), Side(us, offset=uo), diagonal=True)


def relax_relu_var(lo: Var, hi: Var) -> LayerRelaxation:
    ls, lof, us, uof = relu_coefficients(lo, hi)
    return LayerRelaxation(Side(ls, offset=lof), Side(us, offset=uof), diagonal=True)


def relax_relu_branched(sign: BranchSign) -> LayerRelaxation:
    """Exact triangle hull of a single ReLU distance under a sign constraint on its input."""
    if sign is BranchSign.NONPOSITIVE:
        lower, upper = Side(np.ones(1), offset=np.zeros(1)), Side(np.zeros(1), offset=np.zeros(1))
    else:
        lower, upper = Side(np.zeros(1), offset=np.zeros(1)), Side(np.ones(1), offset=np.zeros(1))
    return LayerRelaxation(lower, upper, diagonal=True)


def apply_branches(relax: LayerRelaxation, constraints: dict[int, BranchSign]) -> LayerRelaxation:
    """Override the per-neuron ReLU hull with triangle hulls for constrained neurons."""
    if not constraints:
        return relax
    r = relax.as_numpy()
    ls, lo, us, uo = (np.array(v, dtype=float) for v in (r.lower.j, r.lower.offset, r.upper.j, r.upper.offset))
    for idx, sign in constraints.items():
        b = relax_relu_branched(sign)
        ls[idx], lo[idx] = b.lower.j[0], b.lower.offset[0]
        us[idx], uo[idx] = b.upper.j[0], b.upper.offset[0]
    return LayerRelaxation(Side(ls, offset=lo), Side(us, offset=uo), diagonal=True)
