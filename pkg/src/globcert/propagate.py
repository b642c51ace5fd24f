"""Backward substitution of linear bounds on hidden-state distances.

A bound on the output variation ``dF = F(x + dx) - F(x)`` is kept as two
linear forms over a frontier of nodes. Nodes are eliminated latest-first
in topological order, replacing each node's distance by its layer
relaxation, until only the input perturbation is left. Concretizing over
the L-infinity ball of radius ``delta`` then gives an interval that holds
for every input ``x``.

All computations run on :mod:`globcert.autodiff` values so the same pass
yields gradients for training and for the Lagrange multipliers of
branch-and-bound.
"""
from __future__ import annotations

import json
import time
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .autodiff import Var, as_var, value_of
from .graph import Graph, check, select_output
from .lowering import lower
from .relax import (
    IntervalBound,
    LayerRelaxation,
    relax_add,
    relax_identity,
    relax_linear,
    relax_relu,
    relax_relu_var,
    relax_sub,
)

ROBUST = "ROBUST"
UNKNOWN = "UNKNOWN"


class PropagationError(RuntimeError):
    pass


@dataclass
class LinearForm:
    """``sum_i coeffs[i] @ dx_i + offset`` with one row per bounded quantity."""

    coeffs: dict[str, np.ndarray]
    offset: np.ndarray

    def evaluate(self, distances: Mapping[str, np.ndarray]) -> np.ndarray:
        """Evaluate on a batch of flattened distances ``{node: (batch, n_node)}``."""
        total = self.offset[None, :]
        for nid, A in self.coeffs.items():
            total = total + distances[nid] @ A.T
        return total


@dataclass
class BoundsPair:
    lower: LinearForm
    upper: LinearForm

    @classmethod
    def identity(cls, nid: str, n: int) -> "BoundsPair":
        return cls(LinearForm({nid: np.eye(n)}, np.zeros(n)), LinearForm({nid: np.eye(n)}, np.zeros(n)))


@dataclass(frozen=True)
class ConcreteBounds:
    lo: np.ndarray
    hi: np.ndarray
    delta: float

    def __post_init__(self):
        object.__setattr__(self, "lo", np.atleast_1d(np.asarray(self.lo, dtype=float)))
        object.__setattr__(self, "hi", np.atleast_1d(np.asarray(self.hi, dtype=float)))

    @property
    def width(self) -> np.ndarray:
        return self.hi - self.lo

    @property
    def magnitude(self) -> np.ndarray:
        """Largest absolute output variation the interval admits, per row."""
        return np.maximum(np.abs(self.lo), np.abs(self.hi))

    def contains(self, values, tol: float = 0.0) -> bool:
        v = np.asarray(values, dtype=float)
        return bool(np.all(v >= self.lo - tol) and np.all(v <= self.hi + tol))


@dataclass(frozen=True)
class BranchTerm:
    """Lagrangian term ``beta * sign * dx_node[index]`` enforcing one sign constraint.

    ``sign = +1`` encodes ``dx <= 0`` and ``sign = -1`` encodes ``dx >= 0``.
    ``beta`` may be a float or a tape value.
    """

    node: str
    index: int
    sign: int
    beta: object = 0.0

    def __post_init__(self):
        if self.sign not in (1, -1):
            raise ValueError("branch sign must be +1 or -1")
        if np.any(value_of(self.beta) < 0):
            raise ValueError("Lagrange multiplier must be nonnegative")


# ---------------------------------------------------------------------------
# relaxations


def exact_relaxations(graph: Graph, weights: Mapping[str, Var] | None = None) -> dict[str, LayerRelaxation]:
    """Relaxations of every layer that needs no interval information."""
    relax: dict[str, LayerRelaxation] = {}
    for nid in graph.order:
        n = graph.nodes[nid]
        size = graph.size(nid)
        if n.kind == "linear":
            W = weights[nid] if weights is not None and nid in weights else n.weight
            relax[nid] = relax_linear(W)
        elif n.kind == "add":
            relax[nid] = relax_add(size)
        elif n.kind == "sub":
            relax[nid] = relax_sub(size)
        elif n.kind == "output":
            relax[nid] = relax_identity(size)
        elif n.kind in ("conv2d", "maxpool"):
            raise PropagationError(f"[{nid}] {n.kind} must be lowered before propagation")
    return relax


# ---------------------------------------------------------------------------
# backward substitution


def _apply(A: Var, c, diagonal: bool) -> Var:
    return A * as_var(c) if diagonal else A @ as_var(c)


def _substitute(
    graph: Graph,
    relax: Mapping[str, LayerRelaxation],
    target: str,
    init: np.ndarray | None = None,
    branch_terms: Sequence[BranchTerm] = (),
    trace: list | None = None,
    upper_terms: Sequence[BranchTerm] | None = None,
):
    """Run the elimination; returns ``(A, b, C, d)`` as tape values over the input node.

    ``branch_terms`` enter the lower form as ``+beta*S`` and, unless
    ``upper_terms`` supplies separate multipliers, the upper form as ``-beta*S``.
    """
    if target not in graph.nodes or graph.input_id not in graph.ancestors(target):
        raise PropagationError(f"target {target!r} is unreachable from the input")
    n_t = graph.size(target)
    init = np.eye(n_t) if init is None else np.atleast_2d(np.asarray(init, dtype=float))
    rows = init.shape[0]
    lower: dict[str, Var] = {target: Var(init)}
    upper: dict[str, Var] = {target: Var(init)}
    b = Var(np.zeros(rows))
    d = Var(np.zeros(rows))
    lo_terms: dict[str, list[BranchTerm]] = defaultdict(list)
    up_terms: dict[str, list[BranchTerm]] = defaultdict(list)
    for t in branch_terms:
        lo_terms[t.node].append(t)
    for t in branch_terms if upper_terms is None else upper_terms:
        up_terms[t.node].append(t)

    def acc(forms, nid, val):
        forms[nid] = forms[nid] + val if nid in forms else val

    for nid in reversed(graph.order):
        if nid not in lower or nid == graph.input_id:
            continue
        A, C = lower.pop(nid), upper.pop(nid)
        for t in lo_terms.get(nid, ()):
            A = A.scatter_add([t.index], t.sign * as_var(t.beta))
        for t in up_terms.get(nid, ()):
            C = C.scatter_add([t.index], -t.sign * as_var(t.beta))
        if nid not in relax:
            raise PropagationError(f"missing relaxation for node {nid!r} ({graph.nodes[nid].kind})")
        r = relax[nid]
        operands = graph.nodes[nid].inputs
        if r.exact:
            s = r.lower
            for src, coef in zip(operands, (s.j, s.k)):
                contrib = A if r.diagonal and _is_ones(coef) else _apply(A, coef, r.diagonal)
                acc(lower, src, contrib)
                contrib = C if r.diagonal and _is_ones(coef) else _apply(C, coef, r.diagonal)
                acc(upper, src, contrib)
            if s.offset is not None:
                b = b + A @ as_var(s.offset)
                d = d + C @ as_var(s.offset)
        else:
            Ap, An = A.pos(), A.neg()
            Cp, Cn = C.pos(), C.neg()
            lo_side, up_side = r.lower, r.upper
            for src, psi, omega in zip(operands, (lo_side.j, lo_side.k), (up_side.j, up_side.k)):
                acc(lower, src, _apply(Ap, psi, r.diagonal) + _apply(An, omega, r.diagonal))
                acc(upper, src, _apply(Cp, omega, r.diagonal) + _apply(Cn, psi, r.diagonal))
            lam, mu = lo_side.offset, up_side.offset
            if lam is not None:
                b = b + Ap @ as_var(lam)
                d = d + Cn @ as_var(lam)
            if mu is not None:
                b = b + An @ as_var(mu)
                d = d + Cp @ as_var(mu)
        if trace is not None:
            trace.append(
                (
                    nid,
                    BoundsPair(
                        LinearForm({k: v.value.copy() for k, v in lower.items()}, b.value.copy()),
                        LinearForm({k: v.value.copy() for k, v in upper.items()}, d.value.copy()),
                    ),
                )
            )
    inp = graph.input_id
    n_in = graph.size(inp)
    A = lower.get(inp, Var(np.zeros((rows, n_in))))
    C = upper.get(inp, Var(np.zeros((rows, n_in))))
    return A, b, C, d


def _is_ones(c) -> bool:
    return not isinstance(c, Var) and c is not None and np.all(np.asarray(c) == 1.0)


def backward_substitute(
    graph: Graph,
    relaxations: Mapping[str, LayerRelaxation],
    target: str,
    branch_terms: Sequence[BranchTerm] = (),
    trace: list | None = None,
) -> BoundsPair:
    """Linear bounds of ``dx_target`` (one row per neuron) in terms of the input perturbation.

    ``trace``, if given, receives ``(eliminated node, BoundsPair over the frontier)``
    after each elimination step.
    """
    A, b, C, d = _substitute(graph, relaxations, target, branch_terms=branch_terms, trace=trace)
    inp = graph.input_id
    return BoundsPair(LinearForm({inp: A.value}, b.value), LinearForm({inp: C.value}, d.value))


def _concretize(A: Var, b: Var, C: Var, d: Var, delta: float) -> tuple[Var, Var]:
    lo = b - A.abs().sum(axis=1) * delta
    hi = d + C.abs().sum(axis=1) * delta
    return lo, hi


def concretize(bounds: BoundsPair, delta: float, input_id: str | None = None) -> ConcreteBounds:
    """Interval of the bounded quantity over ``||dx_in||_inf <= delta``."""
    if delta < 0:
        raise ValueError("delta must be nonnegative")
    for form in (bounds.lower, bounds.upper):
        keys = list(form.coeffs)
        if len(keys) != 1 or (input_id is not None and keys[0] != input_id):
            raise PropagationError(f"frontier not reduced to the input: {keys}")
    (A,) = bounds.lower.coeffs.values()
    (C,) = bounds.upper.coeffs.values()
    lo, hi = _concretize(Var(A), Var(bounds.lower.offset), Var(C), Var(bounds.upper.offset), delta)
    return ConcreteBounds(lo.value, hi.value, delta)


# ---------------------------------------------------------------------------
# interval bounds of ReLU inputs


def relu_intervals_var(
    graph: Graph,
    delta: float,
    weights: Mapping[str, Var] | None = None,
    detach: bool = False,
) -> tuple[dict[str, tuple[Var, Var]], dict[str, LayerRelaxation]]:
    """ReLU input-distance intervals in topological order, plus the full relaxation map."""
    relax = exact_relaxations(graph, weights)
    intervals: dict[str, tuple[Var, Var]] = {}
    for nid in graph.order:
        n = graph.nodes[nid]
        if n.kind != "relu":
            continue
        A, b, C, d = _substitute(graph, relax, n.inputs[0])
        lo, hi = _concretize(A, b, C, d, delta)
        if detach:
            lo, hi = lo.detach(), hi.detach()
        intervals[nid] = (lo, hi)
        relax[nid] = relax_relu_var(lo, hi)
    return intervals, relax


def compute_relu_input_intervals(graph: Graph, delta: float) -> dict[str, IntervalBound]:
    """Per-neuron interval of each ReLU's input distance, keyed by ReLU node id."""
    intervals, _ = relu_intervals_var(graph, delta)
    return {nid: IntervalBound(lo.value, hi.value) for nid, (lo, hi) in intervals.items()}


def variation_bounds_var(
    graph: Graph,
    delta: float,
    weights: Mapping[str, Var] | None = None,
    detach_intervals: bool = False,
    target: str | None = None,
    fixed_intervals: Mapping[str, IntervalBound] | None = None,
) -> tuple[Var, Var]:
    """Differentiable lower/upper variation of every row of ``target`` (default: the output).

    ``fixed_intervals`` replaces the ReLU input intervals by constants.
    """
    if fixed_intervals is None:
        _, relax = relu_intervals_var(graph, delta, weights, detach_intervals)
    else:
        relax = exact_relaxations(graph, weights)
        for nid, iv in fixed_intervals.items():
            relax[nid] = relax_relu(iv)
    A, b, C, d = _substitute(graph, relax, target or graph.output_id)
    return _concretize(A, b, C, d, delta)


def output_variation_bounds(graph: Graph, delta: float) -> ConcreteBounds:
    """Certified interval of ``F(x + dx) - F(x)`` for all ``x`` and ``||dx||_inf <= delta``.

    Multi-output graphs get one row per output channel.
    """
    if delta < 0:
        raise ValueError("delta must be nonnegative")
    g = lower(check(graph))
    lo, hi = variation_bounds_var(g, delta)
    return ConcreteBounds(lo.value, hi.value, delta)


# ---------------------------------------------------------------------------
# certification


@dataclass
class CertificateReport:
    delta: float
    epsilon: float
    lo: list[float]
    hi: list[float]
    verdict: str
    channel_verdicts: list[str]
    wall_time: float
    intervals: dict | None = None
    bnb: list[dict] | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self, timing: bool = True) -> dict:
        out = {
            "delta": self.delta,
            "epsilon": self.epsilon,
            "lo": self.lo,
            "hi": self.hi,
            "verdict": self.verdict,
            "channel_verdicts": self.channel_verdicts,
        }
        if self.intervals is not None:
            out["intervals"] = self.intervals
        if self.bnb is not None:
            out["bnb"] = self.bnb
        out.update(self.extra)
        if timing:
            out["wall_time"] = self.wall_time
        return out

    def to_json(self, timing: bool = True) -> str:
        return json.dumps(self.to_dict(timing), indent=2, sort_keys=True)


def robust_verdict(bounds: ConcreteBounds, epsilon: float) -> list[str]:
    if epsilon < 0:
        raise ValueError("epsilon must be nonnegative")
    return [ROBUST if m <= epsilon else UNKNOWN for m in bounds.magnitude]


def certify(
    graph: Graph,
    delta: float,
    epsilon: float,
    bnb_config=None,
    include_intervals: bool = False,
    channels: Sequence[int] | None = None,
) -> CertificateReport:
    """Decide (delta, epsilon)-global robustness, one scalar channel at a time.

    ROBUST is a proof; UNKNOWN only means the certified interval was too wide.
    """
    from . import bnb

    if epsilon < 0:
        raise ValueError("epsilon must be nonnegative")
    t0 = time.perf_counter()
    base = lower(check(graph))
    m = base.output_size
    channels = list(range(m)) if channels is None else list(channels)
    lo, hi, history = [], [], []
    for c in channels:
        g = base if m == 1 else select_output(base, c)
        if bnb_config is not None:
            res = bnb.run(g, delta, bnb_config)
            cb = res.best
            history.append({"channel": c, "splits": res.splits, "domains_explored": res.domains_explored})
        else:
            cb = output_variation_bounds(g, delta)
        lo.append(float(cb.lo[0]))
        hi.append(float(cb.hi[0]))
    bounds = ConcreteBounds(np.array(lo), np.array(hi), delta)
    verdicts = robust_verdict(bounds, epsilon)
    intervals = None
    if include_intervals:
        intervals = {
            nid: {"lo": iv.lo.tolist(), "hi": iv.hi.tolist()}
            for nid, iv in compute_relu_input_intervals(base, delta).items()
        }
    return CertificateReport(
        delta=float(delta),
        epsilon=float(epsilon),
        lo=lo,
        hi=hi,
        verdict=ROBUST if all(v == ROBUST for v in verdicts) else UNKNOWN,
        channel_verdicts=verdicts,
        wall_time=time.perf_counter() - t0,
        intervals=intervals,
        bnb=history if bnb_config is not None else None,
        extra={"channels": channels},
    )
