"""Anytime branch-and-bound on the signs of ReLU input distances.

Each leaf domain fixes the sign of some ReLU input distances. Inside a
domain the constrained neurons use their exact triangle hulls, and the
constraints themselves enter the bound through Lagrange multipliers that
are tuned by projected gradient ascent. The global interval is the union
of all leaf intervals, so it is sound whenever the search is stopped.
"""
from __future__ import annotations

import csv
import heapq
import io
import itertools
import time
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .autodiff import grad, param
from .graph import Graph, check
from .lowering import lower
from .propagate import BranchTerm, ConcreteBounds, _concretize, _substitute, exact_relaxations, relu_intervals_var
from .relax import BranchSign, IntervalBound, LayerRelaxation, apply_branches, relax_relu

SELECTIONS = ("gap",)


@dataclass(frozen=True)
class BnBConfig:
    max_splits: int = 16
    timeout: float = 60.0
    beta_steps: int = 20
    beta_lr: float = 0.05
    selection: str = "gap"

    def __post_init__(self):
        if self.max_splits < 0 or self.beta_steps < 0:
            raise ValueError("max_splits and beta_steps must be nonnegative")
        if self.timeout <= 0 or self.beta_lr <= 0:
            raise ValueError("timeout and beta_lr must be positive")
        if self.selection not in SELECTIONS:
            raise ValueError(f"unknown selection heuristic {self.selection!r}")


Constraint = tuple[str, int, BranchSign]


@dataclass
class Domain:
    constraints: tuple[Constraint, ...] = ()
    betas_lower: np.ndarray = field(default_factory=lambda: np.zeros(0))
    betas_upper: np.ndarray = field(default_factory=lambda: np.zeros(0))
    bounds: ConcreteBounds | None = None
    exhausted: bool = False

    def __post_init__(self):
        keys = [(n, i) for n, i, _ in self.constraints]
        if len(set(keys)) != len(keys):
            raise ValueError("neuron constrained twice")
        k = len(self.constraints)
        if self.betas_lower.size != k:
            self.betas_lower = np.zeros(k)
        if self.betas_upper.size != k:
            self.betas_upper = np.zeros(k)

    def child(self, node: str, index: int, sign: BranchSign) -> "Domain":
        return Domain(self.constraints + ((node, index, sign),))

    @property
    def badness(self) -> float:
        return float(max(-self.bounds.lo[0], self.bounds.hi[0]))


@dataclass(frozen=True)
class HistoryEntry:
    time: float
    splits: int
    lo: float
    hi: float


@dataclass
class BnBResult:
    best: ConcreteBounds
    history: list[HistoryEntry]
    domains_explored: int
    splits: int
    leaves: list[Domain]

    def history_csv(self, timing: bool = True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["time_s", "splits", "lo", "hi"])
        for h in self.history:
            w.writerow([f"{h.time:.6f}" if timing else "", h.splits, repr(h.lo), repr(h.hi)])
        return buf.getvalue()


def select_branch_neuron(
    graph: Graph, intervals: Mapping[str, IntervalBound], domain: Domain
) -> tuple[str, int] | None:
    """Unconstrained unstable neuron with the largest relaxation gap ``-l*u/(u-l)``.

    Ties go to the smallest ``(node id, index)``; ``None`` means every
    unstable neuron is already constrained.
    """
    taken = {(n, i) for n, i, _ in domain.constraints}
    best, best_key = None, None
    for nid in sorted(intervals):
        iv = intervals[nid]
        l, u = np.asarray(iv.lo, dtype=float), np.asarray(iv.hi, dtype=float)
        unstable = (l < 0) & (u > 0)
        for i in np.flatnonzero(unstable):
            if (nid, int(i)) in taken:
                continue
            score = -l[i] * u[i] / (u[i] - l[i])
            key = (-score, nid, int(i))
            if best_key is None or key < best_key:
                best, best_key = (nid, int(i)), key
    return best


def _domain_relaxations(base: Mapping[str, LayerRelaxation], domain: Domain) -> dict[str, LayerRelaxation]:
    relax = dict(base)
    per_node: dict[str, dict[int, BranchSign]] = {}
    for nid, idx, sign in domain.constraints:
        per_node.setdefault(nid, {})[idx] = sign
    for nid, cons in per_node.items():
        relax[nid] = apply_branches(base[nid], cons)
    return relax


def _terms(domain: Domain, graph: Graph, betas) -> list[BranchTerm]:
    # constraints name ReLU nodes; the multiplier acts on the ReLU's input distance
    return [
        BranchTerm(graph.nodes[nid].inputs[0], idx, sign.lagrange_sign, betas[k])
        for k, (nid, idx, sign) in enumerate(domain.constraints)
    ]


def bound_domain(
    graph: Graph,
    intervals: Mapping[str, IntervalBound],
    domain: Domain,
    delta: float,
    config: BnBConfig,
    base_relax: Mapping[str, LayerRelaxation] | None = None,
) -> ConcreteBounds:
    """Bound the output variation on one domain, tuning its multipliers.

    Returns the best lower and best upper bound seen over all iterates,
    starting from zero multipliers, and stores the maximizing multipliers
    on ``domain``.
    """
    if base_relax is None:
        base_relax = _base_relaxations(graph, intervals)
    relax = _domain_relaxations(base_relax, domain)
    target = graph.output_id
    k = len(domain.constraints)
    if k == 0:
        A, b, C, d = _substitute(graph, relax, target)
        lo, hi = _concretize(A, b, C, d, delta)
        domain.bounds = ConcreteBounds(lo.value, hi.value, delta)
        return domain.bounds

    bl, bu = np.zeros(k), np.zeros(k)
    best_lo, best_hi = -np.inf, np.inf
    best_bl, best_bu = bl.copy(), bu.copy()
    for step in range(config.beta_steps + 1):
        vl, vu = param(bl), param(bu)
        A, b, C, d = _substitute(
            graph,
            relax,
            target,
            branch_terms=_terms(domain, graph, [vl[i] for i in range(k)]),
            upper_terms=_terms(domain, graph, [vu[i] for i in range(k)]),
        )
        lo, hi = _concretize(A, b, C, d, delta)
        lo_v, hi_v = float(lo.value[0]), float(hi.value[0])
        if lo_v > best_lo:
            best_lo, best_bl = lo_v, bl.copy()
        if hi_v < best_hi:
            best_hi, best_bu = hi_v, bu.copy()
        if step == config.beta_steps:
            break
        g_l, g_u = grad(lo[0] - hi[0], [vl, vu])
        new_bl = np.maximum(bl + config.beta_lr * g_l, 0.0)
        new_bu = np.maximum(bu + config.beta_lr * g_u, 0.0)
        if np.array_equal(new_bl, bl) and np.array_equal(new_bu, bu):
            break
        bl, bu = new_bl, new_bu
    domain.betas_lower, domain.betas_upper = best_bl, best_bu
    domain.bounds = ConcreteBounds(best_lo, best_hi, delta)
    return domain.bounds


def _base_relaxations(graph: Graph, intervals: Mapping[str, IntervalBound]) -> dict[str, LayerRelaxation]:
    relax = {nid: r.as_numpy() for nid, r in exact_relaxations(graph).items()}
    for nid, iv in intervals.items():
        relax[nid] = relax_relu(iv)
    return relax


def _clip(child: ConcreteBounds, parent: ConcreteBounds) -> ConcreteBounds:
    return ConcreteBounds(np.maximum(child.lo, parent.lo), np.minimum(child.hi, parent.hi), child.delta)


def run(graph: Graph, delta: float, config: BnBConfig | None = None) -> BnBResult:
    """Refine the certified output-variation interval of a scalar network."""
    config = config or BnBConfig()
    g = lower(check(graph))
    if g.output_size != 1:
        raise ValueError("branch-and-bound needs a scalar output; use select_output first")
    t0 = time.perf_counter()
    iv_var, relax_var = relu_intervals_var(g, delta)
    intervals = {nid: IntervalBound(lo.value, hi.value) for nid, (lo, hi) in iv_var.items()}
    base_relax = {nid: r.as_numpy() for nid, r in relax_var.items()}

    root = Domain()
    bound_domain(g, intervals, root, delta, config, base_relax)
    counter = itertools.count()
    heap = [(-root.badness, next(counter), root)]
    finished: list[Domain] = []
    lo, hi = float(root.bounds.lo[0]), float(root.bounds.hi[0])
    history = [HistoryEntry(time.perf_counter() - t0, 0, lo, hi)]
    splits, explored = 0, 1

    while heap and splits < config.max_splits and time.perf_counter() - t0 < config.timeout:
        _, _, leaf = heapq.heappop(heap)
        choice = select_branch_neuron(g, intervals, leaf)
        if choice is None:
            leaf.exhausted = True
            finished.append(leaf)
            continue
        nid, idx = choice
        for sign in (BranchSign.NONPOSITIVE, BranchSign.NONNEGATIVE):
            child = leaf.child(nid, idx, sign)
            bound_domain(g, intervals, child, delta, config, base_relax)
            child.bounds = _clip(child.bounds, leaf.bounds)
            heapq.heappush(heap, (-child.badness, next(counter), child))
        splits += 1
        explored += 2
        leaves = finished + [d for _, _, d in heap]
        lo = min(float(d.bounds.lo[0]) for d in leaves)
        hi = max(float(d.bounds.hi[0]) for d in leaves)
        history.append(HistoryEntry(time.perf_counter() - t0, splits, lo, hi))

    leaves = finished + [d for _, _, d in sorted(heap, key=lambda e: e[1])]
    return BnBResult(ConcreteBounds(lo, hi, delta), history, explored, splits, leaves)


def worst_case_merge(bounds: Sequence[ConcreteBounds]) -> ConcreteBounds:
    """Union interval of sub-domain bounds that together cover the parent domain."""
    lo = np.min([b.lo for b in bounds], axis=0)
    hi = np.max([b.hi for b in bounds], axis=0)
    return ConcreteBounds(lo, hi, bounds[0].delta)
