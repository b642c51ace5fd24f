"""Training with the certified variation width as a regularizer.

The regularizer is the width ``hi - lo`` of the certified output-variation
interval. It does not depend on the training batch, so it is computed once
per step. Gradients come from reverse-mode differentiation through the
whole bound computation, including the ReLU input intervals unless
``detach_intervals`` is set.
"""
from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import Var, cross_entropy, grad, kink_signature, param
from .graph import Graph, check, forward, forward_var
from .lowering import lower
from .propagate import compute_relu_input_intervals, output_variation_bounds, variation_bounds_var

AGGREGATIONS = ("sum", "max")


@dataclass
class Dataset:
    inputs: np.ndarray  # (N, *input_shape)
    labels: np.ndarray  # (N,) class indices
    split: str = "train"

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.inputs) != len(self.labels):
            raise ValueError(f"{len(self.inputs)} inputs but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx, split: str | None = None) -> "Dataset":
        return Dataset(self.inputs[idx], self.labels[idx], split or self.split)


@dataclass(frozen=True)
class TrainConfig:
    lambda_reg: float = 0.0
    delta: float = 2 / 255
    lr: float = 0.05
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    detach_intervals: bool = False
    rgr_agg: str = "sum"

    def __post_init__(self):
        if self.lambda_reg < 0:
            raise ValueError("lambda_reg must be nonnegative")
        if self.delta < 0 or self.lr <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("delta, lr, batch_size must be positive and epochs nonnegative")
        if self.rgr_agg not in AGGREGATIONS:
            raise ValueError(f"rgr_agg must be one of {AGGREGATIONS}")


@dataclass
class RGRValue:
    value: float
    grads: dict[str, np.ndarray]
    lo: np.ndarray = field(default_factory=lambda: np.zeros(0))
    hi: np.ndarray = field(default_factory=lambda: np.zeros(0))


def _params(graph: Graph) -> list[str]:
    ids = [nid for nid in graph.order if graph.nodes[nid].kind == "linear"]
    if any(graph.nodes[nid].kind == "conv2d" for nid in graph.order):
        raise ValueError("training supports linear layers only; lower convolutions into fixed layers first")
    return ids


def _rgr(g: Graph, delta: float, weights, detach: bool, agg: str, fixed=None) -> tuple[Var, Var, Var]:
    lo, hi = variation_bounds_var(g, delta, weights, detach_intervals=detach, fixed_intervals=fixed)
    width = hi - lo
    if agg == "sum":
        total = width.sum()
    else:
        total = width[int(np.argmax(width.value))]
    return total, lo, hi


def rgr_with_grad(graph: Graph, delta: float, detach_intervals: bool = False, agg: str = "sum") -> RGRValue:
    """Certified variation width and its gradient with respect to every linear weight.

    For multi-output graphs the per-channel widths are summed (or maxed).
    """
    ids = _params(check(graph))
    g = lower(graph)
    weights = {nid: param(graph.nodes[nid].weight) for nid in ids}
    total, lo, hi = _rgr(g, delta, weights, detach_intervals, agg)
    gs = grad(total, [weights[nid] for nid in ids])
    return RGRValue(float(total.value), dict(zip(ids, gs)), lo.value, hi.value)


def rgr_value(graph: Graph, delta: float, agg: str = "sum") -> float:
    cb = output_variation_bounds(graph, delta)
    w = cb.hi - cb.lo
    return float(w.sum() if agg == "sum" else w.max())


def _check_labels(graph: Graph, labels: np.ndarray):
    m = graph.output_size
    if np.any(labels < 0) or np.any(labels >= m):
        raise ValueError(f"labels must lie in [0, {m})")


def _loss(graph: Graph, g: Graph, ids, W, B, x, y, config: TrainConfig):
    weights = {nid: param(W[nid]) for nid in ids}
    biases = {nid: param(B[nid]) for nid in ids}
    logits = forward_var(g, x.reshape(len(x), -1), weights, biases)
    total = cross_entropy(logits, y)
    if config.lambda_reg > 0:
        reg, _, _ = _rgr(g, config.delta, weights, config.detach_intervals, config.rgr_agg)
        total = total + config.lambda_reg * reg
    gs = grad(total, [weights[n] for n in ids] + [biases[n] for n in ids])
    k = len(ids)
    return float(total.value), {nid: (gs[i], gs[k + i]) for i, nid in enumerate(ids)}


def loss(graph: Graph, batch: Dataset, config: TrainConfig) -> tuple[float, dict[str, tuple[np.ndarray, np.ndarray]]]:
    """Cross-entropy plus ``lambda_reg`` times the variation width; gradients per linear node as (dW, db)."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    ids = _params(check(graph))
    _check_labels(graph, batch.labels)
    W = {nid: graph.nodes[nid].weight for nid in ids}
    B = {nid: graph.nodes[nid].bias for nid in ids}
    return _loss(graph, lower(graph), ids, W, B, batch.inputs, batch.labels, config)


def with_weights(graph: Graph, W: dict, B: dict) -> Graph:
    nodes = [
        graph.nodes[nid].replace(weight=W[nid], bias=B[nid]) if nid in W else graph.nodes[nid]
        for nid in graph.nodes
    ]
    return graph.with_nodes(nodes)


def accuracy(graph: Graph, data: Dataset) -> float:
    if len(data) == 0:
        return float("nan")
    logits = forward(graph, data.inputs).reshape(len(data), -1)
    return float(np.mean(np.argmax(logits, axis=1) == data.labels))


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    train_acc: float
    test_acc: float
    rgr: float
    bound_max: float  # largest certified |variation| over channels
    bound_mean: float

    def row(self) -> dict:
        return asdict(self)


def sgd_train(
    graph: Graph, dataset: Dataset, config: TrainConfig, test: Dataset | None = None
) -> tuple[Graph, list[EpochMetrics]]:
    """Shuffled mini-batch SGD; biases only ever see the cross-entropy gradient."""
    ids = _params(check(graph))
    if dataset.inputs.shape[1:] != graph.input_shape:
        raise ValueError(f"dataset inputs {dataset.inputs.shape[1:]} do not match graph input {graph.input_shape}")
    _check_labels(graph, dataset.labels)
    g = lower(graph)
    rng = np.random.default_rng(config.seed)
    W = {nid: np.array(graph.nodes[nid].weight) for nid in ids}
    B = {nid: np.array(graph.nodes[nid].bias) for nid in ids}
    metrics: list[EpochMetrics] = []
    n = len(dataset)
    for epoch in range(1, config.epochs + 1):
        perm = rng.permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            g_cur = with_weights(g, W, B)
            value, grads = _loss(g_cur, g_cur, ids, W, B, dataset.inputs[idx], dataset.labels[idx], config)
            losses.append(value)
            for nid in ids:
                gW, gb = grads[nid]
                W[nid] = W[nid] - config.lr * gW
                B[nid] = B[nid] - config.lr * gb
        trained = with_weights(graph, W, B)
        cb = output_variation_bounds(trained, config.delta)
        width = cb.hi - cb.lo
        metrics.append(
            EpochMetrics(
                epoch=epoch,
                loss=float(np.mean(losses)),
                train_acc=accuracy(trained, dataset),
                test_acc=accuracy(trained, test) if test is not None else float("nan"),
                rgr=float(width.sum() if config.rgr_agg == "sum" else width.max()),
                bound_max=float(cb.magnitude.max()),
                bound_mean=float(cb.magnitude.mean()),
            )
        )
    return with_weights(graph, W, B), metrics


def metrics_csv(metrics: list[EpochMetrics]) -> str:
    buf = io.StringIO()
    fields = ["epoch", "loss", "train_acc", "test_acc", "rgr", "bound_max", "bound_mean"]
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for m in metrics:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in m.row().items()})
    return buf.getvalue()


# ---------------------------------------------------------------------------
# gradient check


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    checked: int
    excluded: list[tuple[str, tuple[int, ...]]]
    worst: tuple[str, tuple[int, ...]] | None

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error <= self.tolerance)

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "max_rel_error": self.max_rel_error,
            "tolerance": self.tolerance,
            "checked": self.checked,
            "excluded": [[nid, list(idx)] for nid, idx in self.excluded],
            "worst": None if self.worst is None else [self.worst[0], list(self.worst[1])],
        }


def finite_diff_check(
    graph: Graph,
    delta: float,
    tolerance: float = 1e-4,
    detach_intervals: bool = False,
    agg: str = "sum",
    rel_floor: float = 1e-6,
) -> GradCheckReport:
    """Compare the analytic gradient of the variation width with central differences.

    Step ``h = 1e-5 * (1 + |w|)``. A weight is excluded when the branch
    pattern of the nonsmooth operations (signs inside ``|.|``, positive and
    negative parts, ReLU hull cases) differs anywhere among ``w - h``, ``w``
    and ``w + h``: there the difference quotient straddles a kink.
    Relative error is ``|analytic - numeric| / max(|analytic|, |numeric|, rel_floor)``.
    With ``detach_intervals`` the numeric side also holds the ReLU input
    intervals at their unperturbed values, so both sides differentiate the
    same function.
    """
    ids = _params(check(graph))
    g = lower(graph)
    base = {nid: np.array(graph.nodes[nid].weight) for nid in ids}
    fixed = compute_relu_input_intervals(g, delta) if detach_intervals else None

    def evaluate(W):
        weights = {nid: param(W[nid]) for nid in ids}
        total, lo, hi = _rgr(g, delta, weights, detach_intervals, agg, fixed)
        return total, weights

    total, weights = evaluate(base)
    analytic = dict(zip(ids, grad(total, [weights[nid] for nid in ids])))
    sig0 = kink_signature(total)
    worst_err, worst = 0.0, None
    excluded, checked = [], 0
    for nid in ids:
        for idx in np.ndindex(base[nid].shape):
            w = base[nid][idx]
            h = 1e-5 * (1.0 + abs(w))
            vals, sigs = [], []
            for s in (1.0, -1.0):
                W = dict(base)
                W[nid] = base[nid].copy()
                W[nid][idx] = w + s * h
                t, _ = evaluate(W)
                vals.append(float(t.value))
                sigs.append(kink_signature(t))
            if sigs[0] != sig0 or sigs[1] != sig0:
                excluded.append((nid, idx))
                continue
            numeric = (vals[0] - vals[1]) / (2 * h)
            a = float(analytic[nid][idx])
            err = abs(a - numeric) / max(abs(a), abs(numeric), rel_floor)
            checked += 1
            if err > worst_err:
                worst_err, worst = err, (nid, idx)
    return GradCheckReport(worst_err, tolerance, checked, excluded, worst)
