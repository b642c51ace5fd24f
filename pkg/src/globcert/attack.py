"""Empirical lower bounds on the largest output variation.

Both searches return witnesses ``(x, dx)``; replaying a witness through
:func:`globcert.graph.forward` reproduces the reported variation exactly.
A certified interval must always contain what these searches find.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import grad, param
from .graph import Graph, check, forward, forward_var
from .lowering import lower


@dataclass(frozen=True)
class AttackConfig:
    steps: int = 40
    restarts: int = 3
    step_size: float = 0.25  # per-step move, as a fraction of delta
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1 or self.restarts < 1 or self.step_size <= 0:
            raise ValueError("steps, restarts and step_size must be positive")


@dataclass
class UnderApprox:
    eps_under: np.ndarray  # max |F(x+dx) - F(x)| found, per output channel
    witnesses: list[tuple[np.ndarray, np.ndarray]]
    observed_min: np.ndarray | None = None  # signed extremes (sampling only)
    observed_max: np.ndarray | None = None

    def replay(self, graph: Graph) -> np.ndarray:
        out = []
        for c, (x, dx) in enumerate(self.witnesses):
            v = forward(graph, x + dx) - forward(graph, x)
            out.append(abs(np.ravel(v)[c]))
        return np.array(out)

    def to_dict(self) -> dict:
        d = {"eps_under": self.eps_under.tolist()}
        if self.observed_min is not None:
            d["observed_min"] = self.observed_min.tolist()
            d["observed_max"] = self.observed_max.tolist()
        return d


def _variation(graph: Graph, x: np.ndarray, dx: np.ndarray) -> np.ndarray:
    n = x.shape[0]
    return (forward(graph, x + dx) - forward(graph, x)).reshape(n, -1)


def pgd_variation(graph: Graph, inputs, delta: float, config: AttackConfig | None = None) -> UnderApprox:
    """Sign-gradient ascent of ``+-(F(x + dx) - F(x))`` over the delta box around each input."""
    config = config or AttackConfig()
    inputs = getattr(inputs, "inputs", inputs)
    x = np.asarray(inputs, dtype=float)
    check(graph)
    if x.shape == graph.input_shape:
        x = x[None]
    if len(x) == 0:
        raise ValueError("attack needs at least one input point")
    g = lower(graph)
    n = len(x)
    flat = x.reshape(n, -1)
    base = forward(graph, x).reshape(n, -1)
    m = base.shape[1]
    rng = np.random.default_rng(config.seed)
    step = config.step_size * delta
    eps = np.zeros(m)
    witnesses = [(x[0].copy(), np.zeros_like(x[0])) for _ in range(m)]
    if delta == 0:
        return UnderApprox(eps, witnesses)
    for c in range(m):
        best_val = -1.0
        for direction in (1.0, -1.0):
            for r in range(config.restarts):
                dx = np.zeros_like(flat) if r == 0 else rng.uniform(-delta, delta, size=flat.shape)
                for _ in range(config.steps):
                    v = param(dx)
                    out = forward_var(g, flat + v)
                    (gd,) = grad((out[:, c] * direction).sum(), [v])
                    dx = np.clip(dx + step * np.sign(gd), -delta, delta)
                    cand = np.abs(_variation(graph, x, dx.reshape(x.shape))[:, c])
                    i = int(np.argmax(cand))
                    if cand[i] > best_val:
                        best_val = float(cand[i])
                        witnesses[c] = (x[i].copy(), dx[i].reshape(x.shape[1:]).copy())
        eps[c] = best_val
    return UnderApprox(eps, witnesses)


def sampling_oracle(
    graph: Graph,
    delta: float,
    n: int,
    seed: int = 0,
    box: tuple[float, float] = (0.0, 1.0),
    vertex_fraction: float = 0.0,
    chunk: int = 4096,
) -> UnderApprox:
    """Uniform draws of ``x`` from ``box`` and ``dx`` from the delta ball.

    ``vertex_fraction`` of the perturbations are drawn from the ball's
    corners instead, which is where linear pieces attain their extremes.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    check(graph)
    rng = np.random.default_rng(seed)
    shape = graph.input_shape
    m = graph.output_size
    lo_obs = np.full(m, np.inf)
    hi_obs = np.full(m, -np.inf)
    best = np.full(m, -1.0)
    witnesses: list = [None] * m
    done = 0
    while done < n:
        k = min(chunk, n - done)
        x = rng.uniform(box[0], box[1], size=(k,) + shape)
        dx = rng.uniform(-delta, delta, size=(k,) + shape)
        n_vert = int(round(vertex_fraction * k))
        if n_vert:
            dx[:n_vert] = delta * rng.choice([-1.0, 1.0], size=(n_vert,) + shape)
        var = _variation(graph, x, dx)
        lo_obs = np.minimum(lo_obs, var.min(axis=0))
        hi_obs = np.maximum(hi_obs, var.max(axis=0))
        mag = np.abs(var)
        for c in range(m):
            i = int(np.argmax(mag[:, c]))
            if mag[i, c] > best[c]:
                best[c] = mag[i, c]
                witnesses[c] = (x[i].copy(), dx[i].copy())
        done += k
    return UnderApprox(best, witnesses, lo_obs, hi_obs)
