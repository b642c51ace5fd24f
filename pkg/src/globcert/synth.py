"""Random networks for property tests and desk experiments."""
from __future__ import annotations

import numpy as np

from .graph import Graph, GraphBuilder


def _w(rng, n_out, n_in):
    return rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_out, n_in))


def random_relu_graph(rng: np.random.Generator, max_layers: int = 4, max_width: int = 16, mixed: bool = True) -> Graph:
    """Scalar-output ReLU network with optional add/sub merges and skip connections.

    ``max_layers`` counts linear layers on the main path (at least 2).
    """
    b = GraphBuilder()
    n_in = int(rng.integers(1, 9))
    h = b.input((n_in,))
    width = n_in
    n_hidden = int(rng.integers(1, max_layers))
    for _ in range(n_hidden):
        w = int(rng.integers(2, max_width + 1))
        z = b.linear(h, _w(rng, w, width), rng.normal(0, 0.5, w))
        if mixed and rng.random() < 0.3:
            z2 = b.relu(b.linear(h, _w(rng, w, width), rng.normal(0, 0.5, w)))
            z = b.add(z, z2) if rng.random() < 0.5 else b.sub(z, z2)
        a = b.relu(z)
        if mixed and rng.random() < 0.3:
            skip = b.linear(h, _w(rng, w, width), np.zeros(w))
            a = b.add(a, skip) if rng.random() < 0.5 else b.sub(skip, a)
        h, width = a, w
    out = b.linear(h, _w(rng, 1, width), rng.normal(0, 0.5, 1))
    b.output(out)
    return b.build()


def random_affine_graph(rng: np.random.Generator, max_layers: int = 4, max_width: int = 16) -> Graph:
    """Network of linear, add and sub layers only (no relaxation gap)."""
    b = GraphBuilder()
    n_in = int(rng.integers(1, 9))
    h = b.input((n_in,))
    width = n_in
    for _ in range(int(rng.integers(0, max_layers))):
        w = int(rng.integers(1, max_width + 1))
        z = b.linear(h, _w(rng, w, width), rng.normal(0, 0.5, w))
        if rng.random() < 0.4:
            z2 = b.linear(h, _w(rng, w, width), rng.normal(0, 0.5, w))
            z = b.add(z, z2) if rng.random() < 0.5 else b.sub(z, z2)
        h, width = z, w
    b.output(b.linear(h, _w(rng, 1, width), rng.normal(0, 0.5, 1)))
    return b.build()


def random_pool_conv_graph(rng: np.random.Generator, pool: tuple[int, int] | None = None) -> Graph:
    """Conv -> ReLU -> maxpool -> linear network with windows of up to 9 elements.

    ``pool`` fixes the pooling window; by default it is drawn from 1x1 to 3x3.
    """
    b = GraphBuilder()
    c = int(rng.integers(1, 3))
    h, w = int(rng.integers(7, 10)), int(rng.integers(7, 10))
    x = b.input((c, h, w))
    cout = int(rng.integers(1, 4))
    k = int(rng.integers(1, 4))
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, 2))
    z = b.conv2d(x, rng.normal(size=(cout, c, k, k)), rng.normal(size=cout), stride=stride, padding=pad)
    a = b.relu(z)
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    if pool is None:
        kh, kw = int(rng.integers(1, min(3, ho) + 1)), int(rng.integers(1, min(3, wo) + 1))
    else:
        kh, kw = pool
    p = b.maxpool(a, (kh, kw))
    n = cout * ((ho - kh) // kh + 1) * ((wo - kw) // kw + 1)
    out = b.linear(p, rng.normal(size=(2, n)), rng.normal(size=2))
    b.output(out)
    return b.build()


def random_pool1d_graph(rng: np.random.Generator, window: int) -> Graph:
    b = GraphBuilder()
    m = int(rng.integers(1, 4))
    n = window * m
    x = b.input((n,))
    z = b.linear(x, rng.normal(size=(n, n)), rng.normal(size=n))
    p = b.maxpool(z, window)
    b.output(b.linear(p, rng.normal(size=(1, m))))
    return b.build()


def chain_graph(weight: float = 1.0) -> Graph:
    """``x -> w*x -> relu -> 1*h``: the smallest network with a relaxation gap."""
    b = GraphBuilder()
    x = b.input((1,))
    h = b.linear(x, [[weight]], [0.0], name="fc0")
    r = b.relu(h, name="relu")
    b.output(b.linear(r, [[1.0]], [0.0], name="fc1"))
    return b.build()
