import numpy as np
import pytest

from globcert.graph import GraphBuilder, forward_all
from globcert.synth import chain_graph


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def chain():
    return chain_graph()


@pytest.fixture
def linear23():
    """Single linear layer W = [[2, -3]]."""
    b = GraphBuilder()
    x = b.input((2,))
    b.output(b.linear(x, [[2.0, -3.0]], [0.5], name="fc"))
    return b.build()


def sample_distances(graph, rng, delta, n=2000, box=(0.0, 1.0)):
    """Per-node flattened distances ``dx_node`` for random consistent pairs ``(x, x + dx)``."""
    shape = graph.input_shape
    x = rng.uniform(*box, size=(n,) + shape)
    dx = rng.uniform(-delta, delta, size=(n,) + shape)
    a = forward_all(graph, x)
    b = forward_all(graph, x + dx)
    return {nid: (b[nid] - a[nid]).reshape(n, -1) for nid in a}
