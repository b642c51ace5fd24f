import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from globcert.graph import (
    Graph,
    GraphBuilder,
    GraphError,
    Node,
    build_mlp,
    check,
    conv_output_shape,
    forward,
    forward_all,
    pool_geometry,
    select_output,
    validate,
)
from globcert.synth import random_pool_conv_graph, random_relu_graph


def _kinds(report):
    return {v.kind for v in report}


class TestValidate:
    def test_minimal_linear_graph_is_clean(self):
        b = GraphBuilder()
        b.output(b.linear(b.input((2,)), np.ones((1, 2))))
        assert validate(b.build()) == []

    def test_add_shape_mismatch(self):
        b = GraphBuilder()
        x = b.input((2,))
        p = b.linear(x, np.ones((3, 2)))
        q = b.linear(x, np.ones((4, 2)))
        b.output(b.add(p, q))
        assert "shape" in _kinds(validate(b.build()))

    def test_two_cycle(self):
        nodes = {
            "x": Node("x", "input", attrs={"shape": (1,)}),
            "a": Node("a", "add", ("x", "b")),
            "b": Node("b", "relu", ("a",)),
            "y": Node("y", "output", ("b",)),
        }
        assert "cycle" in _kinds(validate(Graph(nodes, "x", "y")))

    def test_arity_and_dangling_reference(self):
        nodes = {
            "x": Node("x", "input", attrs={"shape": (1,)}),
            "a": Node("a", "add", ("x",)),
            "r": Node("r", "relu", ("ghost",)),
            "y": Node("y", "output", ("a",)),
        }
        kinds = _kinds(validate(Graph(nodes, "x", "y")))
        assert {"arity", "reference"} <= kinds

    def test_nonfinite_weight(self):
        b = GraphBuilder()
        b.output(b.linear(b.input((1,)), [[np.nan]]))
        assert not validate(b.build()).ok

    def test_check_raises(self):
        b = GraphBuilder()
        x = b.input((2,))
        b.output(b.add(b.linear(x, np.ones((3, 2))), x))
        with pytest.raises(GraphError):
            check(b.build())

    def test_unused_node_flagged(self):
        b = GraphBuilder()
        x = b.input((2,))
        b.relu(x, name="dead")
        b.output(b.linear(x, np.ones((1, 2))))
        assert not validate(b.build()).ok


class TestForward:
    def test_linear_arithmetic(self):
        b = GraphBuilder()
        b.output(b.linear(b.input((2,)), [[2.0, -3.0]], [0.5]))
        np.testing.assert_allclose(forward(b.build(), [1.0, 1.0]), [-0.5])

    def test_relu(self):
        b = GraphBuilder()
        b.output(b.relu(b.input((2,))))
        np.testing.assert_array_equal(forward(b.build(), [-1.0, 2.0]), [0.0, 2.0])

    def test_maxpool_window_four(self):
        b = GraphBuilder()
        b.output(b.maxpool(b.input((4,)), 4))
        np.testing.assert_array_equal(forward(b.build(), [1.0, 4.0, 2.0, 3.0]), [4.0])

    def test_maxpool_2x2(self):
        b = GraphBuilder()
        b.output(b.maxpool(b.input((1, 2, 2)), (2, 2)))
        np.testing.assert_array_equal(forward(b.build(), np.array([1.0, 4.0, 2.0, 3.0]).reshape(1, 2, 2)), [[[4.0]]])

    def test_shape_mismatch(self, chain):
        with pytest.raises(GraphError):
            forward(chain, np.zeros(3))

    def test_batch_matches_single(self, rng):
        g = random_relu_graph(rng)
        xs = rng.normal(size=(5,) + g.input_shape)
        batched = forward(g, xs)
        for i in range(5):
            np.testing.assert_allclose(forward(g, xs[i]), batched[i])

    def test_forward_all_covers_every_node(self, rng):
        g = random_pool_conv_graph(rng)
        vals = forward_all(g, rng.normal(size=(3,) + g.input_shape))
        assert set(vals) == set(g.nodes)
        for nid, v in vals.items():
            assert v.shape == (3,) + g.shapes[nid]


class TestShapes:
    @pytest.mark.parametrize(
        "in_shape,w_shape,stride,pad,expected",
        [
            ((1, 3, 3), (2, 1, 2, 2), 1, 0, (2, 2, 2)),
            ((3, 8, 8), (4, 3, 3, 3), 2, 1, (4, 4, 4)),
            ((1, 5, 7), (1, 1, 1, 1), 1, 0, (1, 5, 7)),
        ],
    )
    def test_conv_output_shape(self, in_shape, w_shape, stride, pad, expected):
        assert conv_output_shape(in_shape, w_shape, stride, pad) == expected

    def test_pool_geometry_groups_partition(self):
        shape, groups = pool_geometry((2, 4, 4), (2, 2))
        assert shape == (2, 2, 2)
        flat = sorted(i for g in groups for i in g)
        assert flat == list(range(32))

    @given(st.lists(st.integers(min_value=1, max_value=32), min_size=2, max_size=6))
    @settings(max_examples=30, deadline=None)
    def test_topological_order_respects_edges(self, widths):
        g = build_mlp(widths, 0)
        pos = {nid: i for i, nid in enumerate(g.order)}
        assert sorted(g.order) == sorted(g.nodes)
        for nid, n in g.nodes.items():
            for src in n.inputs:
                assert pos[src] < pos[nid]


class TestSelectOutput:
    def test_channel_three_of_ten(self, rng):
        g = build_mlp([4, 8, 10], rng)
        s = select_output(g, 3)
        x = rng.normal(size=(20, 4))
        assert s.output_size == 1
        np.testing.assert_allclose(forward(s, x)[:, 0], forward(g, x)[:, 3])

    def test_channel_zero_of_scalar(self, chain, rng):
        x = rng.normal(size=(10, 1))
        np.testing.assert_allclose(forward(select_output(chain, 0), x), forward(chain, x))

    def test_out_of_range(self, rng):
        with pytest.raises(IndexError):
            select_output(build_mlp([4, 8, 10], rng), 12)


class TestNodeImmutability:
    def test_weights_are_read_only(self, chain):
        with pytest.raises(ValueError):
            chain.nodes["fc0"].weight[0, 0] = 5.0

    def test_duplicate_id_rejected(self):
        b = GraphBuilder()
        b.input((1,))
        with pytest.raises(GraphError):
            b.relu("input", name="input")
