import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from globcert.graph import GraphBuilder, build_mlp, forward
from globcert.propagate import output_variation_bounds
from globcert.synth import chain_graph, random_relu_graph
from globcert.train import (
    Dataset,
    TrainConfig,
    accuracy,
    finite_diff_check,
    loss,
    metrics_csv,
    rgr_value,
    rgr_with_grad,
    sgd_train,
    with_weights,
)


def cross_entropy(graph, data):
    z = forward(graph, data.inputs).reshape(len(data), -1)
    z = z - z.max(axis=1, keepdims=True)
    return float(np.mean(np.log(np.exp(z).sum(axis=1)) - z[np.arange(len(data)), data.labels]))


@pytest.fixture
def toy():
    """Two linearly separable blobs in 2-D."""
    rng = np.random.default_rng(0)
    x = np.concatenate([rng.normal(-2, 0.5, (40, 2)), rng.normal(2, 0.5, (40, 2))])
    y = np.array([0] * 40 + [1] * 40)
    return Dataset(x, y)


class TestRGR:
    def test_linear_closed_form(self, linear23):
        r = rgr_with_grad(linear23, 0.1)
        assert r.value == pytest.approx(1.0, rel=1e-12)
        np.testing.assert_allclose(r.grads["fc"], [[0.2, -0.2]], rtol=1e-12)

    def test_chain(self):
        assert rgr_with_grad(chain_graph(), 1.0).value == 2.0

    def test_zero_delta(self, rng):
        g = random_relu_graph(rng)
        r = rgr_with_grad(g, 0.0)
        assert r.value == pytest.approx(float(r.hi[0] - r.lo[0]))
        assert r.value == 0.0

    @given(st.integers(0, 10_000), st.floats(0.0, 3.0))
    @settings(max_examples=30, deadline=None)
    def test_matches_certifier_and_nonnegative(self, seed, delta):
        g = random_relu_graph(np.random.default_rng(seed))
        r = rgr_with_grad(g, delta)
        cb = output_variation_bounds(g, delta)
        assert r.value >= 0
        assert r.value == pytest.approx(float(cb.hi[0] - cb.lo[0]), rel=1e-12, abs=1e-15)
        assert all(np.all(np.isfinite(v)) for v in r.grads.values())

    def test_multi_output_sum_and_max(self, rng):
        g = build_mlp([3, 6, 4], rng)
        cb = output_variation_bounds(g, 0.2)
        assert rgr_with_grad(g, 0.2).value == pytest.approx(cb.width.sum())
        assert rgr_with_grad(g, 0.2, agg="max").value == pytest.approx(cb.width.max())
        assert rgr_value(g, 0.2) == pytest.approx(cb.width.sum())

    def test_conv_graph_rejected(self, rng):
        b = GraphBuilder()
        x = b.input((1, 4, 4))
        b.output(b.linear(b.conv2d(x, np.ones((1, 1, 2, 2))), np.ones((1, 9))))
        with pytest.raises(ValueError):
            rgr_with_grad(b.build(), 0.1)


class TestLoss:
    def test_lambda_zero_is_cross_entropy(self, toy, rng):
        g = build_mlp([2, 4, 2], rng)
        value, grads = loss(g, toy, TrainConfig(lambda_reg=0.0))
        assert value == pytest.approx(cross_entropy(g, toy), rel=1e-12)
        assert set(grads) == {"fc0", "fc1"}

    def test_regularizer_independent_of_batch(self, toy, rng):
        g = build_mlp([2, 4, 2], rng)
        cfg, plain = TrainConfig(lambda_reg=0.7), TrainConfig(lambda_reg=0.0)
        reg = rgr_with_grad(g, cfg.delta).value
        for idx in (slice(0, 1), slice(0, 64)):
            batch = toy.subset(idx)
            diff = loss(g, batch, cfg)[0] - loss(g, batch, plain)[0]
            assert diff == pytest.approx(0.7 * reg, rel=1e-9)

    def test_rgr_bitwise_stable(self, rng):
        g = build_mlp([3, 5, 2], rng)
        a = rgr_with_grad(g, 0.1).value
        rng.permutation(10)
        assert rgr_with_grad(g, 0.1).value == a

    def test_gradient_matches_finite_differences(self, toy):
        rng = np.random.default_rng(7)
        g = build_mlp([2, 4, 2], rng)
        g = with_weights(g, {}, {})
        cfg = TrainConfig(lambda_reg=0.5, delta=0.1)
        batch = toy.subset(slice(30, 50))
        _, grads = loss(g, batch, cfg)
        worst = 0.0
        for nid in ("fc0", "fc1"):
            W = np.array(g.nodes[nid].weight)
            for idx in np.ndindex(W.shape):
                h = 1e-6 * (1 + abs(W[idx]))
                vals = []
                for s in (1, -1):
                    Wp = W.copy()
                    Wp[idx] += s * h
                    gp = g.with_nodes([g.nodes[k].replace(weight=Wp) if k == nid else g.nodes[k] for k in g.nodes])
                    vals.append(loss(gp, batch, cfg)[0])
                num = (vals[0] - vals[1]) / (2 * h)
                a = grads[nid][0][idx]
                worst = max(worst, abs(a - num) / max(abs(a), abs(num), 1e-6))
        assert worst <= 1e-4

    def test_empty_batch(self, rng):
        with pytest.raises(ValueError):
            loss(build_mlp([2, 2], rng), Dataset(np.zeros((0, 2)), np.zeros(0)), TrainConfig())

    def test_label_out_of_range(self, rng):
        with pytest.raises(ValueError):
            loss(build_mlp([2, 2], rng), Dataset(np.zeros((1, 2)), [5]), TrainConfig())


class TestConfig:
    @pytest.mark.parametrize(
        "kw", [{"lambda_reg": -1.0}, {"lr": 0.0}, {"batch_size": 0}, {"epochs": -1}, {"rgr_agg": "mean"}]
    )
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_dataset_lengths(self):
        with pytest.raises(ValueError):
            Dataset(np.zeros((3, 2)), [0, 1])


class TestSGD:
    def test_separable_reaches_full_accuracy(self, toy, rng):
        g = build_mlp([2, 8, 2], rng)
        trained, m = sgd_train(g, toy, TrainConfig(epochs=20, lr=0.1, batch_size=8))
        assert accuracy(trained, toy) == 1.0
        assert len(m) == 20 and m[-1].train_acc == 1.0

    def test_strong_regularizer_shrinks_rgr(self, toy, rng):
        g = build_mlp([2, 8, 2], rng)
        _, plain = sgd_train(g, toy, TrainConfig(epochs=5, delta=0.1))
        _, reg = sgd_train(g, toy, TrainConfig(epochs=5, delta=0.1, lambda_reg=10.0))
        assert reg[-1].rgr < plain[-1].rgr

    def test_zero_epochs_unchanged(self, toy, rng):
        g = build_mlp([2, 4, 2], rng)
        trained, m = sgd_train(g, toy, TrainConfig(epochs=0))
        assert m == []
        for nid in g.nodes:
            if g.nodes[nid].weight is not None:
                np.testing.assert_array_equal(trained.nodes[nid].weight, g.nodes[nid].weight)

    def test_biases_see_only_cross_entropy(self, toy, rng):
        g = build_mlp([2, 4, 2], rng)
        batch = toy.subset(slice(0, 16))
        _, a = loss(g, batch, TrainConfig(lambda_reg=0.0))
        _, b = loss(g, batch, TrainConfig(lambda_reg=5.0))
        for nid in a:
            np.testing.assert_allclose(a[nid][1], b[nid][1], rtol=0, atol=1e-15)

    def test_seeded_runs_identical(self, toy, rng):
        g = build_mlp([2, 4, 2], rng)
        cfg = TrainConfig(epochs=2, lambda_reg=0.1, seed=3)
        assert metrics_csv(sgd_train(g, toy, cfg, toy)[1]) == metrics_csv(sgd_train(g, toy, cfg, toy)[1])

    def test_shape_mismatch(self, toy, rng):
        with pytest.raises(ValueError):
            sgd_train(build_mlp([3, 2], rng), toy, TrainConfig(epochs=1))


class TestFiniteDiff:
    def test_linear_net(self, rng):
        b = GraphBuilder()
        b.output(b.linear(b.input((4,)), rng.normal(size=(2, 4))))
        rep = finite_diff_check(b.build(), 0.1)
        assert rep.max_rel_error <= 1e-8 and rep.passed and not rep.excluded

    @pytest.mark.parametrize("seed", range(10))
    def test_relu_net(self, seed):
        g = build_mlp([2, 4, 4, 2], np.random.default_rng(seed))
        rep = finite_diff_check(g, 0.1)
        assert rep.passed, rep.to_dict()
        assert rep.checked + len(rep.excluded) == 8 + 16 + 8

    def test_zero_weight_is_kink(self):
        b = GraphBuilder()
        b.output(b.linear(b.input((2,)), [[0.0, 1.5]], name="fc"))
        rep = finite_diff_check(b.build(), 0.1)
        assert rep.excluded == [("fc", (0, 0))]
        assert rep.checked == 1 and rep.passed

    def test_detached_intervals(self):
        g = build_mlp([2, 3, 3, 1], np.random.default_rng(5))
        assert finite_diff_check(g, 0.2, detach_intervals=True).passed is True
