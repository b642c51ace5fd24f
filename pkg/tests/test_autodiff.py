import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from globcert.autodiff import Var, cross_entropy, grad, kink_signature, param, where


def numeric_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


def check(fn, x, rtol=1e-5):
    v = param(x)
    (g,) = grad(fn(v), [v])
    num = numeric_grad(lambda z: float(fn(Var(z)).value), x)
    np.testing.assert_allclose(g, num, rtol=rtol, atol=1e-7)


class TestOps:
    @pytest.mark.parametrize(
        "fn",
        [
            lambda v: (v * v).sum(),
            lambda v: (v / (1.0 + v * v)).sum(),
            lambda v: (2.0 - v).sum() * 3.0,
            lambda v: (v @ np.arange(12.0).reshape(4, 3)).sum(),
            lambda v: (v.T @ v).sum(),
            lambda v: v[1:3].sum() + v[0, 0] * 2,
            lambda v: v.reshape(-1)[::2].sum(),
            lambda v: (v.sum(axis=1) * np.array([1.0, 2.0, 3.0, 4.0])).sum(),
            lambda v: where(v.value > 0, v * 2.0, v * v).sum(),
        ],
    )
    def test_gradients(self, rng, fn):
        check(fn, rng.uniform(0.2, 1.5, size=(4, 4)) * rng.choice([-1, 1], size=(4, 4)))

    def test_abs_pos_neg(self, rng):
        x = rng.uniform(0.1, 1, size=6) * rng.choice([-1, 1], size=6)
        check(lambda v: v.abs().sum() + 2 * v.pos().sum() - 3 * v.neg().sum(), x)

    def test_abs_grad_at_zero_is_zero(self):
        v = param(np.array([0.0, 2.0]))
        (g,) = grad(v.abs().sum(), [v])
        np.testing.assert_array_equal(g, [0.0, 1.0])

    def test_scatter_add(self, rng):
        A = param(rng.normal(size=(3, 4)))
        beta = param(np.array(0.7))
        out = A.scatter_add([2], beta * 2.0)
        np.testing.assert_allclose(out.value[:, 2], A.value[:, 2] + 1.4)
        gA, gb = grad((out * out).sum(), [A, beta])
        np.testing.assert_allclose(gb, 2.0 * 2 * out.value[:, 2].sum())

    def test_shared_subexpression_accumulates(self):
        v = param(np.array(3.0))
        w = v * v
        (g,) = grad(w + w * v, [v])
        assert g == pytest.approx(2 * 3.0 + 3 * 9.0)

    def test_unrelated_leaf_gets_zero(self):
        a, b = param(np.ones(2)), param(np.ones(3))
        ga, gb = grad(a.sum(), [a, b])
        np.testing.assert_array_equal(gb, np.zeros(3))

    @given(arrays(np.float64, (5, 3), elements=st.floats(-5, 5)), st.lists(st.integers(0, 2), min_size=5, max_size=5))
    @settings(max_examples=40, deadline=None)
    def test_cross_entropy(self, logits, labels):
        labels = np.array(labels)

        def ref(z):
            z = z - z.max(axis=1, keepdims=True)
            return float(np.mean(np.log(np.exp(z).sum(axis=1)) - z[np.arange(5), labels]))

        v = param(logits)
        out = cross_entropy(v, labels)
        assert float(out.value) == pytest.approx(ref(logits), rel=1e-9, abs=1e-12)
        (g,) = grad(out, [v])
        np.testing.assert_allclose(g, numeric_grad(ref, logits), atol=1e-6)


class TestKinks:
    def test_signature_changes_across_kink(self):
        def f(x):
            return param(np.array([x])).abs().sum()

        assert kink_signature(f(0.5)) == kink_signature(f(0.7))
        assert kink_signature(f(0.5)) != kink_signature(f(-0.5))
        assert kink_signature(f(0.0)) != kink_signature(f(1e-9))
