import numpy as np
import pytest

from globcert.attack import sampling_oracle
from globcert.bnb import BnBConfig, Domain, bound_domain, run, select_branch_neuron, worst_case_merge
from globcert.lowering import lower
from globcert.propagate import compute_relu_input_intervals, output_variation_bounds
from globcert.relax import BranchSign, IntervalBound
from globcert.synth import chain_graph, random_affine_graph, random_relu_graph

from conftest import sample_distances


def iv(lo, hi):
    return IntervalBound(np.array(lo, dtype=float), np.array(hi, dtype=float))


def constrained(dist, graph, domain):
    keep = np.ones(len(dist[graph.output_id]), dtype=bool)
    for nid, idx, sign in domain.constraints:
        d = dist[graph.nodes[nid].inputs[0]][:, idx]
        keep &= d <= 0 if sign is BranchSign.NONPOSITIVE else d >= 0
    return keep


class TestConfig:
    @pytest.mark.parametrize(
        "kw", [{"max_splits": -1}, {"timeout": 0.0}, {"beta_lr": 0.0}, {"beta_steps": -2}, {"selection": "random"}]
    )
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            BnBConfig(**kw)

    def test_domain_rejects_duplicate_neuron(self):
        with pytest.raises(ValueError):
            Domain((("r", 0, BranchSign.NONPOSITIVE), ("r", 0, BranchSign.NONNEGATIVE)))


class TestSelect:
    def test_largest_gap(self, chain):
        intervals = {"n1": iv([-1.0], [1.0]), "n2": iv([-0.1], [0.1])}
        assert select_branch_neuron(chain, intervals, Domain()) == ("n1", 0)

    def test_single_unstable(self, chain):
        intervals = {"a": iv([0.5, -2.0, -1.0], [1.0, -1.0, 3.0])}
        assert select_branch_neuron(chain, intervals, Domain()) == ("a", 2)

    def test_all_stable(self, chain):
        assert select_branch_neuron(chain, {"a": iv([0.0, -2.0], [1.0, 0.0])}, Domain()) is None

    def test_skips_constrained_and_breaks_ties(self, chain):
        intervals = {"b": iv([-1.0], [1.0]), "a": iv([-1.0, -1.0], [1.0, 1.0])}
        assert select_branch_neuron(chain, intervals, Domain()) == ("a", 0)
        dom = Domain((("a", 0, BranchSign.NONNEGATIVE),))
        assert select_branch_neuron(chain, intervals, dom) == ("a", 1)


class TestBoundDomain:
    @pytest.fixture
    def setup(self, chain):
        return chain, compute_relu_input_intervals(chain, 1.0)

    def test_root_matches_unbranched(self, setup):
        g, ivs = setup
        cb = bound_domain(g, ivs, Domain(), 1.0, BnBConfig())
        ref = output_variation_bounds(g, 1.0)
        np.testing.assert_array_equal(cb.lo, ref.lo)
        np.testing.assert_array_equal(cb.hi, ref.hi)

    @pytest.mark.parametrize("sign,expected", [(BranchSign.NONPOSITIVE, (-1.0, 0.0)), (BranchSign.NONNEGATIVE, (0.0, 1.0))])
    def test_chain_branches(self, setup, rng, sign, expected):
        g, ivs = setup
        dom = Domain((("relu", 0, sign),))
        cb = bound_domain(g, ivs, dom, 1.0, BnBConfig())
        assert (cb.lo[0], cb.hi[0]) == pytest.approx(expected, abs=1e-12)
        dist = sample_distances(g, rng, 1.0, n=10_000, box=(-2, 2))
        keep = constrained(dist, g, dom)
        out = dist[g.output_id][keep]
        assert np.all(out >= cb.lo - 1e-9) and np.all(out <= cb.hi + 1e-9)

    def test_chain_merge(self, setup):
        g, ivs = setup
        parts = [bound_domain(g, ivs, Domain((("relu", 0, s),)), 1.0, BnBConfig()) for s in BranchSign]
        merged = worst_case_merge(parts)
        assert (merged.lo[0], merged.hi[0]) == (-1.0, 1.0)

    @pytest.mark.parametrize("seed", range(6))
    def test_beta_never_worse_and_sound(self, seed):
        rng = np.random.default_rng(seed)
        g = lower(random_relu_graph(rng))
        delta = 0.5
        ivs = compute_relu_input_intervals(g, delta)
        dom = Domain()
        for _ in range(3):
            choice = select_branch_neuron(g, ivs, dom)
            if choice is None:
                break
            dom = dom.child(*choice, BranchSign(rng.choice([s.value for s in BranchSign])))
        zero = bound_domain(g, ivs, Domain(dom.constraints), delta, BnBConfig(beta_steps=0))
        tuned = bound_domain(g, ivs, dom, delta, BnBConfig())
        assert tuned.lo[0] >= zero.lo[0] and tuned.hi[0] <= zero.hi[0]
        assert np.all(dom.betas_lower >= 0) and np.all(dom.betas_upper >= 0)
        dist = sample_distances(g, rng, delta, n=10_000, box=(-2, 2))
        out = dist[g.output_id][constrained(dist, g, dom)]
        assert np.all(out >= tuned.lo - 1e-6) and np.all(out <= tuned.hi + 1e-6)


class TestRun:
    def test_linear_net_needs_no_split(self, rng):
        g = random_affine_graph(rng)
        res = run(g, 0.2, BnBConfig())
        ref = output_variation_bounds(g, 0.2)
        assert res.splits == 0
        np.testing.assert_allclose([res.best.lo[0], res.best.hi[0]], [ref.lo[0], ref.hi[0]])

    def test_chain_one_split(self):
        res = run(chain_graph(), 1.0, BnBConfig(max_splits=1))
        assert res.splits == 1 and res.domains_explored == 3
        assert (res.best.lo[0], res.best.hi[0]) == (-1.0, 1.0)
        assert len(res.leaves) == 2

    def test_zero_splits_equals_plain(self, rng):
        g = random_relu_graph(rng)
        res = run(g, 0.3, BnBConfig(max_splits=0))
        ref = output_variation_bounds(g, 0.3)
        assert (res.best.lo[0], res.best.hi[0]) == (ref.lo[0], ref.hi[0])
        assert len(res.history) == 1

    @pytest.mark.parametrize("seed", range(20))
    def test_anytime_monotone_and_sound(self, seed):
        rng = np.random.default_rng(100 + seed)
        g = random_relu_graph(rng, max_width=8)
        delta = 0.3
        res = run(g, delta, BnBConfig(max_splits=8))
        lo = [h.lo for h in res.history]
        hi = [h.hi for h in res.history]
        assert all(a <= b for a, b in zip(lo, lo[1:]))
        assert all(a >= b for a, b in zip(hi, hi[1:]))
        root = output_variation_bounds(g, delta)
        assert res.best.width[0] <= root.width[0]
        obs = sampling_oracle(g, delta, 10_000, seed=seed, box=(-2, 2), vertex_fraction=0.5)
        assert obs.observed_min[0] >= res.best.lo[0] - 1e-6
        assert obs.observed_max[0] <= res.best.hi[0] + 1e-6

    def test_deterministic(self, rng):
        g = random_relu_graph(rng)
        a = run(g, 0.5, BnBConfig(max_splits=6))
        b = run(g, 0.5, BnBConfig(max_splits=6))
        assert a.history_csv(timing=False) == b.history_csv(timing=False)
        assert a.domains_explored == b.domains_explored

    def test_history_csv_header(self):
        text = run(chain_graph(), 1.0).history_csv()
        assert text.splitlines()[0] == "time_s,splits,lo,hi"

    def test_needs_scalar_output(self):
        from globcert.graph import build_mlp

        with pytest.raises(ValueError):
            run(build_mlp([2, 3, 2]), 0.1)

    def test_timeout_stops(self, rng):
        g = random_relu_graph(rng)
        res = run(g, 1.0, BnBConfig(max_splits=10_000, timeout=1e-9))
        assert res.splits == 0
