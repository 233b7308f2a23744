import numpy as np
import pytest
from scipy import stats

from qblatent.diagnostics import diagnostics
from qblatent.errors import SamplerAbort
from qblatent.sampler import HMCConfig, find_initial, leapfrog, nuts_sample, run_chains


def std_normal(x):
    return -0.5 * float(x @ x), -x


def correlated(rho):
    prec = np.linalg.inv(np.array([[1.0, rho], [rho, 1.0]]))
    return lambda x: (-0.5 * float(x @ prec @ x), -prec @ x)


class _Target:
    """Object form exposing ``logp_and_grad``."""

    def logp_and_grad(self, x):
        return std_normal(x)


class TestLeapfrog:
    def test_reversible(self, rng):
        q, p = rng.normal(size=3), rng.normal(size=3)
        q1, p1, _, _ = leapfrog(q, p, 0.1, std_normal)
        q2, p2, _, _ = leapfrog(q1, -p1, 0.1, std_normal)
        np.testing.assert_allclose(q2, q, atol=1e-14)
        np.testing.assert_allclose(-p2, p, atol=1e-14)

    def test_energy_error_second_order(self, rng):
        q, p = rng.normal(size=2), rng.normal(size=2)
        H = lambda q, p: 0.5 * q @ q + 0.5 * p @ p

        def err(eps, steps):
            a, b = q, p
            for _ in range(steps):
                a, b, _, _ = leapfrog(a, b, eps, std_normal)
            return abs(H(a, b) - H(q, p))

        e1, e2 = err(0.1, 10), err(0.05, 20)
        assert e1 / e2 == pytest.approx(4.0, rel=0.25)

    def test_flat_target(self, rng):
        q, p = rng.normal(size=4), rng.normal(size=4)
        flat = lambda x: (0.0, np.zeros_like(x))
        q1, p1, _, _ = leapfrog(q, p, 0.3, flat)
        np.testing.assert_allclose(q1, q + 0.3 * p)
        np.testing.assert_array_equal(p1, p)

    def test_metric(self, rng):
        q, p = rng.normal(size=2), rng.normal(size=2)
        flat = lambda x: (0.0, np.zeros_like(x))
        minv = np.array([[2.0, 0.5], [0.5, 1.0]])
        q1, _, _, _ = leapfrog(q, p, 0.5, flat, inv_metric=minv)
        np.testing.assert_allclose(q1, q + 0.5 * minv @ p)
        q2, _, _, _ = leapfrog(q, p, 0.5, flat, inv_metric=np.array([2.0, 3.0]))
        np.testing.assert_allclose(q2, q + 0.5 * np.array([2.0, 3.0]) * p)

    def test_nonfinite(self):
        bad = lambda x: (np.nan, x)
        _, _, lp, _ = leapfrog(np.zeros(2), np.ones(2), 0.1, bad, grad=np.zeros(2))
        assert lp == -np.inf


class TestConfig:
    @pytest.mark.parametrize("kwargs", [{"draws": 0}, {"warmup": -1}, {"target_accept": 1.0},
                                        {"max_depth": 0}, {"chains": 0}, {"metric": "full"}])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            HMCConfig(**kwargs)


class TestNUTS:
    def test_standard_normal_5d(self):
        cfg = HMCConfig(warmup=500, draws=2000, chains=4, seed=1)
        chains = run_chains(std_normal, cfg, draw_init=lambda r: r.normal(size=5))
        x = np.concatenate([c.draws for c in chains])
        assert np.all(np.abs(x.mean(axis=0)) < 0.1)
        assert np.all((x.var(axis=0) > 0.8) & (x.var(axis=0) < 1.2))
        assert diagnostics(chains).max_rhat <= 1.01

    @pytest.mark.parametrize("target", [0.8, 0.9, 0.95])
    def test_accept_matches_target(self, target):
        cfg = HMCConfig(warmup=1000, draws=1000, chains=1, seed=7, target_accept=target)
        ch = nuts_sample(std_normal, cfg, np.zeros(10))
        assert ch.mean_accept == pytest.approx(target, abs=0.1)
        assert np.all(np.isfinite(ch.logp))

    def test_marginal_ks(self):
        cfg = HMCConfig(warmup=500, draws=4000, chains=1, seed=3)
        ch = nuts_sample(std_normal, cfg, np.zeros(2))
        # thin to reduce autocorrelation before the KS comparison
        d = stats.kstest(ch.draws[::2, 0], "norm").statistic
        assert d <= 0.03

    @pytest.mark.parametrize("metric", ["diag", "dense"])
    def test_correlation(self, metric):
        cfg = HMCConfig(warmup=500, draws=2000, chains=2, seed=4, metric=metric)
        chains = run_chains(correlated(0.9), cfg, draw_init=lambda r: r.normal(size=2))
        x = np.concatenate([c.draws for c in chains])
        assert np.corrcoef(x.T)[0, 1] == pytest.approx(0.9, abs=0.03)

    def test_dense_metric_learns_covariance(self):
        cfg = HMCConfig(warmup=600, draws=50, chains=1, seed=5, metric="dense")
        ch = nuts_sample(correlated(0.9), cfg, np.zeros(2))
        assert ch.inv_metric.shape == (2, 2)
        assert ch.inv_metric[0, 1] / np.sqrt(ch.inv_metric[0, 0] * ch.inv_metric[1, 1]) > 0.7

    def test_deterministic(self):
        cfg = HMCConfig(warmup=100, draws=100, chains=2, seed=11)
        a = run_chains(_Target(), cfg, draw_init=lambda r: r.normal(size=3))
        b = run_chains(_Target(), cfg, draw_init=lambda r: r.normal(size=3))
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.draws, y.draws)
        assert not np.array_equal(a[0].draws, a[1].draws)

    def test_chain_independent_of_count(self):
        one = run_chains(std_normal, HMCConfig(warmup=50, draws=50, chains=1, seed=2),
                         draw_init=lambda r: r.normal(size=2))
        two = run_chains(std_normal, HMCConfig(warmup=50, draws=50, chains=2, seed=2),
                         draw_init=lambda r: r.normal(size=2))
        np.testing.assert_array_equal(one[0].draws, two[0].draws)

    def test_chain_record(self):
        ch = nuts_sample(std_normal, HMCConfig(warmup=50, draws=30, seed=0), np.zeros(2))
        assert len(ch) == 30
        for arr in (ch.logp, ch.accept_stat, ch.divergent, ch.tree_depth, ch.n_leapfrog, ch.energy):
            assert arr.shape == (30,)
        assert np.all((ch.accept_stat >= 0) & (ch.accept_stat <= 1))
        assert np.all(ch.tree_depth <= 10)
        np.testing.assert_allclose(ch.logp, [std_normal(x)[0] for x in ch.draws])

    def test_max_depth_respected(self):
        ch = nuts_sample(std_normal, HMCConfig(warmup=0, draws=20, max_depth=2, init_step=1e-3,
                                               adapt_mass=False), np.zeros(3))
        assert np.all(ch.tree_depth <= 2)
        assert np.all(ch.n_leapfrog <= 3)

    def test_support_boundary(self):
        # half-normal on x > 0 through a -inf wall; no draw leaves the support
        def half(x):
            if x[0] <= 0:
                return -np.inf, np.zeros(1)
            return -0.5 * x[0] ** 2, -x
        ch = nuts_sample(half, HMCConfig(warmup=300, draws=1000, seed=6), np.array([1.0]))
        assert np.all(ch.draws > 0)
        assert ch.draws.mean() == pytest.approx(np.sqrt(2 / np.pi), abs=0.1)

    def test_abort_on_persistent_divergence(self):
        # a well-behaved target that turns -inf off the current point after a while
        calls = {"n": 0}

        def trap(x):
            calls["n"] += 1
            if calls["n"] > 200 and np.any(x != 0):
                return -np.inf, np.zeros_like(x)
            return std_normal(x)

        cfg = HMCConfig(warmup=100, draws=100, adapt_mass=False)
        with pytest.raises(SamplerAbort, match="50 consecutive"):
            nuts_sample(trap, cfg, np.zeros(2))

    def test_nonfinite_init(self):
        with pytest.raises(ValueError):
            nuts_sample(lambda x: (-np.inf, x), HMCConfig(), np.zeros(1))


class TestInit:
    def test_find_initial_skips_invalid(self):
        target = lambda x: (0.0, np.zeros(1)) if x[0] > 0 else (-np.inf, np.zeros(1))
        draws = iter([[-1.0], [-2.0], [3.0]])
        x = find_initial(target, lambda r: next(draws), None)
        assert x[0] == 3.0

    def test_find_initial_gives_up(self):
        with pytest.raises(SamplerAbort, match="100"):
            find_initial(lambda x: (-np.inf, x), lambda r: np.zeros(1), None)

    def test_needs_init_source(self):
        with pytest.raises(ValueError):
            run_chains(std_normal, HMCConfig(warmup=10, draws=10))

    def test_explicit_init(self):
        cfg = HMCConfig(warmup=0, draws=5, chains=2, adapt_mass=False)
        chains = run_chains(std_normal, cfg, init=np.full(2, 0.5))
        assert len(chains) == 2
