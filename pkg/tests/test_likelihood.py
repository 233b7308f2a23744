import numpy as np
import pytest

from qblatent.errors import IdentificationError
from qblatent.likelihood import (
    DeconvModel,
    FactorModel,
    QuasiPosterior,
    RepMeasModel,
    build_Q,
    deconv_neg_loglik,
    factor_neg_loglik,
    fd_gradient,
    gradient_check,
    neg_loglik_grad,
    relative_errors,
    repmeas_neg_loglik,
    symmetrize_to_deconv,
)
from qblatent.mixture import MixtureParams, cf, cf_log_hess_1d
from qblatent.prior import PriorSpec, log_prior, sample_prior_state, unconstrain
from qblatent.quadrature import build_box, build_sphere_line

EMBED = np.array([[1.0, 1.0, 0.0], [1.0, 0.0, 1.0]])


def gauss_cf(var):
    return lambda t: np.exp(-0.5 * var * np.sum(np.atleast_2d(t) ** 2, axis=1)).astype(complex)


def _states(spec, n_blocks, rng, count):
    out = []
    while len(out) < count:
        out.append(np.concatenate([sample_prior_state(spec, rng) for _ in range(n_blocks)]))
    return out


def _worst_fd(qp, rng, count=5):
    worst = 0.0
    for x in _states(qp.spec, qp.n_blocks, rng, count):
        if not np.isfinite(qp.neg_loglik_grad(x)[0]):
            continue
        worst = max(worst, gradient_check(qp.neg_loglik_grad, x).max())
    return worst


class TestBuildQ:
    def test_embedding(self):
        Q, Qs = build_Q(EMBED)
        np.testing.assert_array_equal(Q, [[1, 1, 0], [1, 0, 0], [1, 0, 1]])
        np.testing.assert_allclose(Qs @ Q, np.eye(3), atol=1e-12)

    def test_proportional_columns(self):
        A = np.array([[1.0, 2.0], [1.0, 2.0]])
        with pytest.raises(IdentificationError) as info:
            build_Q(A)
        assert info.value.rank == 1

    def test_duplicated_loadings(self):
        with pytest.raises(IdentificationError, match="rank"):
            build_Q(np.array([[1.0, 1.0, 1.0], [1.0, 0.0, 0.0]]))

    def test_left_inverse_random(self, rng):
        A = rng.normal(size=(4, 5))
        Q, Qs = build_Q(A)
        assert Q.shape == (10, 5)
        np.testing.assert_allclose(Qs @ Q, np.eye(5), atol=1e-10)

    def test_nonfinite(self):
        with pytest.raises(ValueError):
            build_Q(np.array([[1.0, np.nan]]))


class TestDeconv:
    def test_point_mass_oracle(self):
        # n/2 * int_{-2}^{2} (1 - e^{-t^2/2})^2 dt, scipy.integrate.quad value
        quad = build_box(2.0, 4096, 1)
        m = DeconvModel.from_data([0.0], [0.0], quad, n=10)
        p = MixtureParams([1.0], [0.0], 1.0)
        assert m.value(p) == pytest.approx(5 * 0.9790107282344106, abs=1e-6)

    def test_shrinking_variance(self, rng):
        y = rng.normal(size=50)
        m = DeconvModel.from_data(y, y, build_box(2.0, 64, 1))
        vals = [m.value(MixtureParams([1.0], [0.0], s)) for s in (1.0, 0.1, 0.01, 1e-4, 1e-8)]
        assert all(a > b for a, b in zip(vals, vals[1:]))
        assert vals[-1] < 1e-6

    def test_permutation_invariance(self, rng):
        m = DeconvModel.from_data(rng.normal(size=40), rng.normal(size=40), build_box(2.0, 32, 1))
        p = MixtureParams([0.2, 0.5, 0.3], [-1.0, 0.5, 2.0], 0.7)
        assert m.value(p) == pytest.approx(m.value(p.permute([2, 0, 1])), rel=1e-13)

    def test_plain_cf_matching(self, rng):
        # aux sample {0} gives phi_eps = 1
        y = rng.normal(size=30)
        quad = build_box(2.0, 32, 1)
        m = DeconvModel.from_data(y, [0.0], quad, fold=False)
        p = MixtureParams([0.4, 0.6], [-0.5, 1.0], 0.8)
        t = quad.nodes[:, 0]
        phi_y = np.exp(1j * np.outer(t, y)).mean(axis=1)
        want = 15 * quad.weights @ np.abs(phi_y - cf(p, t)) ** 2
        assert m.value(p) == pytest.approx(want, rel=1e-12)

    def test_population_zero(self):
        quad = build_box(2.0, 128, 1)
        truth = MixtureParams([0.5, 0.5], [-2.0, 2.0], 1.0)
        m = DeconvModel.from_population(lambda t: cf(truth, t) * gauss_cf(0.25)(t), gauss_cf(0.25), quad, 1000)
        assert m.value(truth) <= 1e-9

    def test_fold_exact(self, rng):
        y, e = rng.normal(size=(40, 2)), rng.normal(size=(40, 2))
        quad = build_box(2.0, 12, 2)
        p = MixtureParams([0.3, 0.7], [[0.0, 1.0], [-1.0, 0.5]], np.eye(2))
        a = DeconvModel.from_data(y, e, quad, fold=True).value(p)
        b = DeconvModel.from_data(y, e, quad, fold=False).value(p)
        assert a == pytest.approx(b, rel=1e-12)

    @pytest.mark.parametrize("d", [1, 2])
    def test_gradient(self, rng, d):
        y, e = rng.normal(size=(100, d)) * 2, rng.laplace(size=(100, d)) * 0.5
        m = DeconvModel.from_data(y, e, build_box(2.0, 48 if d == 1 else 12, d))
        spec = PriorSpec(K=4, base_mean=np.zeros(d), base_cov=4 * np.eye(d))
        assert _worst_fd(QuasiPosterior(m, spec), rng) <= 1e-5


class TestRepMeas:
    def test_population_zero(self):
        quad = build_box(2.0, 128, 1)
        phi_x, phi_e = gauss_cf(1.0), gauss_cf(1.0)
        # E[i Y1 e^{itY2}] = phi_x'(t) phi_e(t)
        h12 = lambda t: (-t[:, 0] * phi_x(t) * phi_e(t))[:, None]
        m = RepMeasModel.from_population(lambda t: phi_x(t) * phi_e(t), h12, quad, 1000)
        assert m.value(MixtureParams([1.0], [0.0], 1.0)) <= 1e-10

    def test_population_zero_boundary(self):
        quad = build_sphere_line(2.0, 64, 16, 2)
        truth = MixtureParams([0.6, 0.4], [[-0.4, 0.2], [0.6, -0.3]], np.array([[1.0, 0.3], [0.3, 0.8]]))
        phi_e = gauss_cf(0.5)

        def h12(t):
            # grad phi_x times phi_e
            E = np.exp(1j * t @ truth.atoms.T)
            env = np.exp(-0.5 * np.einsum("nd,de,ne->n", t, truth.covariance, t))
            grad = env[:, None] * (1j * (E * truth.weights) @ truth.atoms) - (t @ truth.covariance) * cf(truth, t)[:, None]
            return grad * phi_e(t)[:, None]

        m = RepMeasModel.from_population(lambda t: cf(truth, t) * phi_e(t), h12, quad, 1000)
        assert m.boundary
        assert m.value(truth) <= 1e-9

    def test_point_mass_oracle(self):
        quad = build_box(1.0, 40_000, 1)
        m = RepMeasModel.from_data([0.0], [0.0], quad, n=6)
        assert m.value(MixtureParams([1.0], [0.0], 1.0)) == pytest.approx(6 / 3, rel=1e-8)

    def test_symmetrized_is_sum(self, rng):
        x = rng.normal(size=80)
        y1, y2 = x + rng.normal(size=80), x + rng.normal(size=80)
        m = RepMeasModel.from_data(y1, y2, build_box(2.0, 32, 1), symmetrized=True)
        p = MixtureParams([0.5, 0.5], [-0.5, 0.7], 0.9)
        total = m.directional(0).value(p) + m.directional(1).value(p)
        assert m.value(p) == pytest.approx(total, rel=1e-13)

    def test_floor_breach_is_infinite(self):
        m = RepMeasModel.from_data([0.1, -0.2], [0.3, 0.0], build_box(1.0, 4, 1), fold=False)
        m.nodes = np.array([[np.pi / 4]])
        m.weights = np.array([1.0])
        m.terms = [(np.ones(1, complex), np.zeros((1, 1), complex))]
        assert m.value(MixtureParams([0.5, 0.5], [-2.0, 2.0], 1.0)) == np.inf

    def test_boundary_needs_sphere(self):
        with pytest.raises(ValueError, match="SphereLine"):
            RepMeasModel.from_data([0.0, 1.0], [1.0, 0.0], build_box(1.0, 8, 1), boundary=True)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            RepMeasModel.from_data([0.0, 1.0], [1.0], build_box(1.0, 8, 1))

    def test_gradient_1d(self, rng):
        x = rng.normal(size=150)
        m = RepMeasModel.from_data(x + rng.normal(size=150), x + rng.normal(size=150),
                                   build_box(2.0, 48, 1), symmetrized=True)
        assert _worst_fd(QuasiPosterior(m, PriorSpec(K=4)), rng) <= 1e-5

    def test_gradient_boundary_2d(self, rng):
        x = rng.normal(size=(150, 2))
        m = RepMeasModel.from_data(x + rng.normal(size=(150, 2)), x + rng.normal(size=(150, 2)),
                                   build_sphere_line(2.0, 32, 8, 2))
        spec = PriorSpec(K=3, base_mean=np.zeros(2), base_cov=np.eye(2))
        assert _worst_fd(QuasiPosterior(m, spec), rng) <= 1e-5

    def test_gradient_permutation(self, rng):
        x = rng.normal(size=100)
        m = RepMeasModel.from_data(x + rng.normal(size=100), x + rng.normal(size=100), build_box(2.0, 32, 1))
        p = MixtureParams([0.2, 0.5, 0.3], [-1.0, 0.5, 2.0], 0.7)
        order = [2, 0, 1]
        _, (g,) = m.value_and_grad(p)
        _, (h,) = m.value_and_grad(p.permute(order))
        np.testing.assert_allclose(h[0], g[0][order], rtol=1e-12)
        np.testing.assert_allclose(h[1], g[1][order], rtol=1e-12)
        np.testing.assert_allclose(h[2], g[2], rtol=1e-12)


def _factor_population(latents, A, quad, target):
    """Analytic phi_Y and phi_Y^2-premultiplied Hessian for Y = A X."""
    A = np.asarray(A, dtype=float)

    def phi_y(t):
        s = t @ A
        return np.prod([cf(p, s[:, k]) for k, p in enumerate(latents)], axis=0)

    def combo(t):
        s = t @ A
        out = np.zeros((t.shape[0], A.shape[0], A.shape[0]), dtype=complex)
        for k, p in enumerate(latents):
            out += cf_log_hess_1d(p, s[:, k])[:, None, None] * np.outer(A[:, k], A[:, k])
        return phi_y(t)[:, None, None] ** 2 * out

    return FactorModel.from_population(phi_y, combo, A, quad, 1000, target=target)


SKEWED = MixtureParams([0.7, 0.3], [-0.6, 1.4], 0.8)  # mean zero, CF never vanishes


class TestFactor:
    @pytest.mark.parametrize("target", [1, 2, 3, "joint"])
    def test_population_zero_normal(self, target):
        N01 = MixtureParams([1.0], [0.0], 1.0)
        m = _factor_population([N01] * 3, EMBED, build_box(2.0, 48, 2), target)
        params = [N01] * 3 if target == "joint" else N01
        assert m.value(params) <= 1e-10

    @pytest.mark.parametrize("target", [1, "joint"])
    def test_population_zero_mixture(self, target):
        lat = [SKEWED, MixtureParams([1.0], [0.0], 0.5), MixtureParams([1.0], [0.0], 1.5)]
        m = _factor_population(lat, EMBED, build_box(2.0, 48, 2), target)
        assert m.value(lat if target == "joint" else SKEWED) <= 1e-9

    def test_point_mass_data(self):
        # zero Hessian combo, |phi| = 1: (n/2) sigma^4 (2T)^L
        Y = np.tile([0.3, -0.2], (7, 1))
        m = FactorModel.from_data(Y, EMBED, build_box(1.5, 16, 2), target=2)
        assert m.value(MixtureParams([1.0], [0.0], 0.6)) == pytest.approx(3.5 * 0.36 * 9.0, rel=1e-12)

    def test_single_residuals_are_Qstar_of_joint(self, rng):
        X = np.column_stack([rng.normal(size=200) for _ in range(3)])
        Y = X @ EMBED.T
        m = FactorModel.from_data(Y, EMBED, build_box(2.0, 16, 2), target="joint", fold=False)
        lat = [SKEWED, MixtureParams([1.0], [0.1], 0.9), MixtureParams([0.5, 0.5], [-0.3, 0.3], 1.1)]
        V = np.stack([cf_log_hess_1d(p, m.proj[:, k]) for k, p in enumerate(lat)], axis=1)
        joint = m.vech - m.phi2[:, None] * (V @ m.Q.T)
        np.testing.assert_allclose(m.single_residuals(lat), joint @ m.Qstar.T, atol=1e-12)

    def test_single_matches_dense_sum(self, rng):
        # the grouped evaluation equals the plain weighted sum over nodes
        X = rng.normal(size=(150, 3))
        quad = build_box(2.0, 16, 2)
        m = FactorModel.from_data(X @ EMBED.T, EMBED, quad, target=1, fold=False)
        p = MixtureParams([0.3, 0.7], [-1.0, 0.4], 1.2)
        r = m.single_residuals(p)[:, 0]
        want = 0.5 * m.n * m.weights @ np.abs(r) ** 2
        assert m.value(p) == pytest.approx(want, rel=1e-10)

    def test_premultiplied_equals_division_form(self, rng):
        X = rng.normal(size=(400, 3))
        Y = X @ EMBED.T
        m = FactorModel.from_data(Y, EMBED, build_box(1.0, 12, 2), target=1, fold=False)
        t = m.nodes
        E = np.exp(1j * t @ Y.T)
        phi = E.mean(axis=1)
        m1 = E @ Y / Y.shape[0]
        m2 = np.einsum("kn,na,nb->kab", E, Y, Y) / Y.shape[0]
        H = -m2 / phi[:, None, None] + m1[:, :, None] * m1[:, None, :] / phi[:, None, None] ** 2
        vech = H[:, [0, 0, 1], [0, 1, 1]]
        p = MixtureParams([1.0], [0.0], 1.0)
        div = phi**2 * (vech @ m.Qstar[0] - cf_log_hess_1d(p, m.s))
        keep = np.abs(phi) > 0.1
        np.testing.assert_allclose(m.single_residuals(p)[keep, 0], div[keep], atol=1e-10)

    def test_invalid_target(self):
        with pytest.raises(ValueError):
            FactorModel.from_data(np.zeros((5, 2)), EMBED, build_box(1.0, 4, 2), target=4)

    def test_loadings_shape(self):
        with pytest.raises(ValueError):
            FactorModel.from_data(np.zeros((5, 3)), EMBED, build_box(1.0, 4, 3))

    @pytest.mark.parametrize("target", [1, 2, "joint"])
    def test_gradient(self, rng, target):
        X = np.column_stack([rng.normal(size=200) * 1.5, rng.normal(size=200), rng.normal(size=200)])
        m = FactorModel.from_data(X @ EMBED.T, EMBED, build_box(2.0, 24, 2), target=target)
        assert _worst_fd(QuasiPosterior(m, PriorSpec(K=4)), rng, count=4) <= 1e-5

    def test_data_gradient_zero_at_population_minimum(self):
        m = _factor_population([SKEWED, MixtureParams([1.0], [0.0], 0.5), MixtureParams([1.0], [0.0], 1.5)],
                               EMBED, build_box(2.0, 48, 2), 1)
        _, (g,) = m.value_and_grad(SKEWED)
        assert max(np.abs(np.concatenate([np.ravel(a) for a in g]))) <= 1e-6


class TestQuasiPosterior:
    def test_combines_objective_and_prior(self, rng):
        y = rng.normal(size=60)
        m = DeconvModel.from_data(y, rng.normal(size=60) * 0.3, build_box(2.0, 32, 1))
        spec = PriorSpec(K=3)
        x = sample_prior_state(spec, rng)
        v, _ = neg_loglik_grad(x, m, spec)
        assert v == pytest.approx(deconv_neg_loglik(x, m, spec) - log_prior(x, spec), rel=1e-12)

    def test_floor_breach_counted(self):
        m = RepMeasModel.from_data([0.1, -0.2], [0.3, 0.0], build_box(1.0, 4, 1), fold=False)
        m.nodes = np.array([[np.pi / 4]])
        m.weights = np.array([1.0])
        m.terms = [(np.ones(1, complex), np.zeros((1, 1), complex))]
        spec = PriorSpec(K=2)
        qp = QuasiPosterior(m, spec)
        x = unconstrain(MixtureParams([0.5, 0.5], [-2.0, 2.0], 1.0), spec)
        v, g = qp.neg_loglik_grad(x)
        assert v == np.inf and np.all(np.isnan(g))
        assert qp.floor_breaches == 1
        assert qp.logp(x) == -np.inf
        assert repmeas_neg_loglik(x, m, spec) == np.inf

    def test_extreme_coordinates_rejected(self, rng):
        m = DeconvModel.from_data(rng.normal(size=20), rng.normal(size=20), build_box(2.0, 16, 1))
        qp = QuasiPosterior(m, PriorSpec(K=2))
        x = np.zeros(qp.dim)
        x[-1] = 800.0  # sigma^2 overflows
        assert qp.neg_loglik_grad(x)[0] == np.inf

    def test_joint_blocks(self, rng):
        X = rng.normal(size=(100, 3))
        m = FactorModel.from_data(X @ EMBED.T, EMBED, build_box(2.0, 12, 2), target="joint")
        spec = PriorSpec(K=2)
        qp = QuasiPosterior(m, spec)
        assert qp.n_blocks == 3 and qp.dim == 3 * spec.dim
        x = np.concatenate([sample_prior_state(spec, rng) for _ in range(3)])
        assert qp.objective(x) == pytest.approx(factor_neg_loglik(x, m, spec))


class TestSymmetrize:
    def test_single(self):
        proxy, aux = symmetrize_to_deconv([2.0], [0.0])
        assert proxy[0, 0] == 1.0 and aux[0, 0] == 1.0

    def test_equal(self, rng):
        y = rng.normal(size=10)
        _, aux = symmetrize_to_deconv(y, y)
        assert np.all(aux == 0)

    def test_reconstruction(self, rng):
        y1, y2 = rng.normal(size=(50, 2)), rng.normal(size=(50, 2))
        proxy, aux = symmetrize_to_deconv(y1, y2)
        np.testing.assert_allclose(proxy + aux, y1, atol=1e-15)
        np.testing.assert_allclose(proxy - aux, y2, atol=1e-15)

    def test_mismatch(self):
        with pytest.raises(ValueError):
            symmetrize_to_deconv([1.0, 2.0], [1.0])


class TestFiniteDifferences:
    def test_fd_on_polynomial(self):
        f = lambda x: x[0] ** 3 + 2 * x[0] * x[1]
        g = fd_gradient(f, np.array([1.5, -0.5]))
        np.testing.assert_allclose(g, [3 * 1.5**2 - 1.0, 3.0], rtol=1e-9)

    def test_relative_errors(self):
        err = relative_errors(np.array([1.0, 100.0, 0.0]), np.array([1.0, 101.0, 1e-9]))
        np.testing.assert_allclose(err, [0.0, 1 / 101, 1e-9])
