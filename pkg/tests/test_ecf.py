import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qblatent.ecf import (
    as_dataset,
    build_cache,
    ecf_eval,
    ecf_hess_combo,
    ecf_weighted,
    load_csv,
    save_csv,
)


class TestDataset:
    def test_shapes(self):
        assert as_dataset([1.0, 2.0]).shape == (2, 1)
        assert as_dataset(3.0).shape == (1, 1)
        assert as_dataset(np.zeros((4, 3))).shape == (4, 3)

    @pytest.mark.parametrize("bad", [[], [1.0, np.nan], [[np.inf]]])
    def test_rejects(self, bad):
        with pytest.raises(ValueError):
            as_dataset(bad)

    def test_csv_round_trip(self, tmp_path, rng):
        x = rng.normal(size=(5, 2))
        path = tmp_path / "x.csv"
        save_csv(path, x)
        np.testing.assert_array_equal(load_csv(path), x)

    def test_csv_header(self, tmp_path):
        path = tmp_path / "h.csv"
        path.write_text("y1,y2\n1.5,2\n-1,0.25\n", encoding="utf-8")
        np.testing.assert_array_equal(load_csv(path, header=True), [[1.5, 2.0], [-1.0, 0.25]])
        with pytest.raises(ValueError):
            load_csv(path)


class TestECFEval:
    def test_point_mass_at_origin(self):
        assert ecf_eval([0.0], 1.7) == 1.0

    def test_symmetric_pair(self):
        t = np.linspace(-3, 3, 7)
        np.testing.assert_allclose(ecf_eval([-1.0, 1.0], t), np.cos(t), atol=1e-15)

    def test_alternating(self):
        assert ecf_eval([1.0, 2.0, 3.0], np.pi) == pytest.approx(-1 / 3, abs=1e-15)

    def test_origin_exact(self, rng):
        assert ecf_eval(rng.normal(size=(50, 2)), np.zeros(2)) == 1.0

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 10**6), t=st.floats(-20, 20))
    def test_modulus_and_symmetry(self, seed, t):
        y = np.random.default_rng(seed).standard_cauchy(30)
        v = ecf_eval(y, t)
        assert abs(v) <= 1 + 1e-14
        assert ecf_eval(y, -t) == pytest.approx(np.conj(v), abs=1e-14)


class TestECFWeighted:
    def test_constant_z(self, rng):
        w = rng.normal(size=(20, 2))
        out = ecf_weighted(w, np.zeros((20, 1)), 0.8)
        np.testing.assert_allclose(out, 1j * w.mean(axis=0), atol=1e-15)

    def test_unit_weights_reduce_to_ecf(self, rng):
        z = rng.normal(size=30)
        t = np.linspace(-2, 2, 5)
        out = ecf_weighted(np.ones(30), z, t)[:, 0]
        np.testing.assert_allclose(out, 1j * ecf_eval(z, t), atol=1e-15)

    def test_two_point(self):
        t = np.linspace(-2, 2, 9)
        out = ecf_weighted([1.0, -1.0], [1.0, -1.0], t)[:, 0]
        np.testing.assert_allclose(out, -np.sin(t) + 0j, atol=1e-15)

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            ecf_weighted([1.0, 2.0], [1.0], 0.3)

    def test_conjugate_symmetry(self, rng):
        # the moment E[W e^{it'Z}] is conjugate symmetric; the factor i flips the sign
        w, z = rng.normal(size=(40, 2)), rng.normal(size=(40, 2))
        t = rng.normal(size=(6, 2))
        moment = lambda s: ecf_weighted(w, z, s) / 1j
        np.testing.assert_allclose(moment(-t), np.conj(moment(t)), atol=1e-15)
        np.testing.assert_allclose(ecf_weighted(w, z, -t), -np.conj(ecf_weighted(w, z, t)), atol=1e-15)


class TestHessCombo:
    def test_point_mass(self):
        y = np.tile([0.7, -1.3], (10, 1))
        np.testing.assert_allclose(ecf_hess_combo(y, np.array([0.4, 1.1])), 0.0, atol=1e-14)

    def test_origin_is_minus_covariance(self, rng):
        y = rng.normal(size=(200, 3))
        h = ecf_hess_combo(y, np.zeros(3))
        np.testing.assert_allclose(h, -np.cov(y, rowvar=False, ddof=0), atol=1e-12)

    def test_ratio_form(self, rng):
        # phi^2 times the division form, wherever |phi| > 0.1
        y = rng.normal(size=(300, 2))
        t = rng.uniform(-1.5, 1.5, size=(40, 2))
        phi = ecf_eval(y, t)
        E = np.exp(1j * (t @ y.T))
        m1 = E @ y / y.shape[0]
        m2 = np.einsum("kn,na,nb->kab", E, y, y) / y.shape[0]
        ratio = -m2 / phi[:, None, None] + m1[:, :, None] * m1[:, None, :] / phi[:, None, None] ** 2
        keep = np.abs(phi) > 0.1
        assert keep.sum() > 10
        got = ecf_hess_combo(y, t)[keep]
        np.testing.assert_allclose(got, (phi[:, None, None] ** 2 * ratio)[keep], atol=1e-12)

    def test_two_point_ratio(self):
        t = np.linspace(-1.2, 1.2, 9)
        h = ecf_hess_combo([-1.0, 1.0], t)[:, 0, 0]
        # -cos t * E[Y^2 e] + E[Y e]^2 = -cos^2 t + (i sin t)^2
        np.testing.assert_allclose(h, -1.0 + 0j, atol=1e-15)

    def test_symmetric(self, rng):
        h = ecf_hess_combo(rng.normal(size=(50, 3)), rng.normal(size=(4, 3)))
        np.testing.assert_allclose(h, np.swapaxes(h, 1, 2), atol=1e-15)


class TestCache:
    def test_matches_pointwise(self, rng):
        y = rng.normal(size=(60, 2))
        w = rng.normal(size=(60, 2))
        nodes = rng.normal(size=(3, 2))
        c = build_cache(y, nodes, ("plain", "weighted", "hess"), w_data=w)
        np.testing.assert_allclose(c.phi, ecf_eval(y, nodes), atol=1e-15)
        np.testing.assert_allclose(c.weighted, ecf_weighted(w, y, nodes), atol=1e-15)
        np.testing.assert_allclose(c.hess_combo, ecf_hess_combo(y, nodes), atol=1e-15)
        assert len(c) == 3
        assert c.n == 60

    def test_symmetric_nodes(self, rng):
        y = rng.normal(size=80)
        t = np.linspace(-2, 2, 9)
        c = build_cache(y, t)
        np.testing.assert_allclose(c.phi[::-1], np.conj(c.phi), atol=1e-15)

    def test_empty(self):
        c = build_cache([1.0, 2.0], np.zeros((0, 1)))
        assert len(c) == 0

    def test_immutable(self):
        c = build_cache([1.0, 2.0], [0.5])
        with pytest.raises(ValueError):
            c.phi[0] = 0

    def test_weighted_needs_w(self):
        with pytest.raises(ValueError):
            build_cache([1.0], [0.5], "weighted")

    def test_blocking_consistent(self, rng, monkeypatch):
        import qblatent.ecf as ecf

        y = rng.normal(size=500)
        t = np.linspace(-3, 3, 101)
        full = ecf_eval(y, t)
        monkeypatch.setattr(ecf, "_BLOCK", 1000)
        np.testing.assert_array_equal(ecf_eval(y, t), full)


class TestDeviationEnvelope:
    def test_standard_normal(self):
        n, T = 10_000, 3.0
        t = np.linspace(-T, T, 241)
        bound = 5 * max(np.sqrt(np.log(T)), 1.0) / np.sqrt(n)
        hits = 0
        for seed in range(20):
            y = np.random.default_rng(seed).standard_normal(n)
            hits += np.max(np.abs(ecf_eval(y, t) - np.exp(-t**2 / 2))) <= bound
        assert hits >= 19
