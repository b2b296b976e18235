import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from sklearn.exceptions import NotFittedError

from homeless_atlas.qdgmm import (
    OVERFLOW_GUARD, ConvergenceError, QuasiDifferencedGMM, fit_qd, format_qd_table,
    moment_jacobian, qd_residual, sample_moments,
)

from oracles import qd_moments_oracle, qd_panel

BETA = np.array([0.05, 0.8, -0.4])


class TestResidual:
    def test_zero_beta(self):
        assert qd_residual([0.0, 0.0], [0.3, -1.0], 5.0, 3.0) == 2.0

    def test_zero_lag(self):
        assert qd_residual([4.0, -2.0], [0.3, 1.0], 5.0, 0.0) == 5.0

    def test_noiseless_pair(self, rng):
        dx, yc, yp, _ = qd_panel(rng, 50, BETA, noise=False)
        assert np.max(np.abs(qd_residual(BETA, dx, yc, yp) / yc)) < 1e-12

    def test_overflow_guard(self):
        with pytest.raises(OverflowError, match="50"):
            qd_residual([60.0], [1.0], 1.0, 1.0)
        assert np.isfinite(qd_residual([OVERFLOW_GUARD], [1.0], 1.0, 1.0))


class TestMoments:
    def test_double_loop_oracle(self, rng):
        dx, yc, yp, _ = qd_panel(rng, 25, BETA)
        b = rng.normal(0, 0.3, 3)
        np.testing.assert_allclose(sample_moments(b, dx, yc, yp),
                                   qd_moments_oracle(b, dx, yc, yp), rtol=1e-12, atol=1e-14)

    def test_single_observation(self):
        z = np.array([[1.0, 0.5]])
        b = np.array([0.2, -0.4])
        u = 3.0 - np.exp(0.2 - 0.2) * 2.0
        np.testing.assert_allclose(sample_moments(b, z, [3.0], [2.0]), z[0] * u, rtol=1e-15)

    def test_zero_residuals(self, rng):
        dx, yc, yp, _ = qd_panel(rng, 10, BETA, noise=False)
        assert np.max(np.abs(sample_moments(BETA, dx, yc, yp))) < 1e-12 * yc.max()

    def test_jacobian_matches_finite_differences(self, rng):
        dx, yc, yp, _ = qd_panel(rng, 40, BETA)
        h = 1e-6
        for _ in range(20):
            b = rng.normal(0, 0.5, 3)
            J = moment_jacobian(b, dx, yp)
            fd = np.empty_like(J)
            for j in range(3):
                e = np.zeros(3)
                e[j] = h
                fd[:, j] = (sample_moments(b + e, dx, yc, yp) -
                            sample_moments(b - e, dx, yc, yp)) / (2 * h)
            np.testing.assert_allclose(J, fd, rtol=1e-5, atol=1e-8 * np.abs(J).max())


class TestFit:
    def test_noiseless_recovery(self, rng):
        dx, yc, yp, g = qd_panel(rng, 200, BETA, noise=False)
        est = fit_qd(dx, yc, yp, g)
        np.testing.assert_allclose(est.coef, BETA, atol=1e-8)
        assert est.moment_norm < 1e-10

    def test_fixed_effect_invariance(self, rng):
        # unit effects cancel from every pair: heterogeneous rescaling of an
        # exactly specified panel leaves the root where it was
        dx, yc, yp, g = qd_panel(rng, 300, BETA, noise=False)
        c = rng.lognormal(0, 2, 300)[g]
        a = fit_qd(dx, yc, yp, g).coef
        b = fit_qd(dx, yc * c, yp * c, g).coef
        np.testing.assert_allclose(b, a, atol=1e-8)

    def test_common_rescaling_with_noise(self, rng):
        dx, yc, yp, g = qd_panel(rng, 300, BETA)
        a = fit_qd(dx, yc, yp, g)
        b = fit_qd(dx, yc * 37.0, yp * 37.0, g)
        np.testing.assert_allclose(b.coef, a.coef, atol=1e-8)
        np.testing.assert_allclose(b.cov, a.cov, rtol=1e-6)

    def test_permutation_invariance(self, rng):
        dx, yc, yp, g = qd_panel(rng, 100, BETA)
        p = rng.permutation(len(g))
        a = fit_qd(dx, yc, yp, g)
        b = fit_qd(dx[p], yc[p], yp[p], g[p])
        np.testing.assert_allclose(b.coef, a.coef, atol=1e-10)
        np.testing.assert_allclose(b.cov, a.cov, rtol=1e-8, atol=1e-14)

    def test_covariance_formula(self, rng):
        dx, yc, yp, g = qd_panel(rng, 60, BETA)
        est = fit_qd(dx, yc, yp, g)
        n, G = len(g), 60
        J = moment_jacobian(est.coef, dx, yp)
        u = qd_residual(est.coef, dx, yc, yp)
        S = np.zeros((3, 3))
        for grp in range(G):
            s = (dx[g == grp] * u[g == grp, None]).sum(axis=0)
            S += np.outer(s, s)
        S = S / n * G / (G - 1)
        Ji = np.linalg.inv(J)
        np.testing.assert_allclose(est.cov, Ji @ S @ Ji.T / n, rtol=1e-10)
        assert np.linalg.eigvalsh(est.cov).min() > -1e-12

    def test_multi_start_agrees(self, rng):
        dx, yc, yp, g = qd_panel(rng, 300, BETA)
        model = QuasiDifferencedGMM(n_starts=10, random_state=1).fit(dx, yc, y_prev=yp, groups=g)
        assert model.start_spread_ < 1e-8
        warm = QuasiDifferencedGMM(init="ols").fit(dx, yc, y_prev=yp, groups=g)
        np.testing.assert_allclose(warm.coef_, model.coef_, atol=1e-8)

    def test_trajectory_on_failure(self, rng):
        dx, yc, yp, g = qd_panel(rng, 50, BETA)
        with pytest.raises(ConvergenceError) as err:
            fit_qd(dx, yc, yp, g, max_iter=1, tol=1e-300, step_tol=0.0)
        assert len(err.value.trajectory) == 2

    def test_singular_jacobian(self):
        dx = np.array([[1.0, 2.0], [2.0, 4.0], [0.5, 1.0]])
        with pytest.raises(ConvergenceError, match="singular"):
            fit_qd(dx, [1.0, 2.0, 3.0], [1.0, 1.0, 1.0], [0, 1, 2])

    def test_input_errors(self):
        with pytest.raises(ValueError, match="nonnegative"):
            fit_qd([[1.0]], [-1.0], [1.0], None)
        with pytest.raises(ValueError, match="finite"):
            fit_qd([[1.0], [2.0]], [1.0, 1.0], [1.0, 1.0], None, init=[np.nan])

    def test_guard_resets_wild_start(self, rng):
        dx, yc, yp, g = qd_panel(rng, 100, BETA, noise=False)
        est = fit_qd(dx, yc, yp, g, init=[500.0, 500.0, 500.0])
        np.testing.assert_allclose(est.coef, BETA, atol=1e-8)

    def test_estimator_api(self, rng):
        dx, yc, yp, g = qd_panel(rng, 80, BETA)
        model = QuasiDifferencedGMM(label="lvl")
        with pytest.raises(NotFittedError):
            model.predict(dx, yp)
        with pytest.raises(ValueError, match="y_prev"):
            model.fit(dx, yc)
        model.fit(dx, yc, y_prev=yp, groups=g, feature_names=["trend", "a", "b"])
        np.testing.assert_allclose(model.predict(dx, yp), np.exp(dx @ model.coef_) * yp)
        rep = model.report_
        assert rep.names == ["trend", "a", "b"] and rep.estimator == "qd-gmm"
        with pytest.raises(ValueError, match="init"):
            QuasiDifferencedGMM(init="median").fit(dx, yc, y_prev=yp)

    @given(st.integers(0, 2 ** 16))
    def test_moments_vanish_at_estimate(self, seed):
        rng = np.random.default_rng(seed)
        dx, yc, yp, g = qd_panel(rng, 40, BETA)
        est = fit_qd(dx, yc, yp, g)
        assert np.max(np.abs(sample_moments(est.coef, dx, yc, yp))) < 1e-9


def test_table_layout(rng):
    dx, yc, yp, g = qd_panel(rng, 80, BETA)
    model = QuasiDifferencedGMM(label="Δ Chronic Rate").fit(
        dx, yc, y_prev=yp, groups=g, feature_names=["intercept", "d_median_rent_plus", "z"])
    text = format_qd_table([model.report_], {"d_median_rent_plus": "Δ Rent (+)"})
    assert "Δ Rent (+)" in text and "Obs." in text and "160" in text
    assert "Std.Errors clustered by GEOID" in text
    assert text.rstrip().endswith("+ p<.10, * p<.05, ** p<.01, *** p<.001")
