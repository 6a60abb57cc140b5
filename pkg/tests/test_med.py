from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import brentq
from scipy.stats import norm

from robustmed.exceptions import NotEstimableError
from robustmed.fitting import Dataset, fit_ols
from robustmed.med import (
    MedEstimate,
    MedRequest,
    classical_med_ci,
    med_estimator_with_screen,
    med_from_theta,
    med_gradient,
    med_gradient_fd,
)
from robustmed.models import ModelKind, eval_mean, mean_gradient

from conftest import DOSES, random_theta, simulate


class TestMedRequest:
    def test_quantiles(self):
        req = MedRequest(0.4)
        assert req.z_ci == pytest.approx(norm.ppf(0.975))
        assert req.z_screen == pytest.approx(norm.ppf(0.975))

    @pytest.mark.parametrize("kw", [{"delta": 0.0}, {"delta": 0.4, "alpha": 0.5}, {"delta": 0.4, "level": 1.0}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            MedRequest(**kw)


class TestMedEstimate:
    def test_covers(self):
        assert MedEstimate(0.3, "x", 0.2, 0.4).covers(0.25)
        assert not MedEstimate(0.3, "x", 0.2, 0.4).covers(0.5)
        assert MedEstimate(0.3, "x", 0.2, None).covers(5.0)
        assert not MedEstimate(0.3, "x", None, 0.1).covers(0.2)
        assert not MedEstimate(None, "x").covers(0.2)


class TestMedFromTheta:
    def test_emax_figure_value(self):
        assert med_from_theta("emax", (0.2, 0.7, 0.2), 0.4) == pytest.approx(0.266667, abs=1e-6)

    def test_emax_illustration_value(self):
        assert med_from_theta("emax", (0.32, 0.74, 0.14), 0.2) == pytest.approx(0.051852, abs=1e-6)

    def test_sigemax_bisection_oracle(self):
        theta = (0.2, 0.615, 0.4, 4.0)
        oracle = brentq(lambda d: eval_mean("sigemax", theta, d) - 0.2 - 0.4, 0.0, 1.0, xtol=1e-14)
        assert med_from_theta("sigemax", theta, 0.4) == pytest.approx(oracle, abs=1e-10)
        assert oracle == pytest.approx(0.4672, abs=1e-4)

    def test_linear_closed_form(self):
        assert med_from_theta("linear", (0.2, 0.6), 0.4) == pytest.approx(2.0 / 3.0, abs=1e-15)

    def test_not_estimable(self):
        with pytest.raises(NotEstimableError):
            med_from_theta("emax", (0.2, -0.7, 0.2), 0.4)
        with pytest.raises(NotEstimableError):
            med_from_theta("emax", (0.1, 0.3, 0.01), 0.4)

    @pytest.mark.parametrize("kind", list(ModelKind))
    def test_round_trip(self, kind):
        rng = np.random.default_rng(21)
        for _ in range(30):
            theta = random_theta(kind, rng)
            delta = 0.2 * theta[1] * max(float(eval_mean(kind, (0.0, 1.0, *theta[2:]), 0.8)
                                               - eval_mean(kind, (0.0, 1.0, *theta[2:]), 0.0)), 1e-3)
            m = med_from_theta(kind, theta, delta)
            assert eval_mean(kind, theta, m) - eval_mean(kind, theta, 0.0) == pytest.approx(delta, abs=1e-9)

    @settings(max_examples=80, deadline=None)
    @given(beta=st.floats(0.3, 1.5), ed50=st.floats(0.02, 1.0), d1=st.floats(0.01, 0.25), d2=st.floats(0.01, 0.25))
    def test_monotone_in_delta(self, beta, ed50, d1, d2):
        if abs(d1 - d2) < 1e-6:
            return
        lo, hi = sorted((d1, d2))
        theta = (0.1, beta, ed50)
        assert med_from_theta("emax", theta, lo) < med_from_theta("emax", theta, hi)


class TestMedGradient:
    def test_linear_symbolic(self):
        np.testing.assert_allclose(med_gradient("linear", (0.2, 0.6), 0.4), [0.0, -0.4 / 0.36], rtol=1e-12)

    def test_emax_ed50_component(self):
        assert med_gradient("emax", (0.2, 0.7, 0.2), 0.4)[2] == pytest.approx(0.4 / 0.3, rel=1e-12)

    @pytest.mark.parametrize("kind", list(ModelKind))
    def test_alpha_component_zero(self, kind):
        theta = random_theta(kind, np.random.default_rng(1))
        assert med_gradient(kind, theta, 0.05 * theta[1])[0] == 0.0

    @pytest.mark.parametrize("kind", [k for k in ModelKind if k is not ModelKind.LINLOG])
    def test_matches_finite_differences(self, kind):
        rng = np.random.default_rng(31)
        for _ in range(50):
            theta = random_theta(kind, rng)
            delta = 0.25 * theta[1] * float(eval_mean(kind, (0.0, 1.0, *theta[2:]), 1.0)
                                            - eval_mean(kind, (0.0, 1.0, *theta[2:]), 0.0))
            np.testing.assert_allclose(med_gradient(kind, theta, delta), med_gradient_fd(kind, theta, delta),
                                       rtol=1e-5, atol=1e-7)


class TestScreenedEstimator:
    def test_noiseless_large_n(self):
        data = simulate("emax", (0.2, 0.7, 0.2), n=200, sigma=0.0)
        est = med_estimator_with_screen(fit_ols("emax", data), MedRequest(0.4))
        assert est.value == pytest.approx(0.267, abs=1.01e-3)

    def test_negative_slope(self):
        data = simulate("linear", (0.8, -0.6), n=10, seed=1)
        est = med_estimator_with_screen(fit_ols("linear", data), MedRequest(0.4))
        assert not est.estimable

    def test_screen_fails_with_large_noise(self):
        doses = np.repeat(DOSES, 2)
        y = np.array([0.0, 10.0, -8.0, 12.0, 9.0, -5.0, -6.0, 18.0, 14.0, -3.0])
        fit = fit_ols("linear", Dataset.from_arrays(doses, y))
        assert fit.theta.beta > 0.4
        assert not med_estimator_with_screen(fit, MedRequest(0.4)).estimable

    def test_value_on_grid(self, emax_data):
        est = med_estimator_with_screen(fit_ols("emax", emax_data), MedRequest(0.4))
        assert est.value * 1000 == pytest.approx(round(est.value * 1000), abs=1e-9)


class TestClassicalCi:
    def test_matches_jacobian_oracle(self, emax_data):
        fit = fit_ols("emax", emax_data)
        req = MedRequest(0.4)
        ci = classical_med_ci(fit, req)
        J = mean_gradient("emax", fit.theta_vec, emax_data.doses)
        cov = fit.sigma ** 2 * np.linalg.inv(J.T @ J)
        grad = med_gradient_fd("emax", fit.theta_vec, 0.4)
        se = np.sqrt(grad @ cov @ grad)
        assert ci.se == pytest.approx(se, rel=1e-5)
        assert ci.upper == pytest.approx(ci.value + norm.ppf(0.975) * se, rel=1e-5)
        assert ci.lower == pytest.approx(max(ci.value - norm.ppf(0.975) * se, 0.0), rel=1e-5, abs=1e-12)

    def test_zero_sigma(self):
        data = simulate("linear", (0.2, 0.6), n=5, sigma=0.0)
        ci = classical_med_ci(fit_ols("linear", data), MedRequest(0.4))
        assert ci.lower == pytest.approx(ci.value, abs=1e-10)
        assert ci.upper == pytest.approx(ci.value, abs=1e-10)

    def test_contains_point(self, emax_data):
        ci = classical_med_ci(fit_ols("emax", emax_data), MedRequest(0.4))
        assert ci.lower <= ci.value <= ci.upper

    def test_not_estimable(self):
        data = simulate("linear", (0.8, -0.6), n=10, seed=1)
        assert not classical_med_ci(fit_ols("linear", data), MedRequest(0.4)).estimable

    def test_width_scales_with_root_n(self):
        theta = (0.2, 0.6)
        ratios = []
        for seed in range(20):
            small = simulate("linear", theta, n=25, seed=seed)
            rng = np.random.default_rng(1000 + seed)
            extra = [np.concatenate([small.response[small.dose_index == i],
                                     eval_mean("linear", theta, DOSES[i]) + rng.normal(0, 0.65, 75)])
                     for i in range(len(DOSES))]
            big = Dataset.from_arrays(np.repeat(DOSES, 100), np.concatenate(extra))
            ci_small = classical_med_ci(fit_ols("linear", small), MedRequest(0.4))
            ci_big = classical_med_ci(fit_ols("linear", big), MedRequest(0.4))
            ratios.append(ci_small.se / ci_big.se)
        assert np.median(ratios) == pytest.approx(2.0, rel=0.15)
