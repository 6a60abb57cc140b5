from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import t as student_t

from robustmed.fitting import fit_ols
from robustmed.intervals import (
    BootstrapConfig,
    EffectCurveBand,
    classical_effect_band,
    dose_grid,
    invert_band_for_med,
    percentile_bootstrap_band,
    profile_likelihood_band,
    wald_effect_band,
)
from robustmed.med import mean_covariance
from robustmed.models import DoseDesign, eval_mean

from conftest import DOSES, simulate

GRID = np.linspace(0.0, 1.0, 201)


def _true_band(theta=(0.2, 0.7, 0.2)):
    eff = eval_mean("emax", theta, GRID) - theta[0]
    return EffectCurveBand(GRID, eff, eff, 0.95, eff)


class TestEffectCurveBand:
    def test_rejects_descending_grid(self):
        with pytest.raises(ValueError):
            EffectCurveBand(GRID[::-1], np.zeros(201), np.zeros(201), 0.95)

    def test_rejects_crossed_bounds(self):
        with pytest.raises(ValueError):
            EffectCurveBand(GRID, np.ones(201), np.zeros(201), 0.95)

    def test_rejects_shape_mismatch(self):
        with pytest.raises(ValueError):
            EffectCurveBand(GRID, np.zeros(200), np.zeros(201), 0.95)

    def test_rows(self):
        rows = list(_true_band().rows())
        assert len(rows) == 201 and rows[0] == (0.0, 0.0, 0.0, 0.0)


class TestBootstrapConfig:
    @pytest.mark.parametrize("kw", [{"b_samples": 99}, {"grid_points": 5}, {"level": 1.0}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            BootstrapConfig(**kw)


class TestInversion:
    def test_zero_width_true_curve(self):
        est = invert_band_for_med(_true_band(), 0.4)
        # first grid dose strictly above the crossing at 0.2667
        assert est.value == est.lower == est.upper == pytest.approx(0.27)

    def test_band_below_delta(self):
        est = invert_band_for_med(EffectCurveBand(GRID, np.zeros(201), np.full(201, 0.3), 0.95, np.zeros(201)), 0.4)
        assert est.lower is None and est.upper is None and est.value is None

    def test_upper_crossing_only(self):
        band = EffectCurveBand(GRID, np.zeros(201), GRID, 0.95, 0.5 * GRID)
        est = invert_band_for_med(band, 0.4)
        assert est.lower == pytest.approx(0.4) and est.upper is None
        assert est.covers(0.9)

    def test_contains_point_for_widening_band(self):
        base = _true_band()
        band = EffectCurveBand(GRID, base.fitted - 0.1 * GRID, base.fitted + 0.1 * GRID, 0.95, base.fitted)
        est = invert_band_for_med(band, 0.4)
        assert est.lower <= est.value <= est.upper

    @settings(max_examples=60, deadline=None)
    @given(d1=st.floats(0.01, 0.8), d2=st.floats(0.01, 0.8), width=st.floats(0.0, 0.3))
    def test_monotone_in_delta(self, d1, d2, width):
        base = _true_band()
        band = EffectCurveBand(GRID, base.fitted - width * GRID, base.fitted + width * GRID, 0.95, base.fitted)
        lo, hi = sorted((d1, d2))
        a, b = invert_band_for_med(band, lo), invert_band_for_med(band, hi)
        for x, y in ((a.lower, b.lower), (a.upper, b.upper)):
            if y is not None:
                assert x is not None and x <= y


class TestBootstrap:
    def test_noiseless_zero_width(self, noiseless_emax):
        band = percentile_bootstrap_band("emax", noiseless_emax, config=BootstrapConfig(b_samples=100))
        np.testing.assert_allclose(band.upper - band.lower, 0.0, atol=1e-12)
        np.testing.assert_allclose(band.lower, band.fitted, atol=1e-12)

    def test_placebo_pinned(self, emax_data):
        band = percentile_bootstrap_band("emax", emax_data, config=BootstrapConfig(b_samples=200))
        assert band.grid[0] == 0.0 and band.lower[0] == 0.0 and band.upper[0] == 0.0

    def test_deterministic(self, emax_data):
        cfg = BootstrapConfig(b_samples=200, seed=5)
        a = percentile_bootstrap_band("emax", emax_data, config=cfg)
        b = percentile_bootstrap_band("emax", emax_data, config=cfg)
        np.testing.assert_array_equal(a.lower, b.lower)
        np.testing.assert_array_equal(a.upper, b.upper)

    def test_seed_matters(self, emax_data):
        a = percentile_bootstrap_band("emax", emax_data, config=BootstrapConfig(b_samples=200, seed=1))
        b = percentile_bootstrap_band("emax", emax_data, config=BootstrapConfig(b_samples=200, seed=2))
        assert not np.array_equal(a.upper, b.upper)

    def test_nested_levels(self, emax_data):
        narrow = percentile_bootstrap_band("emax", emax_data, config=BootstrapConfig(200, level=0.9))
        wide = percentile_bootstrap_band("emax", emax_data, config=BootstrapConfig(200, level=0.95))
        assert np.all(wide.lower <= narrow.lower) and np.all(narrow.upper <= wide.upper)

    def test_order_statistic_convention(self, emax_data):
        from robustmed.intervals import bootstrap_effects
        cfg = BootstrapConfig(b_samples=200, seed=3)
        grid = dose_grid(emax_data.design, cfg.grid_points)
        effects, failed = bootstrap_effects("emax", emax_data, None, cfg, grid)
        assert failed == 0
        srt = np.sort(effects, axis=0)
        band = percentile_bootstrap_band("emax", emax_data, config=cfg)
        np.testing.assert_array_equal(band.lower[1:], srt[4, 1:])
        np.testing.assert_array_equal(band.upper[1:], srt[194, 1:])


class TestProfileLikelihood:
    def test_linear_matches_t_interval(self, emax_data):
        band = profile_likelihood_band("linear", emax_data)
        fit = fit_ols("linear", emax_data)
        X = np.column_stack([np.ones(emax_data.n), emax_data.doses])
        se_beta = fit.sigma * np.sqrt(np.linalg.inv(X.T @ X)[1, 1])
        half = student_t.ppf(0.975, emax_data.n - 2) * se_beta * band.grid[1:]
        np.testing.assert_allclose(band.upper[1:] - band.fitted[1:], half, rtol=0.02)
        np.testing.assert_allclose(band.fitted[1:] - band.lower[1:], half, rtol=0.02)

    def test_contains_fitted(self, emax_data):
        for kind in ("emax", "sigemax", "linear"):
            band = profile_likelihood_band(kind, emax_data)
            assert np.all(band.lower <= band.fitted + 1e-12) and np.all(band.fitted <= band.upper + 1e-12)

    def test_placebo_pinned(self, emax_data):
        band = profile_likelihood_band("emax", emax_data)
        assert band.lower[0] == 0.0 and band.upper[0] == 0.0

    def test_nested_levels(self, emax_data):
        narrow = profile_likelihood_band("emax", emax_data, level=0.9)
        wide = profile_likelihood_band("emax", emax_data, level=0.95)
        assert np.all(wide.lower <= narrow.lower + 1e-12) and np.all(narrow.upper <= wide.upper + 1e-12)

    def test_noiseless_collapses(self):
        band = profile_likelihood_band("linear", simulate("linear", (0.2, 0.6), sigma=0.0))
        np.testing.assert_allclose(band.upper, band.lower, atol=1e-10)


class TestWald:
    def test_classical_band_linear_oracle(self, emax_data):
        fit = fit_ols("linear", emax_data)
        band = classical_effect_band(fit)
        cov = mean_covariance(fit)
        se = np.sqrt(cov[1, 1]) * band.grid
        np.testing.assert_allclose(band.upper - band.fitted, 1.959963984540054 * se, rtol=1e-10)

    def test_zero_covariance(self):
        band = wald_effect_band("emax", (0.2, 0.7, 0.2), np.zeros((3, 3)), DoseDesign.balanced(DOSES, 5))
        np.testing.assert_array_equal(band.lower, band.upper)
        assert invert_band_for_med(band, 0.4).value == pytest.approx(0.27)
