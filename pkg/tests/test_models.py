from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import brentq

from robustmed.exceptions import DomainError, NoSolutionError
from robustmed.models import (
    DoseDesign,
    ModelKind,
    Theta,
    eval_mean,
    inverse_shape,
    mean_gradient,
    shape_dose_derivative,
    standardized_shape,
)

from conftest import random_theta

ALL_KINDS = list(ModelKind)
MONOTONE = [k for k in ModelKind if k is not ModelKind.QUADRATIC]


class TestEvalMean:
    def test_emax_placebo(self):
        assert eval_mean("emax", (0.2, 0.7, 0.2), 0.0) == pytest.approx(0.2, abs=1e-15)

    def test_emax_at_ed50(self):
        assert eval_mean("emax", (0.2, 0.7, 0.2), 0.2) == pytest.approx(0.55, abs=1e-15)

    def test_linlog_placebo(self):
        assert eval_mean("linlog", (0.74, 0.33, 0.2), 0.0) == pytest.approx(0.74 + 0.33 * np.log(0.2), abs=1e-15)
        assert eval_mean("linlog", (0.74, 0.33, 0.2), 0.0) == pytest.approx(0.2089, abs=1e-4)

    @pytest.mark.parametrize("kind", [ModelKind.LINEAR, ModelKind.EMAX, ModelKind.SIGEMAX, ModelKind.POWER,
                                      ModelKind.QUADRATIC, ModelKind.EXPONENTIAL])
    def test_zero_shape_at_placebo(self, kind):
        theta = random_theta(kind, np.random.default_rng(3))
        assert eval_mean(kind, theta, 0.0) == pytest.approx(theta[0], abs=1e-14)

    def test_theta_object_and_vector_agree(self):
        d = np.linspace(0, 1, 7)
        np.testing.assert_array_equal(eval_mean("sigemax", Theta(0.2, 0.6, (0.4, 4.0)), d),
                                      eval_mean("sigemax", [0.2, 0.6, 0.4, 4.0], d))

    def test_wrong_length_rejected(self):
        with pytest.raises(DomainError):
            eval_mean("emax", (0.2, 0.7), 0.1)

    def test_negative_dose_rejected(self):
        with pytest.raises(DomainError):
            eval_mean("linear", (0.2, 0.7), -0.1)

    @pytest.mark.parametrize("kind,gamma", [("emax", (0.0,)), ("sigemax", (0.4, -1.0)), ("quadratic", (0.1,)),
                                            ("power", (-1.0,)), ("trunclogistic", (0.0, 0.5))])
    def test_invalid_gamma(self, kind, gamma):
        with pytest.raises(DomainError):
            standardized_shape(kind, gamma, 0.5)

    def test_parse_aliases(self):
        assert ModelKind.parse("SigEmax") is ModelKind.SIGEMAX
        with pytest.raises(ValueError):
            ModelKind.parse("logit")


class TestStandardizedShape:
    def test_linear_identity(self):
        assert standardized_shape("linear", (), 0.3) == pytest.approx(0.3)

    def test_sigemax_half_max_at_ed50(self):
        assert standardized_shape("sigemax", (0.4, 4.0), 0.4) == pytest.approx(0.5, abs=1e-15)

    def test_emax_at_one(self):
        assert standardized_shape("emax", (0.2,), 1.0) == pytest.approx(5.0 / 6.0, abs=1e-15)

    @pytest.mark.parametrize("kind", MONOTONE)
    def test_monotone(self, kind):
        rng = np.random.default_rng(5)
        for _ in range(20):
            gamma = random_theta(kind, rng)[2:]
            d1, d2 = np.sort(rng.uniform(0.0, 1.0, 2))
            if d2 - d1 < 1e-6:
                continue
            assert standardized_shape(kind, gamma, d1) < standardized_shape(kind, gamma, d2)

    @pytest.mark.parametrize("kind", ALL_KINDS)
    def test_dose_derivative_matches_fd(self, kind):
        rng = np.random.default_rng(7)
        gamma = random_theta(kind, rng)[2:]
        d = np.linspace(0.05, 1.0, 20)
        h = 1e-6
        fd = (standardized_shape(kind, gamma, d + h) - standardized_shape(kind, gamma, d - h)) / (2 * h)
        np.testing.assert_allclose(shape_dose_derivative(kind, gamma, d), fd, rtol=1e-6, atol=1e-8)


class TestInverseShape:
    def test_linear(self):
        assert inverse_shape("linear", (), 0.5) == 0.5

    def test_emax_against_bisection(self):
        oracle = brentq(lambda d: d / (0.2 + d) - 4.0 / 7.0, 0.0, 1.0, xtol=1e-15)
        assert inverse_shape("emax", (0.2,), 4.0 / 7.0) == pytest.approx(oracle, abs=1e-12)
        assert inverse_shape("emax", (0.2,), 4.0 / 7.0) == pytest.approx(0.2667, abs=1e-4)

    def test_emax_above_supremum(self):
        with pytest.raises(NoSolutionError):
            inverse_shape("emax", (0.2,), 1.2)

    def test_quadratic_smallest_root(self):
        q = -0.4
        u = 0.5
        d = inverse_shape("quadratic", (q,), u)
        roots = np.roots([q, 1.0, -u])
        assert d == pytest.approx(min(r for r in roots.real if r >= 0), rel=1e-12)

    @pytest.mark.parametrize("kind", ALL_KINDS)
    def test_round_trip(self, kind):
        rng = np.random.default_rng(11)
        gamma = random_theta(kind, rng)[2:]
        if kind is ModelKind.QUADRATIC:
            top = -1.0 / (2.0 * gamma[0])
            d = np.linspace(0.0, min(1.0, top * 0.99), 100)
        else:
            d = np.linspace(0.0, 1.0, 100)
        back = np.array([inverse_shape(kind, gamma, standardized_shape(kind, gamma, x)) for x in d])
        np.testing.assert_allclose(back, d, rtol=1e-9, atol=1e-12)

    @settings(max_examples=60, deadline=None)
    @given(ed50=st.floats(0.01, 2.0), h=st.floats(0.5, 8.0), u=st.floats(0.001, 0.999))
    def test_sigemax_inverse_property(self, ed50, h, u):
        d = inverse_shape("sigemax", (ed50, h), u)
        assert standardized_shape("sigemax", (ed50, h), d) == pytest.approx(u, rel=1e-9, abs=1e-12)


def _fd_gradient(kind, theta, d, h=1e-6):
    out = np.zeros(len(theta))
    for j in range(len(theta)):
        step = h * max(abs(theta[j]), 1.0)
        up, dn = theta.copy(), theta.copy()
        up[j] += step
        dn[j] -= step
        out[j] = (eval_mean(kind, up, d) - eval_mean(kind, dn, d)) / (2 * step)
    return out


class TestMeanGradient:
    def test_linear(self):
        np.testing.assert_allclose(mean_gradient("linear", (0.1, 0.9), 0.3), [1.0, 0.3])

    def test_emax_example(self):
        g = mean_gradient("emax", (0.2, 0.7, 0.2), 0.2)
        np.testing.assert_allclose(g, [1.0, 0.5, -0.875], atol=1e-15)
        np.testing.assert_allclose(g, _fd_gradient(ModelKind.EMAX, np.array([0.2, 0.7, 0.2]), 0.2), atol=1e-8)

    def test_vectorized_shape(self):
        g = mean_gradient("sigemax", (0.2, 0.6, 0.4, 4.0), np.linspace(0, 1, 9))
        assert g.shape == (9, 4)

    @pytest.mark.parametrize("kind", [k for k in ALL_KINDS if k is not ModelKind.LINLOG])
    def test_matches_finite_differences(self, kind):
        rng = np.random.default_rng(100 + list(ModelKind).index(kind))
        for _ in range(100):
            theta = random_theta(kind, rng)
            d = rng.uniform(0.01, 1.0)
            an = mean_gradient(kind, theta, d)
            fd = _fd_gradient(kind, theta, d)
            np.testing.assert_allclose(an, fd, rtol=1e-6, atol=1e-8)

    def test_linlog_gradient_includes_fixed_offset(self):
        theta = np.array([0.74, 0.33, 0.2])
        np.testing.assert_allclose(mean_gradient("linlog", theta, 0.5), _fd_gradient(ModelKind.LINLOG, theta, 0.5),
                                   rtol=1e-6)


class TestDoseDesign:
    def test_balanced(self):
        des = DoseDesign.balanced((0, 0.05, 0.2, 0.6, 1), 25)
        assert des.n == 125
        np.testing.assert_allclose(des.fractions, 0.2)
        assert des.placebo == 0.0 and des.d_max == 1.0
        np.testing.assert_array_equal(des.active_doses, [0.05, 0.2, 0.6, 1.0])

    @pytest.mark.parametrize("doses,alloc", [((0.0,), (1,)), ((0.0, 0.0), (1, 1)), ((0.5, 0.1), (1, 1)),
                                             ((0.0, 1.0), (1, 0)), ((-1.0, 1.0), (1, 1))])
    def test_invalid(self, doses, alloc):
        with pytest.raises(ValueError):
            DoseDesign(doses, alloc)
