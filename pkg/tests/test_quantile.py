"""Tests for the check loss and the induced-smoothing kernel."""

import math

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy import integrate

from core.quantile import (
    BARTLETT,
    check_loss,
    kernel_value,
    score,
    smooth_cdf,
    smooth_score,
    smooth_score_deriv,
    smoothed_check_loss,
    total_check_loss,
)
from utils.errors import ParameterError

PEAK = 3 / (4 * math.sqrt(5))


class TestCheckLoss:
    @pytest.mark.parametrize("tau, u, expected", [(0.5, 1.0, 0.5), (0.75, -2.0, 0.5), (0.3, 0.0, 0.0)])
    def test_values(self, tau, u, expected):
        assert check_loss(tau, u) == pytest.approx(expected)

    def test_vectorized(self):
        assert_allclose(check_loss(0.25, np.array([-4.0, 0.0, 4.0])), [3.0, 0.0, 1.0])
        assert total_check_loss(0.25, [-4.0, 0.0, 4.0]) == pytest.approx(4.0)

    @pytest.mark.parametrize("tau", [0.0, 1.0, -0.1, float("nan")])
    def test_invalid_tau(self, tau):
        with pytest.raises(ParameterError):
            check_loss(tau, 1.0)


class TestScore:
    @pytest.mark.parametrize("tau, u, expected", [(0.5, -1.0, -0.5), (0.25, 3.0, 0.25), (0.5, 0.0, -0.5)])
    def test_values(self, tau, u, expected):
        assert score(tau, u) == pytest.approx(expected)

    def test_knight_identity(self, rng):
        u = 2.0 * rng.standard_normal(10_000)
        v = 2.0 * rng.standard_normal(10_000)
        tau = rng.uniform(0.05, 0.95, 10_000)
        # closed form of the integral over s from 0 to v of I(u <= s) - I(u <= 0)
        integral = np.where(v >= 0, (u > 0) * np.maximum(v - u, 0.0), (u <= 0) * np.maximum(u - v, 0.0))
        residual = [
            check_loss(t, a - b) - check_loss(t, a) - (-b * score(t, a) + c)
            for t, a, b, c in zip(tau, u, v, integral)
        ]
        assert np.max(np.abs(residual)) < 1e-12

    def test_subgradient_matches_score(self, rng):
        step = 1e-6
        for tau in (0.1, 0.5, 0.8):
            u = rng.uniform(-3.0, 3.0, 200)
            u = u[np.abs(u) > 1e-3]
            numeric = (check_loss(tau, u + step) - check_loss(tau, u - step)) / (2 * step)
            assert_allclose(numeric, score(tau, u), atol=1e-8)


class TestKernel:
    def test_peak(self):
        assert kernel_value(BARTLETT, 0.0) == pytest.approx(0.3354102, abs=1e-7)

    def test_outside_support(self):
        assert kernel_value(BARTLETT, 3.0) == 0.0

    def test_integrates_to_one(self):
        total, _ = integrate.quad(lambda u: kernel_value(BARTLETT, u), -3, 3, points=[-math.sqrt(5), math.sqrt(5)])
        assert total == pytest.approx(1.0, abs=1e-10)

    def test_cdf(self):
        assert smooth_cdf(BARTLETT, -math.sqrt(5)) == pytest.approx(0.0, abs=1e-15)
        assert smooth_cdf(BARTLETT, math.sqrt(5)) == pytest.approx(1.0)
        assert smooth_cdf(BARTLETT, 0.0) == pytest.approx(0.5)
        assert smooth_cdf(BARTLETT, 1.0) == pytest.approx(0.8130495, abs=1e-7)


class TestSmoothScore:
    def test_at_zero(self):
        assert smooth_score(0.3, 0.2, 0.0) == pytest.approx(-0.2)

    def test_saturates(self):
        assert smooth_score(0.5, 0.1, 10.0) == pytest.approx(0.5)
        assert smooth_score(0.5, 0.1, -10.0) == pytest.approx(-0.5)

    def test_matches_quadrature(self):
        x = -0.05 / 0.155
        mass, _ = integrate.quad(lambda v: kernel_value(BARTLETT, v), -math.sqrt(5), x)
        assert smooth_score(0.5, 0.155, -0.05) == pytest.approx(0.5 * (2 * mass - 1), abs=1e-8)

    def test_derivative(self):
        assert smooth_score_deriv(0.4, 0.0) == pytest.approx(PEAK / 0.4)
        assert smooth_score_deriv(0.4, 4.0) == 0.0
        step = 1e-6
        numeric = (smooth_score(0.7, 0.4, 0.1 + step) - smooth_score(0.7, 0.4, 0.1 - step)) / (2 * step)
        assert smooth_score_deriv(0.4, 0.1) == pytest.approx(numeric, rel=1e-6)

    def test_invalid_bandwidth(self):
        with pytest.raises(ParameterError):
            smooth_score(0.5, 0.0, 1.0)


class TestSmoothedCheckLoss:
    def test_agrees_outside_support(self):
        u = np.array([-3.0, -1.0, 1.0, 3.0])
        assert_allclose(smoothed_check_loss(0.3, 0.2, u), check_loss(0.3, u), atol=1e-12)

    def test_derivative_is_smoothed_score(self):
        u = np.linspace(-0.3, 0.3, 13)
        step = 1e-6
        numeric = (smoothed_check_loss(0.6, 0.15, u + step) - smoothed_check_loss(0.6, 0.15, u - step)) / (2 * step)
        assert_allclose(numeric, smooth_score(0.6, 0.15, u), atol=1e-6)

    def test_convex_and_above_check_loss(self):
        u = np.linspace(-1, 1, 201)
        smooth = smoothed_check_loss(0.5, 0.2, u)
        assert np.all(smooth >= check_loss(0.5, u) - 1e-12)
        assert np.all(np.diff(smooth, 2) >= -1e-12)
