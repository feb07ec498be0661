"""Tests for the BFGS minimizer."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from estimation.optimizer import QuasiNewtonOpts, quasi_newton_minimize, wolfe_line_search
from utils.errors import NumericError


def rosenbrock(x):
    return 100.0 * (x[1] - x[0] ** 2) ** 2 + (1.0 - x[0]) ** 2


def rosenbrock_grad(x):
    return np.array([
        -400.0 * x[0] * (x[1] - x[0] ** 2) - 2.0 * (1.0 - x[0]),
        200.0 * (x[1] - x[0] ** 2),
    ])


class TestQuasiNewton:
    def test_sphere(self):
        result = quasi_newton_minimize(lambda x: x @ x, lambda x: 2 * x, [1.0, 1.0])
        assert result.converged
        assert result.iterations <= 10
        assert_allclose(result.x, 0.0, atol=1e-8)

    def test_rosenbrock(self):
        result = quasi_newton_minimize(rosenbrock, rosenbrock_grad, [-1.2, 1.0], QuasiNewtonOpts(grad_tol=1e-9))
        assert_allclose(result.x, [1.0, 1.0], atol=1e-5)

    def test_ill_conditioned_quadratic(self, rng):
        q, _ = np.linalg.qr(rng.standard_normal((20, 20)))
        a = q @ np.diag(np.logspace(0, 3, 20)) @ q.T
        b = rng.standard_normal(20)
        result = quasi_newton_minimize(lambda x: 0.5 * x @ a @ x - b @ x, lambda x: a @ x - b, np.zeros(20))
        minimum = -0.5 * b @ np.linalg.solve(a, b)
        assert result.fun == pytest.approx(minimum, abs=1e-8)

    def test_never_worse_than_start(self):
        result = quasi_newton_minimize(rosenbrock, rosenbrock_grad, [0.3, -0.4], QuasiNewtonOpts(max_iter=3))
        assert result.fun <= rosenbrock(np.array([0.3, -0.4]))
        assert result.message in ("max_iter", "gradient below tolerance")

    def test_start_at_minimum(self):
        result = quasi_newton_minimize(lambda x: x @ x, lambda x: 2 * x, [0.0, 0.0])
        assert result.converged
        assert result.iterations == 0

    def test_non_finite(self):
        with pytest.raises(NumericError):
            quasi_newton_minimize(lambda x: np.nan, lambda x: np.zeros_like(x), [1.0])

    def test_accepted_steps_never_increase(self):
        result = quasi_newton_minimize(rosenbrock, rosenbrock_grad, [-1.2, 1.0])
        history = np.array(result.history)
        assert history[0] == rosenbrock(np.array([-1.2, 1.0]))
        assert history[-1] == result.fun
        assert np.all(np.diff(history) <= 0.0)

    def test_kink_reported_through_stationarity_test(self):
        # 5 |x0| smoothed at scale 1e-12 plus a smooth quadratic in x1
        def f(x):
            return 5.0 * np.sqrt(x[0] ** 2 + 1e-24) + (x[1] - 1.0) ** 2

        def grad(x):
            return np.array([5.0 * x[0] / np.sqrt(x[0] ** 2 + 1e-24), 2.0 * (x[1] - 1.0)])

        def at_kink(x, g):
            return abs(x[0]) < 1e-4 and abs(g[1]) < 1e-3

        result = quasi_newton_minimize(f, grad, [1.0, 3.0], stationary=at_kink)
        assert result.converged
        assert abs(result.x[0]) < 1e-4
        assert result.x[1] == pytest.approx(1.0, abs=1e-3)


class TestLineSearch:
    def test_strong_wolfe(self):
        opts = QuasiNewtonOpts()
        x = np.array([-1.2, 1.0])
        g = rosenbrock_grad(x)
        p = -g / np.linalg.norm(g)

        def evaluate(point):
            return rosenbrock(point), rosenbrock_grad(point)

        alpha, f, g_new = wolfe_line_search(evaluate, x, p, rosenbrock(x), g, 1.0, opts)
        assert f <= rosenbrock(x) + opts.c1 * alpha * (g @ p)
        assert abs(g_new @ p) <= -opts.c2 * (g @ p)
