"""BFGS quasi-Newton minimizer with a strong Wolfe line search."""

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from utils.errors import NumericError
from utils.logger import log


@dataclass(frozen=True)
class QuasiNewtonOpts:
    """Stopping rules and line-search constants."""
    max_iter: int = 500
    grad_tol: float = 1e-6
    c1: float = 1e-4  # sufficient decrease
    c2: float = 0.9  # curvature
    max_step: float = 1e3  # cap on the norm of the first trial step
    max_line_search: int = 40


@dataclass(frozen=True)
class QuasiNewtonResult:
    x: np.ndarray
    fun: float
    grad: np.ndarray
    iterations: int
    converged: bool
    message: str
    history: tuple = ()  # f at the start and after every accepted step


class _Evaluator:
    """Objective and gradient along x + alpha p, checked for finiteness."""

    def __init__(self, objective, gradient):
        self.objective = objective
        self.gradient = gradient
        self.calls = 0

    def __call__(self, x: np.ndarray) -> tuple[float, np.ndarray]:
        self.calls += 1
        f = float(self.objective(x))
        g = np.asarray(self.gradient(x), dtype=float)
        if not np.isfinite(f) or not np.all(np.isfinite(g)):
            raise NumericError("objective or gradient is not finite", snapshot=x)
        return f, g


def _interpolate(lo, hi, f_lo, d_lo, f_hi) -> float:
    """Safeguarded quadratic interpolation inside [lo, hi]."""
    width = hi - lo
    denom = 2.0 * (f_hi - f_lo - d_lo * width)
    if denom > 0:
        trial = lo - d_lo * width * width / denom
        left, right = min(lo, hi), max(lo, hi)
        margin = 0.1 * abs(width)
        if left + margin <= trial <= right - margin:
            return trial
    return lo + 0.5 * width


def _zoom(evaluate, x, p, f0, d0, lo, hi, f_lo, d_lo, f_hi, opts):
    for _ in range(opts.max_line_search):
        alpha = _interpolate(lo, hi, f_lo, d_lo, f_hi)
        f, g = evaluate(x + alpha * p)
        if f > f0 + opts.c1 * alpha * d0 or f >= f_lo:
            hi, f_hi = alpha, f
            continue
        d = float(g @ p)
        if abs(d) <= -opts.c2 * d0:
            return alpha, f, g
        if d * (hi - lo) >= 0:
            hi, f_hi = lo, f_lo
        lo, f_lo, d_lo = alpha, f, d
    if lo > 0:
        f, g = evaluate(x + lo * p)
        return lo, f, g
    return None


def wolfe_line_search(evaluate, x, p, f0, g0, alpha0, opts: QuasiNewtonOpts):
    """
    Find a step satisfying the strong Wolfe conditions along p.

    Returns:
        (alpha, f, g) at the accepted point, or None when no decrease was found
    """
    d0 = float(g0 @ p)
    alpha_max = max(alpha0, opts.max_step / max(np.linalg.norm(p), 1e-300))
    prev, f_prev, d_prev = 0.0, f0, d0
    alpha = alpha0
    for i in range(opts.max_line_search):
        f, g = evaluate(x + alpha * p)
        if f > f0 + opts.c1 * alpha * d0 or (i > 0 and f >= f_prev):
            return _zoom(evaluate, x, p, f0, d0, prev, alpha, f_prev, d_prev, f, opts)
        d = float(g @ p)
        if abs(d) <= -opts.c2 * d0:
            return alpha, f, g
        if d >= 0:
            return _zoom(evaluate, x, p, f0, d0, alpha, prev, f, d, f_prev, opts)
        prev, f_prev, d_prev = alpha, f, d
        if alpha >= alpha_max:
            return alpha, f, g
        alpha = min(2.0 * alpha, alpha_max)
    return prev, *evaluate(x + prev * p)


def quasi_newton_minimize(
    objective: Callable[[np.ndarray], float],
    gradient: Callable[[np.ndarray], np.ndarray],
    x0,
    opts: Optional[QuasiNewtonOpts] = None,
    stationary: Optional[Callable[[np.ndarray, np.ndarray], bool]] = None,
) -> QuasiNewtonResult:
    """
    Minimize a smooth function with BFGS updates of the inverse Hessian.

    Args:
        objective: f(x)
        gradient: grad f(x)
        x0: Starting point
        opts: Iteration limit, gradient tolerance and line-search constants
        stationary: Optional test stationary(x, g) for points where f is nearly
            non-smooth; when the iteration stalls or runs out and the test holds,
            the point is reported as converged

    Returns:
        QuasiNewtonResult; f at the result never exceeds f(x0)
    """
    opts = opts or QuasiNewtonOpts()
    evaluate = _Evaluator(objective, gradient)
    x = np.array(x0, dtype=float).ravel()
    f, g = evaluate(x)
    history = [f]
    dim = x.size
    inv_hess = np.eye(dim)
    fresh = True

    def result(k: int, converged: bool, message: str) -> QuasiNewtonResult:
        return QuasiNewtonResult(x, f, g, k, converged, message, tuple(history))

    def stalled(k: int, message: str) -> QuasiNewtonResult:
        if stationary is not None and stationary(x, g):
            return result(k, True, "stationary at a non-smooth point")
        return result(k, False, message)

    for k in range(opts.max_iter):
        if np.max(np.abs(g), initial=0.0) < opts.grad_tol:
            return result(k, True, "gradient below tolerance")

        p = -inv_hess @ g
        if g @ p >= 0:
            inv_hess, fresh = np.eye(dim), True
            p = -g
        norm_p = np.linalg.norm(p)
        alpha0 = min(1.0, opts.max_step / norm_p)

        found = wolfe_line_search(evaluate, x, p, f, g, alpha0, opts)
        if found is None or found[1] > f:
            if not fresh:
                log.debug(f"quasi-Newton: line search failed at iteration {k}, resetting curvature")
                inv_hess, fresh = np.eye(dim), True
                continue
            return stalled(k, "line search failed")

        alpha, f_new, g_new = found
        s = alpha * p
        y = g_new - g
        sy = float(s @ y)
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            if fresh:
                inv_hess = (sy / float(y @ y)) * np.eye(dim)
            rho = 1.0 / sy
            v = np.eye(dim) - rho * np.outer(s, y)
            inv_hess = v @ inv_hess @ v.T + rho * np.outer(s, s)
            fresh = False
        x, f, g = x + s, f_new, g_new
        history.append(f)

        if np.max(np.abs(s)) == 0:
            return stalled(k + 1, "step vanished")

    if np.max(np.abs(g), initial=0.0) < opts.grad_tol:
        return result(opts.max_iter, True, "gradient below tolerance")
    return stalled(opts.max_iter, "max_iter")
