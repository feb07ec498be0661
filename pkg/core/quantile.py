"""Check loss, score and induced-smoothing primitives."""

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np

from utils.errors import ParameterError

SQRT5 = math.sqrt(5.0)


def check_tau(tau: float) -> float:
    """Validate a quantile level."""
    if not (0.0 < tau < 1.0) or not np.isfinite(tau):
        raise ParameterError(f"quantile level tau must lie in (0, 1), got {tau}")
    return float(tau)


def check_bandwidth(h: float) -> float:
    """Validate a smoothing bandwidth."""
    if not np.isfinite(h) or h <= 0:
        raise ParameterError(f"bandwidth must be positive, got {h}")
    return float(h)


class SmoothingKernel(ABC):
    """Symmetric, compactly supported kernel used for induced smoothing."""

    name: str = "kernel"
    order: int = 2
    half_width: float = 1.0

    @abstractmethod
    def value(self, u):
        """Kernel density K(u)."""

    @abstractmethod
    def cdf(self, x):
        """G(x), the integral of K below x."""

    @abstractmethod
    def integrated_cdf(self, x):
        """Antiderivative of G vanishing at the left end of the support."""


@dataclass(frozen=True)
class BartlettKernel(SmoothingKernel):
    """Second-order Bartlett kernel K(u) = 3/(4 sqrt 5) (1 - u^2/5) on |u| <= sqrt 5."""

    name: str = "bartlett"
    order: int = 2
    half_width: float = SQRT5

    @property
    def peak(self) -> float:
        return 3.0 / (4.0 * SQRT5)

    def value(self, u):
        u = np.asarray(u, dtype=float)
        return np.where(np.abs(u) <= SQRT5, self.peak * (1.0 - u * u / 5.0), 0.0)

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        inner = 0.5 + self.peak * (x - x ** 3 / 15.0)
        return np.where(x <= -SQRT5, 0.0, np.where(x >= SQRT5, 1.0, inner))

    def integrated_cdf(self, x):
        x = np.asarray(x, dtype=float)
        inner = 0.5 * (x + SQRT5) + self.peak * (0.5 * (x * x - 5.0) - (x ** 4 - 25.0) / 60.0)
        return np.where(x <= -SQRT5, 0.0, np.where(x >= SQRT5, x, inner))


BARTLETT = BartlettKernel()


def _scalar_or_array(result, like):
    if np.ndim(like) == 0:
        return float(result)
    return result


def check_loss(tau: float, u):
    """rho_tau(u) = u (tau - I(u <= 0))."""
    tau = check_tau(tau)
    arr = np.asarray(u, dtype=float)
    return _scalar_or_array(np.where(arr > 0, tau * arr, (tau - 1.0) * arr), u)


def score(tau: float, u):
    """psi_tau(u) = tau - I(u <= 0); the indicator is closed at zero."""
    tau = check_tau(tau)
    arr = np.asarray(u, dtype=float)
    return _scalar_or_array(np.where(arr <= 0, tau - 1.0, tau), u)


def kernel_value(kernel: SmoothingKernel, u):
    return _scalar_or_array(kernel.value(u), u)


def smooth_cdf(kernel: SmoothingKernel, x):
    return _scalar_or_array(kernel.cdf(x), x)


def smooth_score(tau: float, h: float, u, kernel: SmoothingKernel = BARTLETT):
    """
    Smoothed score psi_tau,h(u) = tau - 1 + G(u/h).

    Args:
        tau: Quantile level in (0, 1)
        h: Bandwidth
        u: Residual value(s)
        kernel: Smoothing kernel

    Returns:
        Values in [tau - 1, tau]
    """
    tau = check_tau(tau)
    h = check_bandwidth(h)
    arr = np.asarray(u, dtype=float)
    return _scalar_or_array(tau - 1.0 + kernel.cdf(arr / h), u)


def smooth_score_deriv(h: float, u, kernel: SmoothingKernel = BARTLETT):
    """d/du psi_tau,h(u) = K(u/h)/h, independent of tau."""
    h = check_bandwidth(h)
    arr = np.asarray(u, dtype=float)
    return _scalar_or_array(kernel.value(arr / h) / h, u)


def smoothed_check_loss(tau: float, h: float, u, kernel: SmoothingKernel = BARTLETT):
    """
    rho~_tau,h(u) = (tau - 1) u + h Gbar(u/h), the antiderivative of psi_tau,h.

    Agrees with check_loss whenever |u| >= h times the kernel half-width.
    """
    tau = check_tau(tau)
    h = check_bandwidth(h)
    arr = np.asarray(u, dtype=float)
    return _scalar_or_array((tau - 1.0) * arr + h * kernel.integrated_cdf(arr / h), u)


def total_check_loss(tau: float, residuals) -> float:
    """Sum of check losses, the unsmoothed objective L_tau,n."""
    return float(np.sum(check_loss(tau, np.asarray(residuals, dtype=float))))
