"""
Identification of linear components.

A group SCAD penalty on the curvature norm ||lambda_l||_D shrinks whole spline
blocks toward straight lines; blocks whose penalized norm vanishes are refit
as exact lines.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from config.settings import PenaltyConfig
from core import model
from core.model import Dataset
from core.quantile import BARTLETT, SmoothingKernel, check_bandwidth, check_tau, smooth_score, smoothed_check_loss
from estimation.estimator import VicmFit, quantile_regression, with_coeffs
from estimation.optimizer import QuasiNewtonOpts, quasi_newton_minimize
from estimation.sparsity import ScadPenalty, scad_deriv, scad_value
from splines.basis import SplineBasis, affine_coefficients, curvature_gram
from utils.errors import ParameterError
from utils.logger import log

# Absolute floor of the linearity cutoff
LINEARITY_FLOOR = 1e-2
# Blocks within this multiple of kappa of zero curvature sit on the penalty kink
COLLAPSE_FACTOR = 1e3


class PenalizedSplineProblem:
    """Smoothed check loss plus n sum_l p(||lambda_l||_D) for fixed loadings."""

    def __init__(
        self,
        design: np.ndarray,
        y: np.ndarray,
        tau: float,
        bandwidth: float,
        gram: np.ndarray,
        pen: ScadPenalty,
        d: int,
        kernel: SmoothingKernel = BARTLETT,
    ):
        self.design = design
        self.y = y
        self.tau = check_tau(tau)
        self.bandwidth = check_bandwidth(bandwidth)
        self.gram = gram
        self.pen = pen
        self.d = d
        self.dim = gram.shape[0]
        self.kernel = kernel
        if design.shape[1] != d * self.dim:
            raise ParameterError(f"design has {design.shape[1]} columns, expected {d * self.dim}")

    def _blocks(self, lam: np.ndarray) -> np.ndarray:
        lam = np.asarray(lam, dtype=float).ravel()
        if lam.size != self.d * self.dim:
            raise ParameterError(f"coefficient vector has length {lam.size}, expected {self.d * self.dim}")
        return lam.reshape(self.d, self.dim)

    def _root(self, blocks: np.ndarray) -> np.ndarray:
        quad = np.einsum("lj,jk,lk->l", blocks, self.gram, blocks)
        return np.sqrt(np.maximum(quad, 0.0) + self.pen.kappa ** 2)

    def value(self, lam) -> float:
        blocks = self._blocks(lam)
        resid = self.y - self.design @ blocks.ravel()
        loss = float(np.sum(smoothed_check_loss(self.tau, self.bandwidth, resid, self.kernel)))
        norms = np.maximum(self._root(blocks) - self.pen.kappa, 0.0)
        return loss + self.y.size * float(np.sum(scad_value(self.pen, norms)))

    def gradient(self, lam) -> np.ndarray:
        blocks = self._blocks(lam)
        resid = self.y - self.design @ blocks.ravel()
        grad = -self.design.T @ smooth_score(self.tau, self.bandwidth, resid, self.kernel)
        root = self._root(blocks)
        slope = scad_deriv(self.pen, np.maximum(root - self.pen.kappa, 0.0)) / root
        penalty = self.y.size * slope[:, None] * (blocks @ self.gram)
        return grad + penalty.ravel()

    def stationary(self, lam, grad, tol: float) -> bool:
        """
        First-order check that tolerates blocks collapsed onto a straight line.

        A collapsed block must have a vanishing loss gradient along the null space of D,
        where the penalty is flat, and a loss gradient inside the SCAD subdifferential
        n alpha {D w : w^T D w <= 1}. Every other block needs a gradient below tol.
        """
        blocks = self._blocks(lam)
        grad = np.asarray(grad, dtype=float).reshape(self.d, self.dim)
        root = self._root(blocks)
        norms = np.maximum(root - self.pen.kappa, 0.0)
        collapsed = norms <= COLLAPSE_FACTOR * self.pen.kappa
        if np.max(np.abs(grad[~collapsed]), initial=0.0) > tol:
            return False
        if not collapsed.any():
            return True
        vals, vecs = np.linalg.eigh(self.gram)
        flat = vals <= 1e-10 * max(float(vals.max(initial=0.0)), 1.0)
        slope = scad_deriv(self.pen, norms) / root
        loss_grad = grad - self.y.size * slope[:, None] * (blocks @ self.gram)
        for l in np.flatnonzero(collapsed):
            along = vecs[:, flat].T @ loss_grad[l]
            if np.max(np.abs(along), initial=0.0) > tol:
                return False
            across = vecs[:, ~flat].T @ loss_grad[l]
            if np.sqrt(np.sum(across ** 2 / vals[~flat])) > self.y.size * self.pen.alpha + tol:
                return False
        return True


def d_norms(coeffs: np.ndarray, gram: np.ndarray) -> np.ndarray:
    """Curvature norms sqrt(lambda_l^T D lambda_l) per component."""
    coeffs = np.atleast_2d(coeffs)
    quad = np.einsum("lj,jk,lk->l", coeffs, gram, coeffs)
    return np.sqrt(np.maximum(quad, 0.0))


def linearity_threshold(coeffs: np.ndarray, n: int) -> float:
    """Default cutoff max(1e-2, 1e-3 sqrt(n) median_l ||lambda_l||_2 / sqrt(J))."""
    coeffs = np.atleast_2d(coeffs)
    scale = np.linalg.norm(coeffs, axis=1) / np.sqrt(coeffs.shape[1])
    return float(max(LINEARITY_FLOOR, 1e-3 * np.sqrt(n) * np.median(scale)))


def penalized_spline_objective(
    dataset: Dataset,
    loadings: np.ndarray,
    tau: float,
    pen: ScadPenalty,
    bandwidth: float,
    lam,
    basis: SplineBasis,
    rescalers,
) -> tuple[float, np.ndarray]:
    """
    Value and gradient of the structure-identification objective at lambda.

    Args:
        dataset: Observations
        loadings: Fixed d x p loadings
        tau: Quantile level
        pen: Group SCAD penalty (alpha_2)
        bandwidth: Smoothing bandwidth of the check loss
        lam: Flattened spline coefficients, component by component
        basis: Spline basis
        rescalers: Index rescalers of the fit

    Returns:
        (value, gradient)
    """
    design = model.design_matrix(basis, rescalers, dataset.x, dataset.z, loadings)
    problem = PenalizedSplineProblem(design, dataset.y, tau, bandwidth, curvature_gram(basis), pen, dataset.d)
    return problem.value(lam), problem.gradient(lam)


@dataclass(frozen=True)
class StructureReport:
    """Penalized spline coefficients, curvature norms and linearity flags."""
    lambda_bar: np.ndarray
    d_norms: np.ndarray
    is_linear: np.ndarray
    linear_coeffs: dict  # 1-based component -> (intercept, slope) in raw index units
    threshold: float
    alpha2: float
    converged: bool
    iterations: int
    objective: float
    fit: Optional[VicmFit] = field(default=None, repr=False)

    @property
    def nonlinear_count(self) -> int:
        return int(np.sum(~self.is_linear))

    def to_dict(self) -> dict:
        """Convert to dictionary."""
        return {
            "alpha2": self.alpha2,
            "threshold": self.threshold,
            "converged": self.converged,
            "iterations": self.iterations,
            "objective": self.objective,
            "d_norms": [float(v) for v in self.d_norms],
            "is_linear": [bool(v) for v in self.is_linear],
            "linear_coeffs": {
                str(l): {"intercept": float(c[0]), "slope": float(c[1])}
                for l, c in sorted(self.linear_coeffs.items())
            },
        }


def linear_refit(fit: VicmFit, dataset: Dataset, is_linear: np.ndarray) -> tuple[VicmFit, dict]:
    """
    Refit spline coefficients with flagged components restricted to straight lines.

    Returns:
        (fit with new coefficients, {1-based component: (intercept, slope) in raw units})
    """
    is_linear = np.asarray(is_linear, dtype=bool)
    index = model.index_values(dataset.z, fit.loadings)
    blocks = model.component_bases(fit.basis, fit.rescalers, dataset.z, fit.loadings)
    columns, widths = [], []
    for l in range(fit.d):
        xl = dataset.x[:, [l]]
        if is_linear[l]:
            u = fit.rescalers[l].rescale(index[:, l])[:, None]
            block = np.hstack([xl, u * xl])
        else:
            block = blocks[l] * xl
        columns.append(block)
        widths.append(block.shape[1])

    coef = quantile_regression(np.hstack(columns), dataset.y, fit.tau).coef
    coeffs = np.zeros_like(fit.coeffs)
    lines = {}
    start = 0
    for l, width in enumerate(widths):
        part = coef[start:start + width]
        start += width
        if is_linear[l]:
            c0, c1 = float(part[0]), float(part[1])
            coeffs[l] = affine_coefficients(fit.basis, c0, c1)
            resc = fit.rescalers[l]
            span = resc.hi - resc.lo
            lines[l + 1] = (c0 - c1 * resc.lo / span, c1 / span)
        else:
            coeffs[l] = part
    return with_coeffs(fit, coeffs, dataset), lines


def identify_linear(
    dataset: Dataset,
    tau: float,
    pen: ScadPenalty,
    sparse_fit: VicmFit,
    config: Optional[PenaltyConfig] = None,
    threshold: Optional[float] = None,
) -> StructureReport:
    """
    Flag linear components of a (sparse) fit.

    Args:
        dataset: Observations
        tau: Quantile level
        pen: Group SCAD penalty with level alpha_2
        sparse_fit: Fit whose loadings are held fixed
        config: Optimizer limits and the optional fixed cutoff
        threshold: Cutoff on ||lambda_l||_D; overrides config

    Returns:
        StructureReport with the linear refit attached
    """
    config = config or PenaltyConfig()
    design = sparse_fit.design(dataset.x, dataset.z)
    gram = curvature_gram(sparse_fit.basis)
    problem = PenalizedSplineProblem(design, dataset.y, tau, sparse_fit.bandwidth, gram, pen, dataset.d)
    opts = QuasiNewtonOpts(max_iter=config.qn_max_iter, grad_tol=config.qn_grad_tol)
    tol = config.qn_grad_tol * dataset.n
    result = quasi_newton_minimize(
        problem.value, problem.gradient, sparse_fit.coeffs.ravel(), opts,
        stationary=lambda x, g: problem.stationary(x, g, tol),
    )
    if not result.converged:
        log.warning(f"structure identification at alpha2={pen.alpha:.4g} stopped: {result.message}")

    lambda_bar = result.x.reshape(dataset.d, sparse_fit.basis.dim)
    norms = d_norms(lambda_bar, gram)
    if threshold is None:
        threshold = config.linearity_threshold
    if threshold is None:
        threshold = linearity_threshold(lambda_bar, dataset.n)
    is_linear = norms < threshold

    refit, lines = linear_refit(sparse_fit, dataset, is_linear)
    log.info(
        f"alpha2={pen.alpha:.4g}: linear components "
        f"{[l + 1 for l in np.flatnonzero(is_linear)]} (cutoff {threshold:.3g})"
    )
    return StructureReport(
        lambda_bar=lambda_bar,
        d_norms=norms,
        is_linear=is_linear,
        linear_coeffs=lines,
        threshold=float(threshold),
        alpha2=pen.alpha,
        converged=result.converged,
        iterations=result.iterations,
        objective=result.fun,
        fit=refit,
    )
