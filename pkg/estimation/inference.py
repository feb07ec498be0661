"""Sandwich covariance of the loadings and pointwise bands for the fitted curves."""

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import linalg

from core import model
from core.model import Dataset
from core.quantile import score, smooth_score_deriv
from estimation.estimator import VicmFit, _check_component, refit_state
from estimation.sparsity import ScadPenalty, mm_terms
from splines.basis import basis_matrix
from utils.errors import ConditioningError, ParameterError
from utils.linalg import sandwich

# Two-sided 95% normal quantile
Z_975 = 1.959963984540054


def _dataset(fit: VicmFit, dataset: Optional[Dataset]) -> Dataset:
    dataset = dataset or fit.dataset
    if dataset is None:
        raise ParameterError("fit carries no dataset; pass one explicitly")
    return dataset


def residual_weights(fit: VicmFit, bandwidth: Optional[float] = None) -> np.ndarray:
    """Kernel weights w_i = K(e_i/h)/h of the fitted residuals."""
    h = fit.bandwidth if bandwidth is None else bandwidth
    return smooth_score_deriv(h, fit.residuals)


def weighted_projection(design: np.ndarray, weights: np.ndarray, values: np.ndarray) -> np.ndarray:
    """
    Residuals of the w-weighted least-squares projection of each column of values
    onto the column span of design.
    """
    weights = np.asarray(weights, dtype=float)
    if np.any(weights < 0):
        raise ParameterError("projection weights must be nonnegative")
    root = np.sqrt(weights)[:, None]
    try:
        coef, *_ = linalg.lstsq(design * root, values * root, check_finite=True)
    except (linalg.LinAlgError, ValueError) as e:
        raise ConditioningError("weighted projection onto the spline design failed") from e
    return values - design @ coef


def project_covariates(fit: VicmFit, weights: np.ndarray, dataset: Optional[Dataset] = None) -> np.ndarray:
    """Z minus its w-weighted projection onto the design columns D(beta-hat), n x p."""
    dataset = _dataset(fit, dataset)
    return weighted_projection(fit.design(dataset.x, dataset.z), weights, dataset.z)


def projected_gradients(fit: VicmFit, z_tilde: np.ndarray, dataset: Optional[Dataset] = None) -> np.ndarray:
    """Rows a_i = (m-dot_l X_il J_l^T Z-tilde_i)_l, an n x d(p-1) matrix."""
    dataset = _dataset(fit, dataset)
    state = refit_state(fit, dataset)
    cols = []
    for l in range(fit.d):
        jac = model.loading_jacobian(fit.reduced[l])
        cols.append((state.m_dot[:, l] * dataset.x[:, l])[:, None] * (z_tilde @ jac))
    return np.hstack(cols)


def loading_covariance(
    a: np.ndarray,
    weights: np.ndarray,
    scores: np.ndarray,
    mask: Optional[np.ndarray] = None,
    penalty_matrix: Optional[np.ndarray] = None,
) -> np.ndarray:
    """
    H^-1 M H^-1 on the free coordinates, zero elsewhere.

    Args:
        a: n x k gradient rows
        weights: Kernel weights (H = sum w a a^T)
        scores: Score values (M = sum psi^2 a a^T)
        mask: Free coordinates; defaults to all
        penalty_matrix: n Delta added to H, k x k

    Returns:
        k x k symmetric covariance
    """
    k = a.shape[1]
    free = np.ones(k, dtype=bool) if mask is None else np.asarray(mask, dtype=bool).ravel()
    cov = np.zeros((k, k))
    if not np.any(free):
        return cov
    sub = a[:, free]
    bread = (sub * weights[:, None]).T @ sub
    if penalty_matrix is not None:
        bread = bread + penalty_matrix[np.ix_(free, free)]
    meat = (sub * (scores ** 2)[:, None]).T @ sub
    cov[np.ix_(free, free)] = sandwich(bread, meat, what="loading information")
    return cov


@dataclass(frozen=True)
class CurveBand:
    """Pointwise 95% band of one fitted curve on a grid of raw index values."""
    component: int
    u: np.ndarray
    m_hat: np.ndarray
    se: np.ndarray
    lo: np.ndarray
    hi: np.ndarray

    def rows(self) -> list[tuple]:
        return [
            (self.component, float(u), float(m), float(s), float(a), float(b))
            for u, m, s, a, b in zip(self.u, self.m_hat, self.se, self.lo, self.hi)
        ]


@dataclass(frozen=True)
class CovarianceReport:
    """Sandwich covariance of the reduced and full loadings."""
    cov_reduced: np.ndarray
    cov_full: np.ndarray
    asd_full: np.ndarray
    asd_reduced: np.ndarray
    penalized: bool = False
    curve_bands: dict = field(default_factory=dict)  # 1-based component -> CurveBand

    def to_dict(self, d: int, p: int) -> dict:
        return {
            "penalized": self.penalized,
            "asd": self.asd_full.reshape(d, p).tolist(),
            "cov_full": self.cov_full.tolist(),
        }


def cov_loadings(
    fit: VicmFit,
    tau: Optional[float] = None,
    bandwidth: Optional[float] = None,
    penalty: Optional[ScadPenalty] = None,
    dataset: Optional[Dataset] = None,
    weights: Optional[np.ndarray] = None,
    scores: Optional[np.ndarray] = None,
) -> CovarianceReport:
    """
    Sandwich covariance of the loadings.

    Args:
        fit: Fitted model
        tau: Quantile level; defaults to the fit's
        bandwidth: Kernel bandwidth of the weights; defaults to the fit's
        penalty: SCAD penalty used for selection; adds n Delta to H on the support
        dataset: Observations; defaults to the one attached to the fit
        weights: Override for the kernel weights
        scores: Override for the score values

    Returns:
        CovarianceReport without curve bands
    """
    dataset = _dataset(fit, dataset)
    tau = fit.tau if tau is None else tau
    if weights is None:
        weights = residual_weights(fit, bandwidth)
    if scores is None:
        scores = score(tau, fit.residuals)

    if fit.p == 1:
        empty = np.zeros((0, 0))
        zeros = np.zeros((fit.d, fit.d))
        return CovarianceReport(empty, zeros, np.zeros(fit.d), np.zeros(0), penalty is not None)

    z_tilde = project_covariates(fit, weights, dataset)
    a = projected_gradients(fit, z_tilde, dataset)
    # Loadings set to zero by selection carry no variance
    mask = np.ones(fit.reduced.shape, dtype=bool) if fit.support is None else fit.support[:, 1:] & (fit.reduced != 0)
    penalty_matrix = None
    if penalty is not None:
        penalty_matrix, _ = mm_terms(penalty, fit.reduced, dataset.n)

    cov_reduced = loading_covariance(a, weights, scores, mask, penalty_matrix)
    jac = model.stacked_jacobian(fit.reduced)
    cov_full = jac @ cov_reduced @ jac.T
    cov_full = 0.5 * (cov_full + cov_full.T)
    return CovarianceReport(
        cov_reduced=cov_reduced,
        cov_full=cov_full,
        asd_full=np.sqrt(np.maximum(np.diag(cov_full), 0.0)),
        asd_reduced=np.sqrt(np.maximum(np.diag(cov_reduced), 0.0)),
        penalized=penalty is not None,
    )


def default_grid(fit: VicmFit, l: int, size: int = 50, dataset: Optional[Dataset] = None) -> np.ndarray:
    """Equally spaced raw index values over the observed range of component l."""
    dataset = _dataset(fit, dataset)
    _check_component(fit, l)
    index = model.index_values(dataset.z, fit.loadings)[:, l - 1]
    return np.linspace(index.min(), index.max(), size)


def curve_bands(
    fit: VicmFit,
    l: int,
    grid: Optional[Sequence[float]] = None,
    tau: Optional[float] = None,
    bandwidth: Optional[float] = None,
    dataset: Optional[Dataset] = None,
    weights: Optional[np.ndarray] = None,
    scores: Optional[np.ndarray] = None,
) -> CurveBand:
    """
    Pointwise standard errors of m-hat_l from C^-1 D C^-1 with C = sum w D D^T.

    Args:
        fit: Fitted model
        l: 1-based component
        grid: Raw index values; defaults to 50 points over the observed range
        tau: Quantile level; defaults to the fit's
        bandwidth: Kernel bandwidth of the weights; defaults to the fit's
        dataset: Observations; defaults to the one attached to the fit
        weights: Override for the kernel weights
        scores: Override for the score values

    Returns:
        CurveBand with m-hat +- 1.96 se
    """
    dataset = _dataset(fit, dataset)
    _check_component(fit, l)
    tau = fit.tau if tau is None else tau
    if grid is None:
        grid = default_grid(fit, l, dataset=dataset)
    grid = np.atleast_1d(np.asarray(grid, dtype=float))
    if weights is None:
        weights = residual_weights(fit, bandwidth)
    if scores is None:
        scores = score(tau, fit.residuals)

    design = fit.design(dataset.x, dataset.z)
    bread = (design * weights[:, None]).T @ design
    meat = (design * (scores ** 2)[:, None]).T @ design
    cov = sandwich(bread, meat, what="spline information")

    dim = fit.basis.dim
    block = cov[(l - 1) * dim:l * dim, (l - 1) * dim:l * dim]
    b = basis_matrix(fit.basis, fit.rescalers[l - 1].rescale(grid))
    m_hat = b @ fit.coeffs[l - 1]
    se = np.sqrt(np.maximum(np.einsum("ij,jk,ik->i", b, block, b), 0.0))
    return CurveBand(
        component=l,
        u=grid,
        m_hat=m_hat,
        se=se,
        lo=m_hat - Z_975 * se,
        hi=m_hat + Z_975 * se,
    )
