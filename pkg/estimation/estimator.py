"""
Unpenalized estimation of varying index coefficient quantile regression.

Given loadings beta the spline coefficients solve a linear quantile regression;
the loadings solve kernel-smoothed estimating equations by Fisher scoring with
step halving on the unsmoothed check loss.
"""

from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Optional, Sequence

import numpy as np
from scipy import sparse
from scipy.optimize import linprog

from config.settings import FitConfig
from core import model
from core.model import Dataset
from core.quantile import (
    BARTLETT,
    SmoothingKernel,
    check_bandwidth,
    check_tau,
    smooth_score,
    smooth_score_deriv,
    smoothed_check_loss,
    total_check_loss,
)
from splines.basis import IndexRescaler, SplineBasis, basis_matrix, default_knots, deriv_basis_matrix, make_basis
from utils.errors import (
    ConditioningError,
    InsufficientDataError,
    NumericError,
    ParameterError,
    SingularDesignError,
)
from utils.linalg import ridge_shift, solve_psd
from utils.logger import log

# Vanishing floors of the IRLS surrogate |r| ~ r^2 / max(|r|, eps), relative to the response spread
EPS_SCHEDULE = tuple(10.0 ** -k for k in range(1, 9))
RIDGE = 1e-8


# ---------------------------------------------------------------------------
# Inner problem: lambda given beta
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QuantRegResult:
    """Solution of a linear quantile regression."""
    coef: np.ndarray
    objective: float
    iterations: int


def _basic_solution(design: np.ndarray, y: np.ndarray, coef: np.ndarray) -> Optional[tuple[np.ndarray, np.ndarray]]:
    """Interpolate the rows with the smallest residuals; None when they are rank deficient."""
    n, k = design.shape
    order = np.argsort(np.abs(y - design @ coef), kind="stable")
    rows: list[int] = []
    for idx in order:
        trial = rows + [int(idx)]
        if np.linalg.matrix_rank(design[trial]) == len(trial):
            rows = trial
            if len(rows) == k:
                break
    if len(rows) < k:
        return None
    try:
        return np.linalg.solve(design[rows], y[rows]), np.asarray(rows)
    except np.linalg.LinAlgError:
        return None


def _is_optimal_vertex(design: np.ndarray, y: np.ndarray, tau: float, coef: np.ndarray, rows: np.ndarray, tol: float = 1e-9) -> bool:
    """Dual check at a basic solution: the basis rows must balance the signed scores inside [tau - 1, tau]."""
    resid = y - design @ coef
    free = np.ones(len(y), dtype=bool)
    free[rows] = False
    scale = max(1.0, float(np.max(np.abs(y))))
    if np.any(np.abs(resid[free]) <= tol * scale):
        return False
    psi = tau - (resid[free] < 0)
    try:
        dual = np.linalg.solve(design[rows].T, -(design[free].T @ psi))
    except np.linalg.LinAlgError:
        return False
    return bool(np.all(dual >= tau - 1.0 - tol) and np.all(dual <= tau + tol))


def _linear_program(design: np.ndarray, y: np.ndarray, tau: float) -> np.ndarray:
    """Exact solution through the standard LP form c + u+ - u- = y with HiGHS."""
    n, k = design.shape
    cost = np.concatenate([np.zeros(k), np.full(n, tau), np.full(n, 1.0 - tau)])
    identity = sparse.eye(n, format="csr")
    equality = sparse.hstack([sparse.csr_matrix(design), identity, -identity], format="csr")
    bounds = [(None, None)] * k + [(0, None)] * (2 * n)
    result = linprog(cost, A_eq=equality, b_eq=y, bounds=bounds, method="highs")
    if result.status != 0:
        raise NumericError(f"inner quantile regression LP failed: {result.message}")
    return np.asarray(result.x[:k], dtype=float)


def quantile_regression(
    design: np.ndarray,
    y: np.ndarray,
    tau: float,
    max_iter: int = 200,
    tol: float = 1e-8,
    ridge: float = RIDGE,
) -> QuantRegResult:
    """
    Minimize sum_i rho_tau(y_i - design_i . coef).

    Iteratively reweighted least squares on the majorizer |r| <= r^2/(2a) + a/2
    with a = max(|r_old|, eps), continued over a decreasing eps schedule, then
    polished to the basic solution through the rows with the smallest residuals.
    A basis that fails the dual check is replaced by the exact LP solution.

    Args:
        design: n x k design matrix
        y: Response vector
        tau: Quantile level
        max_iter: Total reweighting iterations across the schedule
        tol: Relative objective change that ends a schedule stage
        ridge: Relative ridge on the normal equations

    Returns:
        QuantRegResult with the coefficients and the attained check loss
    """
    tau = check_tau(tau)
    design = np.atleast_2d(np.asarray(design, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    n, k = design.shape
    if k == 0:
        return QuantRegResult(coef=np.zeros(0), objective=total_check_loss(tau, y), iterations=0)

    gram = design.T @ design
    shift = ridge_shift(gram, ridge)
    tilt = (2.0 * tau - 1.0) * design.sum(axis=0)
    spread = float(np.mean(np.abs(y - np.median(y))))
    spread = spread if spread > 0 else 1.0

    def objective(c):
        return total_check_loss(tau, y - design @ c)

    coef = solve_psd(gram, design.T @ y, shift=shift, what="least-squares start")
    best, best_obj = coef, objective(coef)
    per_stage = max(5, max_iter // len(EPS_SCHEDULE))
    iterations = 0

    for eps in EPS_SCHEDULE:
        floor = eps * spread
        previous = objective(coef)
        for _ in range(per_stage):
            resid = y - design @ coef
            w = 1.0 / np.maximum(np.abs(resid), floor)
            lhs = (design * w[:, None]).T @ design
            coef = solve_psd(lhs, design.T @ (w * y) + tilt, shift=shift, what="inner quantile regression")
            iterations += 1
            current = objective(coef)
            if current < best_obj:
                best, best_obj = coef, current
            if abs(previous - current) <= tol * max(1.0, abs(previous)):
                break
            previous = current

    basic = _basic_solution(design, y, best)
    optimal = False
    if basic is not None:
        vertex, rows = basic
        vertex_obj = objective(vertex)
        if vertex_obj <= best_obj:
            best, best_obj = vertex, vertex_obj
            optimal = _is_optimal_vertex(design, y, tau, vertex, rows)
    if not optimal:
        log.debug(f"Inner quantile regression: vertex not dual feasible after {iterations} reweightings, solving the LP")
        exact = _linear_program(design, y, tau)
        exact_obj = objective(exact)
        if exact_obj <= best_obj:
            best, best_obj = exact, exact_obj

    if not np.all(np.isfinite(best)):
        raise NumericError("inner quantile regression produced non-finite coefficients", snapshot=best)
    return QuantRegResult(coef=best, objective=best_obj, iterations=iterations)


def smoothed_quantile_regression(
    design: np.ndarray,
    y: np.ndarray,
    tau: float,
    h: float,
    start: Optional[np.ndarray] = None,
    max_iter: int = 200,
    tol: float = 1e-10,
    kernel: SmoothingKernel = BARTLETT,
) -> np.ndarray:
    """Damped Newton minimization of sum_i rho~_tau,h(y_i - design_i . coef)."""
    tau = check_tau(tau)
    h = check_bandwidth(h)
    coef = quantile_regression(design, y, tau).coef if start is None else np.array(start, dtype=float)

    def objective(c):
        return float(np.sum(smoothed_check_loss(tau, h, y - design @ c, kernel)))

    value = objective(coef)
    for _ in range(max_iter):
        resid = y - design @ coef
        grad = -design.T @ smooth_score(tau, h, resid, kernel)
        w = smooth_score_deriv(h, resid, kernel)
        hess = (design * w[:, None]).T @ design
        step = solve_psd(hess, -grad, what="smoothed inner Hessian")
        slope = float(grad @ step)
        t = 1.0
        for _ in range(40):
            trial = coef + t * step
            trial_value = objective(trial)
            if trial_value <= value + 1e-4 * t * slope:
                break
            t *= 0.5
        else:
            break
        coef, value = trial, trial_value
        if np.max(np.abs(t * step)) <= tol * (1.0 + np.max(np.abs(coef))):
            break
    return coef


def _check_blocks(design: np.ndarray, d: int, dim: int):
    for l in range(d):
        if not np.any(design[:, l * dim:(l + 1) * dim]):
            raise SingularDesignError(f"spline block {l + 1} has no nonzero design entries", block=l + 1)


def fit_spline_coeffs(
    dataset: Dataset,
    loadings: np.ndarray,
    basis: SplineBasis,
    rescalers: Sequence[IndexRescaler],
    tau: float,
    config: Optional[FitConfig] = None,
) -> np.ndarray:
    """Inner fit: lambda-hat(beta) for fixed loadings, returned as a d x J matrix."""
    config = config or FitConfig(tau=tau)
    design = model.design_matrix(basis, rescalers, dataset.x, dataset.z, loadings)
    _check_blocks(design, dataset.d, basis.dim)
    result = quantile_regression(design, dataset.y, tau, max_iter=config.max_inner, tol=config.tol_inner)
    return result.coef.reshape(dataset.d, basis.dim)


def fit_spline_coeffs_smoothed(
    dataset: Dataset,
    loadings: np.ndarray,
    basis: SplineBasis,
    rescalers: Sequence[IndexRescaler],
    tau: float,
    bandwidth: float,
    config: Optional[FitConfig] = None,
) -> np.ndarray:
    """Minimizer of the kernel-smoothed check loss for fixed loadings, d x J."""
    config = config or FitConfig(tau=tau)
    design = model.design_matrix(basis, rescalers, dataset.x, dataset.z, loadings)
    _check_blocks(design, dataset.d, basis.dim)
    start = quantile_regression(design, dataset.y, tau, max_iter=config.max_inner, tol=config.tol_inner).coef
    coef = smoothed_quantile_regression(design, dataset.y, tau, bandwidth, start=start, max_iter=config.max_inner)
    return coef.reshape(dataset.d, basis.dim)


# ---------------------------------------------------------------------------
# Profile losses
# ---------------------------------------------------------------------------

class QuantileLoss:
    """Check loss with the kernel-smoothed score driving the loading equations."""

    name = "quantile"

    def __init__(
        self,
        tau: float,
        bandwidth: float,
        max_inner: int = 200,
        tol_inner: float = 1e-8,
        smoothed_inner: bool = False,
        kernel: SmoothingKernel = BARTLETT,
    ):
        self.tau = check_tau(tau)
        self.bandwidth = check_bandwidth(bandwidth)
        self.max_inner = max_inner
        self.tol_inner = tol_inner
        self.smoothed_inner = smoothed_inner
        self.kernel = kernel

    @property
    def solves_score_equation(self) -> bool:
        return self.smoothed_inner

    def fit_coeffs(self, design: np.ndarray, y: np.ndarray) -> np.ndarray:
        coef = quantile_regression(design, y, self.tau, max_iter=self.max_inner, tol=self.tol_inner).coef
        if self.smoothed_inner:
            coef = smoothed_quantile_regression(
                design, y, self.tau, self.bandwidth, start=coef, max_iter=self.max_inner, kernel=self.kernel
            )
        return coef

    def objective(self, residuals: np.ndarray) -> float:
        return total_check_loss(self.tau, residuals)

    def scores(self, residuals: np.ndarray) -> np.ndarray:
        return smooth_score(self.tau, self.bandwidth, residuals, self.kernel)

    def weights(self, residuals: np.ndarray) -> np.ndarray:
        return smooth_score_deriv(self.bandwidth, residuals, self.kernel)


class SquaredLoss:
    """Least-squares profile used to initialize the loadings."""

    name = "squared"
    solves_score_equation = True

    def fit_coeffs(self, design: np.ndarray, y: np.ndarray) -> np.ndarray:
        return solve_psd(design.T @ design, design.T @ y, what="least-squares inner fit")

    def objective(self, residuals: np.ndarray) -> float:
        return float(residuals @ residuals)

    def scores(self, residuals: np.ndarray) -> np.ndarray:
        return residuals

    def weights(self, residuals: np.ndarray) -> np.ndarray:
        return np.ones_like(residuals)


def coeff_sensitivity_matrix(
    design: np.ndarray,
    a_dir: np.ndarray,
    weights: np.ndarray,
    score_term: Optional[np.ndarray] = None,
    ridge: float = RIDGE,
) -> np.ndarray:
    """
    Implicit derivative of the inner solution, (sum w D D^T)^-1 (S - sum w D a_dir^T).

    Args:
        design: n x dJ design rows D_i
        a_dir: n x d(p-1) direct index derivatives of the fitted values
        weights: Kernel weights w_i
        score_term: S = sum psi(r_i) dD_i/dbeta_{-1}^T; None drops it

    Returns:
        dJ x d(p-1) matrix d lambda-hat / d beta_{-1}^T
    """
    weighted = design * weights[:, None]
    gram = weighted.T @ design
    rhs = weighted.T @ a_dir
    if score_term is not None:
        rhs = rhs - score_term
    sens = -solve_psd(gram, rhs, ridge=ridge, what="weighted spline Gram matrix")
    if not np.all(np.isfinite(sens)):
        raise SingularDesignError("weighted spline Gram matrix is singular")
    return sens


class ProfileState:
    """
    Everything the outer loop needs at one value of the reduced loadings.

    Derivative quantities are computed on first access, so line-search trials
    pay only for the inner fit.
    """

    def __init__(
        self,
        dataset: Dataset,
        reduced: np.ndarray,
        basis: SplineBasis,
        loss,
        margin: float = 0.01,
        rescalers: Optional[Sequence[IndexRescaler]] = None,
        coeffs: Optional[np.ndarray] = None,
    ):
        self.dataset = dataset
        self.reduced = np.atleast_2d(np.asarray(reduced, dtype=float)).reshape(dataset.d, dataset.p - 1)
        self.basis = basis
        self.loss = loss
        self.loadings = model.expand(self.reduced)
        self.index = model.index_values(dataset.z, self.loadings)
        self.rescalers = list(rescalers) if rescalers is not None else model.fit_rescalers(self.index, margin)
        self.rescaled = model.rescaled_index(self.index, self.rescalers)
        self.blocks = [basis_matrix(basis, self.rescaled[:, l]) for l in range(dataset.d)]
        self.design = np.hstack([b * dataset.x[:, [l]] for l, b in enumerate(self.blocks)])
        _check_blocks(self.design, dataset.d, basis.dim)
        # Fitted coefficients solve the inner score equation only when the loss fits its own score
        self.score_equation_holds = coeffs is None and loss.solves_score_equation
        if coeffs is None:
            coeffs = loss.fit_coeffs(self.design, dataset.y)
        self.coeffs = np.asarray(coeffs, dtype=float).reshape(dataset.d, basis.dim)
        self.residuals = dataset.y - self.design @ self.coeffs.ravel()
        self.objective = loss.objective(self.residuals)
        if not np.isfinite(self.objective):
            raise NumericError("profile objective is not finite", snapshot=self.reduced)

    @cached_property
    def basis_slopes(self) -> list[np.ndarray]:
        """dB(u_il)/du_il per component in raw index units, zero where clipped."""
        return [
            deriv_basis_matrix(self.basis, self.rescaled[:, l]) * (resc.scale * resc.inside(self.index[:, l]))[:, None]
            for l, resc in enumerate(self.rescalers)
        ]

    @cached_property
    def m_dot(self) -> np.ndarray:
        """Derivative of each fitted function in raw index units, zero where clipped."""
        return np.column_stack([slopes @ self.coeffs[l] for l, slopes in enumerate(self.basis_slopes)])

    @cached_property
    def a_dir(self) -> np.ndarray:
        """Direct derivative of D_i^T lambda in beta_{-1} with lambda held fixed, n x d(p-1)."""
        x, z = self.dataset.x, self.dataset.z
        blocks = []
        for l in range(self.dataset.d):
            jac = model.loading_jacobian(self.reduced[l])
            blocks.append((self.m_dot[:, l] * x[:, l])[:, None] * (z @ jac))
        return np.hstack(blocks)

    @cached_property
    def scores(self) -> np.ndarray:
        return self.loss.scores(self.residuals)

    @cached_property
    def weights(self) -> np.ndarray:
        return self.loss.weights(self.residuals)

    @cached_property
    def score_term(self) -> np.ndarray:
        """sum_i psi(r_i) dD_i/dbeta_{-1}^T; block l only moves with beta_l."""
        d, dim, free = self.dataset.d, self.basis.dim, self.dataset.p - 1
        out = np.zeros((d * dim, d * free))
        for l, slopes in enumerate(self.basis_slopes):
            jac = model.loading_jacobian(self.reduced[l])
            moved = slopes * (self.scores * self.dataset.x[:, l])[:, None]
            out[l * dim:(l + 1) * dim, l * free:(l + 1) * free] = moved.T @ (self.dataset.z @ jac)
        return out

    @cached_property
    def sensitivity(self) -> np.ndarray:
        score_term = self.score_term if self.score_equation_holds else None
        return coeff_sensitivity_matrix(self.design, self.a_dir, self.weights, score_term)

    @cached_property
    def a(self) -> np.ndarray:
        """Total derivative rows a_i = a_dir_i + D_i^T (d lambda / d beta)."""
        return self.a_dir + self.design @ self.sensitivity

    @cached_property
    def equation(self) -> np.ndarray:
        """R(beta_{-1}) = sum_i psi(r_i) a_i."""
        return self.a.T @ self.scores

    @cached_property
    def information(self) -> np.ndarray:
        """sum_i w_i a_i a_i^T; the Fisher Jacobian is its negative."""
        return (self.a * self.weights[:, None]).T @ self.a


def profile_state(
    dataset: Dataset,
    reduced: np.ndarray,
    basis: SplineBasis,
    loss,
    margin: float = 0.01,
    rescalers: Optional[Sequence[IndexRescaler]] = None,
    coeffs: Optional[np.ndarray] = None,
) -> ProfileState:
    return ProfileState(dataset, reduced, basis, loss, margin=margin, rescalers=rescalers, coeffs=coeffs)


# ---------------------------------------------------------------------------
# Estimating equations
# ---------------------------------------------------------------------------

def resolve_basis(config: FitConfig, dataset: Dataset, loadings: Optional[np.ndarray] = None) -> SplineBasis:
    """Basis for a fit: configured or rule-of-thumb knot count, uniform or quantile placement."""
    knots = config.knots if config.knots is not None else default_knots(dataset.n, config.order)
    values = None
    if config.knot_placement == "quantile":
        if loadings is None:
            loadings = _equal_loadings(dataset.d, dataset.p)
        index = model.index_values(dataset.z, loadings)
        values = model.rescaled_index(index, model.fit_rescalers(index, config.rescale_margin)).ravel()
    return make_basis(config.order, knots, config.knot_placement, values)


def _quantile_loss(tau: float, h: float, config: FitConfig, smoothed_inner: bool = False) -> QuantileLoss:
    return QuantileLoss(tau, h, max_inner=config.max_inner, tol_inner=config.tol_inner, smoothed_inner=smoothed_inner)


def _state_for(dataset, reduced, tau, config, bandwidth, basis, rescalers, coeffs, smoothed_inner) -> ProfileState:
    config = config or FitConfig(tau=tau)
    reduced = np.atleast_2d(np.asarray(reduced, dtype=float)).reshape(dataset.d, dataset.p - 1)
    h = bandwidth if bandwidth is not None else config.resolved_bandwidth(dataset.n)
    if basis is None:
        basis = resolve_basis(config, dataset, model.expand(reduced))
    loss = _quantile_loss(tau, h, config, smoothed_inner)
    return profile_state(dataset, reduced, basis, loss, config.rescale_margin, rescalers, coeffs)


def coeff_sensitivity(
    dataset: Dataset,
    reduced: np.ndarray,
    tau: float,
    bandwidth: float,
    basis: Optional[SplineBasis] = None,
    rescalers: Optional[Sequence[IndexRescaler]] = None,
    coeffs: Optional[np.ndarray] = None,
    config: Optional[FitConfig] = None,
    smoothed_inner: bool = False,
) -> np.ndarray:
    """
    d lambda-hat / d beta_{-1}^T at the given state, a dJ x d(p-1) matrix.

    With a smoothed inner fit the derivative is exact, including the motion of the
    basis rows under the scores. The exact inner fit uses the weighted Gram part only.
    """
    state = _state_for(dataset, reduced, tau, config, bandwidth, basis, rescalers, coeffs, smoothed_inner)
    return state.sensitivity


def estimating_equation(
    dataset: Dataset,
    reduced: np.ndarray,
    tau: float,
    config: Optional[FitConfig] = None,
    bandwidth: Optional[float] = None,
    basis: Optional[SplineBasis] = None,
    rescalers: Optional[Sequence[IndexRescaler]] = None,
    coeffs: Optional[np.ndarray] = None,
    smoothed_inner: bool = False,
) -> np.ndarray:
    """
    Smoothed estimating function R(beta_{-1}) = sum_i psi_tau,h(r_i) a_i.

    R is the negative gradient of the smoothed profile loss in beta_{-1}.

    Returns:
        Vector of length d(p-1), ordered component by component
    """
    state = _state_for(dataset, reduced, tau, config, bandwidth, basis, rescalers, coeffs, smoothed_inner)
    return state.equation


def ee_jacobian(
    dataset: Dataset,
    reduced: np.ndarray,
    tau: float,
    config: Optional[FitConfig] = None,
    bandwidth: Optional[float] = None,
    basis: Optional[SplineBasis] = None,
    rescalers: Optional[Sequence[IndexRescaler]] = None,
    coeffs: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Fisher-scoring Jacobian -sum_i K(r_i/h)/h a_i a_i^T."""
    state = _state_for(dataset, reduced, tau, config, bandwidth, basis, rescalers, coeffs, smoothed_inner=False)
    return -state.information


# ---------------------------------------------------------------------------
# Outer loop
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TraceEntry:
    """One accepted outer step."""
    iteration: int
    objective: float
    step_norm: float

    def to_dict(self) -> dict:
        return {"iteration": self.iteration, "objective": self.objective, "step_norm": self.step_norm}


@dataclass(frozen=True)
class VicmFit:
    """Fitted loadings and spline coefficients with convergence details."""
    loadings: np.ndarray
    reduced: np.ndarray
    coeffs: np.ndarray
    basis: SplineBasis
    rescalers: tuple
    residuals: np.ndarray = field(repr=False)
    objective: float
    converged: bool
    stop_reason: str
    iterations: int
    trace: tuple
    tau: float
    bandwidth: float
    support: Optional[np.ndarray] = None  # d x p mask of nonzero loadings after selection
    alpha1: Optional[float] = None
    dataset: Optional[Dataset] = field(default=None, repr=False, compare=False)

    @property
    def d(self) -> int:
        return self.loadings.shape[0]

    @property
    def p(self) -> int:
        return self.loadings.shape[1]

    @property
    def n(self) -> int:
        return self.residuals.size

    def design(self, x: np.ndarray, z: np.ndarray) -> np.ndarray:
        return model.design_matrix(self.basis, self.rescalers, x, z, self.loadings)

    def predict(self, x: np.ndarray, z: np.ndarray) -> np.ndarray:
        """Conditional tau-quantile predictions for new rows."""
        return model.predict(self.loadings, self.coeffs, self.basis, self.rescalers, x, z)

    def curve(self, l: int, u_raw) -> np.ndarray:
        """Fitted m_l at raw index values (1-based component)."""
        _check_component(self, l)
        u = self.rescalers[l - 1].rescale(np.atleast_1d(np.asarray(u_raw, dtype=float)))
        return basis_matrix(self.basis, u) @ self.coeffs[l - 1]

    def index_range(self, l: int) -> tuple[float, float]:
        resc = self.rescalers[l - 1]
        return resc.lo, resc.hi


def _check_component(fit: VicmFit, l: int):
    if int(l) != l or not 1 <= l <= fit.d:
        raise ParameterError(f"component must be in 1..{fit.d}, got {l}")


def eval_curve(fit: VicmFit, l: int, u_raw: Sequence[float]) -> np.ndarray:
    """
    Evaluate m-hat_l on raw index values.

    Returns:
        k x 2 array of (u_raw, m-hat_l(u_raw)); values beyond the fitted range are clipped
    """
    u_raw = np.atleast_1d(np.asarray(u_raw, dtype=float))
    return np.column_stack([u_raw, fit.curve(l, u_raw)])


def _equal_loadings(d: int, p: int) -> np.ndarray:
    return np.full((d, p), 1.0 / np.sqrt(p))


def _normalize_mask(free_mask, d: int, p: int) -> np.ndarray:
    """Boolean d x (p-1) mask of free reduced coordinates."""
    if free_mask is None:
        return np.ones((d, p - 1), dtype=bool)
    mask = np.asarray(free_mask, dtype=bool)
    if mask.shape == (d, p):
        mask = mask[:, 1:]
    if mask.shape != (d, p - 1):
        raise ParameterError(f"free mask must be {d}x{p} or {d}x{p - 1}, got {mask.shape}")
    return mask.copy()


def scoring_step(state: ProfileState, mask: np.ndarray, penalty_matrix=None, penalty_vector=None) -> np.ndarray:
    """
    Fisher step solving (sum w a a^T + P) step = R - b over the free coordinates.

    P and b are the MM penalty terms (already multiplied by n); omitted for plain scoring.
    """
    free = mask.ravel()
    step = np.zeros(free.size)
    if not np.any(free):
        return step.reshape(mask.shape)
    info = state.information[np.ix_(free, free)]
    rhs = state.equation[free]
    if penalty_matrix is not None:
        info = info + penalty_matrix[np.ix_(free, free)]
        rhs = rhs - penalty_vector[free]
    if np.trace(info) <= 0 and np.any(rhs != 0):
        raise ConditioningError("Fisher information vanishes (no residual inside the kernel support); increase the bandwidth")
    step[free] = solve_psd(info, rhs, what="Fisher information")
    if not np.all(np.isfinite(step)):
        raise NumericError("Fisher step is not finite", snapshot=state.reduced)
    return step.reshape(mask.shape)


def _candidate(reduced: np.ndarray, step: np.ndarray, t: float, mask: np.ndarray) -> np.ndarray:
    cand = model.shrink_to_feasible(reduced + t * step)
    cand[~mask] = 0.0
    return cand


def profile_iterations(
    dataset: Dataset,
    reduced: np.ndarray,
    basis: SplineBasis,
    loss,
    config: FitConfig,
    mask: np.ndarray,
    max_iter: int,
) -> tuple[ProfileState, bool, str, list, int]:
    """
    Scoring iterations with step halving on the profile objective.

    Returns:
        (final state, converged, stop reason, trace entries, iterations used)
    """
    state = profile_state(dataset, reduced, basis, loss, config.rescale_margin)
    trace = [TraceEntry(0, state.objective, 0.0)]
    converged, reason = False, "max_outer"
    iteration = 0

    for iteration in range(1, max_iter + 1):
        step = scoring_step(state, mask)
        size = float(np.max(np.abs(step))) if step.size else 0.0
        if size < config.tol_outer:
            converged, reason = True, "tolerance"
            break

        accepted, t = None, 1.0
        slack = 1e-12 * max(1.0, abs(state.objective))
        for _ in range(config.step_halving_max + 1):
            trial = profile_state(dataset, _candidate(state.reduced, step, t, mask), basis, loss, config.rescale_margin)
            if trial.objective <= state.objective + slack:
                accepted = trial
                break
            t *= 0.5

        if accepted is None:
            if 2.0 * t * size < config.tol_outer:
                converged, reason = True, "step_below_tolerance"
            else:
                reason = "line_search_failed"
                log.warning(f"{loss.name} scoring: no decrease after {config.step_halving_max} halvings (step {size:.3g})")
            break

        moved = float(np.max(np.abs(accepted.reduced - state.reduced)))
        state = accepted
        trace.append(TraceEntry(iteration, state.objective, moved))
        log.debug(f"{loss.name} scoring iter {iteration}: objective={state.objective:.10g} step={moved:.3g} t={t:.3g}")
        if moved < config.tol_outer:
            converged, reason = True, "step_below_tolerance"
            break

    return state, converged, reason, trace, iteration


def initial_reduced(dataset: Dataset, tau: float, config: FitConfig, basis: SplineBasis, mask: np.ndarray, bandwidth: float) -> np.ndarray:
    """
    Starting loadings for the outer iteration.

    The equal-weight direction and several random directions are each refined
    by least-squares profile iterations; the start with the smallest check loss wins.
    """
    d, p = dataset.d, dataset.p
    rng = np.random.default_rng(config.seed)
    starts = [_equal_loadings(d, p)]
    for _ in range(config.init_random_starts):
        draw = rng.standard_normal((d, p))
        draw[:, 0] = np.abs(draw[:, 0]) + 1e-3
        starts.append(model.orient_rows(draw))

    squared = SquaredLoss()
    quantile = _quantile_loss(tau, bandwidth, config)
    best, best_obj = None, np.inf
    for k, start in enumerate(starts):
        reduced = model.shrink_to_feasible(start[:, 1:])
        reduced[~mask] = 0.0
        try:
            if config.init_ls_iterations > 0:
                state, *_ = profile_iterations(dataset, reduced, basis, squared, config, mask, config.init_ls_iterations)
                reduced = state.reduced
            obj = profile_state(dataset, reduced, basis, quantile, config.rescale_margin).objective
        except (ConditioningError, NumericError, SingularDesignError) as e:
            log.warning(f"start {k} discarded: {e}")
            continue
        log.debug(f"start {k}: check loss {obj:.6g}")
        if obj < best_obj:
            best, best_obj = reduced, obj
    if best is None:
        raise NumericError("every starting value failed")
    return best


def _build_fit(state: ProfileState, tau, h, converged, reason, trace, iterations, dataset) -> VicmFit:
    return VicmFit(
        loadings=state.loadings,
        reduced=state.reduced,
        coeffs=state.coeffs,
        basis=state.basis,
        rescalers=tuple(state.rescalers),
        residuals=state.residuals,
        objective=state.objective,
        converged=converged,
        stop_reason=reason,
        iterations=iterations,
        trace=tuple(trace),
        tau=tau,
        bandwidth=h,
        dataset=dataset,
    )


def parameter_count(d: int, p: int, dim: int, free: Optional[int] = None) -> int:
    return d * dim + (d * (p - 1) if free is None else free)


def fit(
    dataset: Dataset,
    tau: float,
    config: Optional[FitConfig] = None,
    init: Optional[np.ndarray] = None,
    bandwidth: Optional[float] = None,
    free_mask: Optional[np.ndarray] = None,
    basis: Optional[SplineBasis] = None,
) -> VicmFit:
    """
    Fit loadings and spline coefficients by profiled estimating equations.

    Args:
        dataset: Observations
        tau: Quantile level
        config: Iteration limits, tolerances and basis settings
        init: Optional d x p starting loadings
        bandwidth: Smoothing bandwidth; defaults to n^(-0.3)
        free_mask: Optional mask of free loadings (d x p or d x (p-1)); masked entries stay zero
        basis: Optional fixed spline basis

    Returns:
        VicmFit; non-convergence is reported through `converged` and `stop_reason`
    """
    tau = check_tau(tau)
    config = config or FitConfig(tau=tau)
    n, d, p = dataset.n, dataset.d, dataset.p
    h = check_bandwidth(bandwidth if bandwidth is not None else config.resolved_bandwidth(n))
    mask = _normalize_mask(free_mask, d, p)
    if basis is None:
        basis = resolve_basis(config, dataset, None if init is None else model.orient_rows(init))

    needed = parameter_count(d, p, basis.dim, int(mask.sum()))
    if n <= needed:
        raise InsufficientDataError(f"insufficient observations: n={n} must exceed {needed} parameters")

    log.info(f"Fitting n={n}, d={d}, p={p}, J={basis.dim}, tau={tau}, h={h:.4g}")
    quantile = _quantile_loss(tau, h, config)

    if p == 1:
        state = profile_state(dataset, np.zeros((d, 0)), basis, quantile, config.rescale_margin)
        log.success(f"Fit done (no free loadings), objective={state.objective:.6g}")
        return _build_fit(state, tau, h, True, "no_free_loadings", [TraceEntry(0, state.objective, 0.0)], 0, dataset)

    if init is None:
        reduced = initial_reduced(dataset, tau, config, basis, mask, h)
    else:
        reduced = model.shrink_to_feasible(model.orient_rows(init)[:, 1:])
        reduced[~mask] = 0.0

    state, converged, reason, trace, iterations = profile_iterations(
        dataset, reduced, basis, quantile, config, mask, config.max_outer
    )
    if converged:
        log.success(f"Fit converged ({reason}) after {iterations} iterations, objective={state.objective:.6g}")
    else:
        log.warning(f"Fit stopped without convergence ({reason}) after {iterations} iterations")
    return _build_fit(state, tau, h, converged, reason, trace, iterations, dataset)


def refit_state(fit_result: VicmFit, dataset: Optional[Dataset] = None, loss=None) -> ProfileState:
    """Profile state at a fit's loadings, coefficients and rescalers."""
    dataset = dataset or fit_result.dataset
    if dataset is None:
        raise ParameterError("fit carries no dataset; pass one explicitly")
    loss = loss or QuantileLoss(fit_result.tau, fit_result.bandwidth)
    return profile_state(
        dataset, fit_result.reduced, fit_result.basis, loss,
        rescalers=fit_result.rescalers, coeffs=fit_result.coeffs,
    )


def with_coeffs(fit_result: VicmFit, coeffs: np.ndarray, dataset: Optional[Dataset] = None) -> VicmFit:
    """Copy of a fit with new spline coefficients and consistent residuals."""
    dataset = dataset or fit_result.dataset
    design = fit_result.design(dataset.x, dataset.z)
    residuals = dataset.y - design @ np.asarray(coeffs).ravel()
    return replace(
        fit_result,
        coeffs=np.asarray(coeffs, dtype=float).reshape(fit_result.coeffs.shape),
        residuals=residuals,
        objective=total_check_loss(fit_result.tau, residuals),
    )
