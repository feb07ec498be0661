"""Regularized linear solves shared by the estimators."""

from typing import Optional

import numpy as np
from scipy import linalg

from utils.errors import ConditioningError


def ridge_shift(matrix: np.ndarray, ridge: float) -> float:
    """Ridge scaled by trace/dim so the shift follows the matrix's magnitude."""
    dim = matrix.shape[0]
    if dim == 0:
        return 0.0
    scale = abs(np.trace(matrix)) / dim
    return ridge * (scale if scale > 0 else 1.0)


def solve_psd(
    matrix: np.ndarray,
    rhs: np.ndarray,
    ridge: float = 1e-8,
    what: str = "system",
    shift: Optional[float] = None,
) -> np.ndarray:
    """
    Solve (A + r I) x = b for symmetric positive semidefinite A.

    Args:
        matrix: Symmetric PSD matrix A
        rhs: Right-hand side vector or matrix
        ridge: Relative ridge r / (trace(A)/dim)
        what: Name used in the error message
        shift: Absolute value of r, overriding the relative ridge

    Returns:
        Solution with the shape of rhs
    """
    dim = matrix.shape[0]
    if dim == 0:
        return np.zeros_like(rhs, dtype=float)
    if shift is None:
        shift = ridge_shift(matrix, ridge)
    shifted = matrix + shift * np.eye(dim)
    if not np.all(np.isfinite(shifted)) or not np.all(np.isfinite(rhs)):
        raise ConditioningError(f"non-finite entries in {what}")
    try:
        factor = linalg.cho_factor(shifted, lower=True, check_finite=False)
        return linalg.cho_solve(factor, rhs, check_finite=False)
    except linalg.LinAlgError:
        pass
    try:
        solution = linalg.solve(shifted, rhs, assume_a="sym", check_finite=False)
    except linalg.LinAlgError as e:
        raise ConditioningError(f"{what} is singular after ridge regularization") from e
    if not np.all(np.isfinite(solution)):
        raise ConditioningError(f"{what} is singular after ridge regularization")
    return solution


def inverse_psd(matrix: np.ndarray, ridge: float = 1e-8, what: str = "system") -> np.ndarray:
    """Ridge-regularized inverse of a symmetric PSD matrix, symmetrized."""
    inverse = solve_psd(matrix, np.eye(matrix.shape[0]), ridge=ridge, what=what)
    return 0.5 * (inverse + inverse.T)


def sandwich(bread: np.ndarray, meat: np.ndarray, ridge: float = 1e-8, what: str = "sandwich") -> np.ndarray:
    """A^-1 B A^-1 with a ridge-regularized A, symmetrized."""
    inverse = inverse_psd(bread, ridge=ridge, what=what)
    cov = inverse @ meat @ inverse
    return 0.5 * (cov + cov.T)
