"""Model representation: data, loadings on the unit sphere, spline designs and prediction."""

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from splines.basis import IndexRescaler, SplineBasis, basis_matrix, fit_rescaler
from utils.errors import ConstraintViolationError, DataError, ParameterError

# Tolerance on the unit-norm constraint of full loadings
UNIT_NORM_TOL = 1e-10
# Radius used when a reduced row leaves the open unit ball
SHRINK_RADIUS = 1.0 - 1e-6


@dataclass(frozen=True)
class Dataset:
    """Response y, interaction covariates x (first column 1) and index covariates z."""
    y: np.ndarray
    x: np.ndarray
    z: np.ndarray
    x_names: tuple = ()
    z_names: tuple = ()
    # Standardization of z applied at load time, kept for back-transforming loadings
    z_center: Optional[np.ndarray] = field(default=None, repr=False)
    z_scale: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).ravel()
        x = np.atleast_2d(np.asarray(self.x, dtype=float))
        z = np.atleast_2d(np.asarray(self.z, dtype=float))
        if y.size == 0:
            raise DataError("dataset has no observations")
        if x.shape[0] != y.size or z.shape[0] != y.size:
            raise DataError(f"row counts differ: y={y.size}, x={x.shape[0]}, z={z.shape[0]}")
        if x.shape[1] == 0 or z.shape[1] == 0:
            raise DataError("x and z need at least one column each")
        for name, arr in (("y", y), ("x", x), ("z", z)):
            if not np.all(np.isfinite(arr)):
                raise DataError(f"non-finite entries in {name}")
        if not np.all(x[:, 0] == 1.0):
            raise DataError("first column of x must be identically 1", column=self.x_names[0] if self.x_names else None)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "z", z)
        if not self.x_names:
            object.__setattr__(self, "x_names", tuple(f"x{k + 1}" for k in range(x.shape[1])))
        if not self.z_names:
            object.__setattr__(self, "z_names", tuple(f"z{k + 1}" for k in range(z.shape[1])))

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def d(self) -> int:
        return self.x.shape[1]

    @property
    def p(self) -> int:
        return self.z.shape[1]

    def subset(self, rows) -> "Dataset":
        """Rows of the dataset, keeping names and standardization metadata."""
        rows = np.asarray(rows)
        return Dataset(
            y=self.y[rows], x=self.x[rows], z=self.z[rows],
            x_names=self.x_names, z_names=self.z_names,
            z_center=self.z_center, z_scale=self.z_scale,
        )

    def with_response(self, y: np.ndarray) -> "Dataset":
        return Dataset(
            y=y, x=self.x, z=self.z, x_names=self.x_names, z_names=self.z_names,
            z_center=self.z_center, z_scale=self.z_scale,
        )


def orient_rows(beta: np.ndarray) -> np.ndarray:
    """Normalize rows to unit length and flip rows whose first entry is negative."""
    beta = np.atleast_2d(np.asarray(beta, dtype=float)).copy()
    norms = np.linalg.norm(beta, axis=1)
    if np.any(norms == 0):
        raise ConstraintViolationError("loading row has zero norm")
    beta /= norms[:, None]
    beta[beta[:, 0] < 0] *= -1.0
    return beta


def shrink_to_feasible(reduced: np.ndarray, radius: float = SHRINK_RADIUS) -> np.ndarray:
    """Pull reduced rows with squared norm >= 1 back radially to the given norm."""
    reduced = np.atleast_2d(np.asarray(reduced, dtype=float)).copy()
    if reduced.shape[1] == 0:
        return reduced
    norms = np.linalg.norm(reduced, axis=1)
    outside = norms ** 2 >= 1.0
    if np.any(outside):
        reduced[outside] *= (radius / norms[outside])[:, None]
    return reduced


def expand(reduced: np.ndarray) -> np.ndarray:
    """
    Map reduced loadings beta_{l,-1} to full unit-norm loadings.

    Args:
        reduced: d x (p-1) matrix, every row with squared norm < 1

    Returns:
        d x p loadings with first column sqrt(1 - ||beta_{l,-1}||^2)
    """
    reduced = np.atleast_2d(np.asarray(reduced, dtype=float))
    sq = np.sum(reduced ** 2, axis=1)
    if np.any(sq >= 1.0) or not np.all(np.isfinite(reduced)):
        bad = int(np.argmax(sq >= 1.0)) if np.any(sq >= 1.0) else 0
        raise ConstraintViolationError(f"reduced loading row {bad + 1} has squared norm {sq[bad]:.6g} >= 1")
    return np.column_stack([np.sqrt(1.0 - sq), reduced])


def reduce(full: np.ndarray) -> np.ndarray:
    """Drop the first column of valid loadings."""
    full = np.atleast_2d(np.asarray(full, dtype=float))
    norms = np.linalg.norm(full, axis=1)
    if np.any(np.abs(norms - 1.0) > UNIT_NORM_TOL):
        raise ConstraintViolationError("loading rows must have unit norm")
    if np.any(full[:, 0] <= 0):
        raise ConstraintViolationError("loading rows must have a positive first entry")
    return full[:, 1:].copy()


def loading_jacobian(reduced_row: Sequence[float]) -> np.ndarray:
    """J_l = d beta_l / d beta_{l,-1}, a p x (p-1) matrix."""
    row = np.asarray(reduced_row, dtype=float).ravel()
    sq = float(row @ row)
    if sq >= 1.0:
        raise ConstraintViolationError(f"reduced loading row has squared norm {sq:.6g} >= 1")
    top = -row / np.sqrt(1.0 - sq)
    return np.vstack([top[None, :], np.eye(row.size)])


def stacked_jacobian(reduced: np.ndarray) -> np.ndarray:
    """Block-diagonal direct sum of the per-component Jacobians, dp x d(p-1)."""
    reduced = np.atleast_2d(reduced)
    d, pm1 = reduced.shape
    out = np.zeros((d * (pm1 + 1), d * pm1))
    for l in range(d):
        out[l * (pm1 + 1):(l + 1) * (pm1 + 1), l * pm1:(l + 1) * pm1] = loading_jacobian(reduced[l])
    return out


def index_values(z: np.ndarray, loadings: np.ndarray) -> np.ndarray:
    """Raw index Z_i^T beta_l for every observation and component, n x d."""
    return np.atleast_2d(z) @ np.atleast_2d(loadings).T


def fit_rescalers(index: np.ndarray, margin: float = 0.01) -> list[IndexRescaler]:
    """One rescaler per component from the columns of an index matrix."""
    return [fit_rescaler(index[:, l], margin=margin) for l in range(index.shape[1])]


def rescaled_index(index: np.ndarray, rescalers: Sequence[IndexRescaler]) -> np.ndarray:
    return np.column_stack([r.rescale(index[:, l]) for l, r in enumerate(rescalers)])


def component_bases(basis: SplineBasis, rescalers, z: np.ndarray, loadings: np.ndarray) -> list[np.ndarray]:
    """B(u_il) for each component l, a list of n x J matrices."""
    index = index_values(z, loadings)
    if len(rescalers) != index.shape[1]:
        raise ParameterError(f"need {index.shape[1]} rescalers, got {len(rescalers)}")
    return [basis_matrix(basis, r.rescale(index[:, l])) for l, r in enumerate(rescalers)]


def design_matrix(basis: SplineBasis, rescalers, x: np.ndarray, z: np.ndarray, loadings: np.ndarray) -> np.ndarray:
    """Stack design rows D_i(beta) = (B(u_i1) X_i1, ..., B(u_id) X_id), n x dJ."""
    x = np.atleast_2d(x)
    blocks = component_bases(basis, rescalers, z, loadings)
    return np.hstack([b * x[:, [l]] for l, b in enumerate(blocks)])


def design_vector(basis: SplineBasis, rescalers, x_i, z_i, loadings: np.ndarray) -> np.ndarray:
    """Design row for a single observation, length d * J."""
    return design_matrix(
        basis, rescalers,
        np.asarray(x_i, dtype=float)[None, :],
        np.asarray(z_i, dtype=float)[None, :],
        loadings,
    )[0]


def predict(loadings, coeffs, basis, rescalers, x, z) -> np.ndarray:
    """Conditional quantile predictions sum_l m_l(Z^T beta_l) X_l for many rows."""
    coeffs = np.atleast_2d(coeffs)
    return design_matrix(basis, rescalers, x, z, loadings) @ coeffs.ravel()


def predict_quantile(loadings, coeffs, basis, rescalers, x_i, z_i) -> float:
    """Prediction for a single observation."""
    return float(design_vector(basis, rescalers, x_i, z_i, loadings) @ np.atleast_2d(coeffs).ravel())


def destandardize_loadings(loadings: np.ndarray, z_scale: np.ndarray) -> np.ndarray:
    """
    Express loadings fitted on standardized Z in raw-Z units.

    The index (Z - mu)/s . beta is proportional to Z . (beta/s) up to a shift, so
    the raw direction is beta/s renormalized with a positive first entry.
    """
    raw = np.atleast_2d(loadings) / np.asarray(z_scale, dtype=float)[None, :]
    return orient_rows(raw)
