"""B-spline bases on [0, 1]: evaluation, derivatives and the curvature Gram matrix."""

from dataclasses import dataclass, field
from typing import Literal, Optional, Sequence

import numpy as np

from utils.errors import DomainError, ParameterError
from utils.logger import log

# Closed-interval slack when checking u in [0, 1]
_DOMAIN_SLACK = 1e-12


@dataclass(frozen=True)
class SplineBasis:
    """Clamped B-spline basis of a given order on [0, 1]."""
    order: int
    interior_knot_count: int
    knots: np.ndarray = field(repr=False)

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=float).copy()
        knots.setflags(write=False)
        object.__setattr__(self, "knots", knots)

    @property
    def dim(self) -> int:
        """Number of basis functions J_n = q + N_n."""
        return self.order + self.interior_knot_count

    @property
    def degree(self) -> int:
        return self.order - 1

    @property
    def interior_knots(self) -> np.ndarray:
        return self.knots[self.order:self.order + self.interior_knot_count]

    def to_dict(self) -> dict:
        """Convert to dictionary."""
        return {
            "order": self.order,
            "interior_knot_count": self.interior_knot_count,
            "knots": [float(k) for k in self.knots],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SplineBasis":
        basis = cls(
            order=int(data["order"]),
            interior_knot_count=int(data["interior_knot_count"]),
            knots=np.asarray(data["knots"], dtype=float),
        )
        _check_knot_vector(basis.knots, basis.order)
        return basis


@dataclass(frozen=True)
class IndexRescaler:
    """Affine map of a raw index onto [0, 1], clipped at the ends."""
    lo: float
    hi: float

    def __post_init__(self):
        if not np.isfinite(self.lo) or not np.isfinite(self.hi) or self.hi <= self.lo:
            raise ParameterError(f"rescaler needs finite lo < hi, got ({self.lo}, {self.hi})")

    @property
    def scale(self) -> float:
        """Chain-rule factor du/dt = 1/(hi - lo)."""
        return 1.0 / (self.hi - self.lo)

    def rescale(self, t):
        """Map raw index values to [0, 1]."""
        return np.clip((np.asarray(t, dtype=float) - self.lo) * self.scale, 0.0, 1.0)

    def inside(self, t) -> np.ndarray:
        """True where the raw index is not clipped."""
        t = np.asarray(t, dtype=float)
        return (t >= self.lo) & (t <= self.hi)

    def raw(self, u):
        """Inverse map from [0, 1] to raw index units."""
        return self.lo + np.asarray(u, dtype=float) * (self.hi - self.lo)

    def to_dict(self) -> dict:
        return {"lo": float(self.lo), "hi": float(self.hi)}


def default_knots(n: int, order: int) -> int:
    """Interior knot count N_n = floor(n^(1/(2q+1)))."""
    if n < 1 or order < 2:
        raise ParameterError(f"knot rule needs n >= 1 and order >= 2, got n={n}, order={order}")
    return int(np.floor(float(n) ** (1.0 / (2 * order + 1)) + 1e-12))


def _check_knot_vector(knots: np.ndarray, order: int):
    if np.any(np.diff(knots) < 0):
        raise ParameterError("knot vector must be nondecreasing")
    if np.any(knots[:order] != 0.0) or np.any(knots[-order:] != 1.0):
        raise ParameterError(f"knot vector must repeat 0 and 1 exactly {order} times")


def make_basis(
    order: int,
    interior_knot_count: int,
    placement: Literal["uniform", "quantile"] = "uniform",
    values: Optional[Sequence[float]] = None,
) -> SplineBasis:
    """
    Build a clamped knot vector on [0, 1].

    Args:
        order: Spline order q (degree q - 1), at least 2
        interior_knot_count: Number of interior knots N_n
        placement: "uniform" puts knots at k/(N_n+1); "quantile" at the same
            probabilities of the supplied rescaled index values
        values: Rescaled index values for quantile placement

    Returns:
        SplineBasis with J_n = q + N_n functions
    """
    if int(order) != order or order < 2:
        raise ParameterError(f"spline order must be an integer >= 2, got {order}")
    if int(interior_knot_count) != interior_knot_count or interior_knot_count < 0:
        raise ParameterError(f"interior knot count must be a nonnegative integer, got {interior_knot_count}")
    order, interior_knot_count = int(order), int(interior_knot_count)

    probs = np.arange(1, interior_knot_count + 1) / (interior_knot_count + 1)
    interior = probs
    if placement == "quantile":
        if values is None or len(values) == 0:
            raise ParameterError("quantile knot placement needs nonempty index values")
        candidate = np.quantile(np.asarray(values, dtype=float), probs)
        if interior_knot_count and (
            np.any(np.diff(candidate) <= 0) or candidate[0] <= 0.0 or candidate[-1] >= 1.0
        ):
            log.warning("Sample-quantile knots are tied or on the boundary; using uniform knots")
        else:
            interior = candidate
    elif placement != "uniform":
        raise ParameterError(f"unknown knot placement: {placement}")

    knots = np.concatenate([np.zeros(order), interior, np.ones(order)])
    return SplineBasis(order=order, interior_knot_count=interior_knot_count, knots=knots)


def _basis_values(knots: np.ndarray, order: int, u: np.ndarray) -> np.ndarray:
    """
    Triangular Cox-de Boor evaluation of all order-q B-splines on a knot vector.

    Returns an (m, J) matrix with J = len(knots) - order. Right end point 1 is
    assigned to the last nonempty knot span.
    """
    dim = len(knots) - order
    degree = order - 1
    m = u.shape[0]
    values = np.zeros((m, dim))
    if dim <= 0:
        return values

    # Last index with knots[k] <= u, restricted to spans inside [degree, dim - 1]
    span = np.searchsorted(knots, u, side="right") - 1
    span = np.clip(span, degree, dim - 1)
    # Nonempty span below the right end
    while True:
        empty = knots[span] >= knots[span + 1]
        if not np.any(empty):
            break
        span = np.where(empty, span - 1, span)

    local = np.zeros((m, order))
    local[:, 0] = 1.0
    left = np.zeros((m, order))
    right = np.zeros((m, order))
    for j in range(1, order):
        left[:, j] = u - knots[span + 1 - j]
        right[:, j] = knots[span + j] - u
        saved = np.zeros(m)
        for r in range(j):
            denom = right[:, r + 1] + left[:, j - r]
            temp = np.divide(local[:, r], denom, out=np.zeros(m), where=denom != 0)
            local[:, r] = saved + right[:, r + 1] * temp
            saved = left[:, j - r] * temp
        local[:, j] = saved

    rows = np.arange(m)[:, None]
    cols = span[:, None] - degree + np.arange(order)[None, :]
    values[rows, cols] = local
    return values


def derivative_matrix(knots: np.ndarray, order: int) -> np.ndarray:
    """
    Difference matrix Xi with d/du B_q(u) = B_{q-1}(u) Xi.

    B_{q-1} lives on knots[1:-1]; row k carries (q-1)/(xi_{k+q} - xi_{k+1})
    with signs (-, +) on columns (k, k+1).
    """
    dim = len(knots) - order
    xi = np.zeros((dim - 1, dim))
    for k in range(dim - 1):
        width = knots[k + order] - knots[k + 1]
        if width > 0:
            c = (order - 1) / width
            xi[k, k] = -c
            xi[k, k + 1] = c
    return xi


def _as_points(basis: SplineBasis, u) -> np.ndarray:
    points = np.atleast_1d(np.asarray(u, dtype=float))
    if points.ndim != 1:
        raise DomainError("basis evaluation expects a scalar or a 1-D array")
    if np.any(~np.isfinite(points)) or np.any(points < -_DOMAIN_SLACK) or np.any(points > 1 + _DOMAIN_SLACK):
        raise DomainError("basis evaluation point outside [0, 1]; rescale the index first")
    return np.clip(points, 0.0, 1.0)


def basis_matrix(basis: SplineBasis, u) -> np.ndarray:
    """Evaluate B(u) for an array of points; returns (m, J_n)."""
    return _basis_values(basis.knots, basis.order, _as_points(basis, u))


def deriv_basis_matrix(basis: SplineBasis, u) -> np.ndarray:
    """Evaluate the derivative of every basis function; returns (m, J_n)."""
    points = _as_points(basis, u)
    lower = _basis_values(basis.knots[1:-1], basis.order - 1, points)
    return lower @ derivative_matrix(basis.knots, basis.order)


def second_deriv_basis_matrix(basis: SplineBasis, u) -> np.ndarray:
    """Second derivatives of every basis function (zero for order < 3)."""
    points = _as_points(basis, u)
    if basis.order < 3:
        return np.zeros((points.shape[0], basis.dim))
    lower = _basis_values(basis.knots[2:-2], basis.order - 2, points)
    xi_outer = derivative_matrix(basis.knots, basis.order)
    xi_inner = derivative_matrix(basis.knots[1:-1], basis.order - 1)
    return lower @ xi_inner @ xi_outer


def eval_basis(basis: SplineBasis, u: float) -> np.ndarray:
    """B(u) at a single point in [0, 1]."""
    return basis_matrix(basis, u)[0]


def eval_deriv_basis(basis: SplineBasis, u: float) -> np.ndarray:
    """Derivative of B at a single point; one-sided at 0 and 1."""
    return deriv_basis_matrix(basis, u)[0]


def curvature_gram(basis: SplineBasis) -> np.ndarray:
    """
    Gram matrix of second derivatives, D[k, k'] = int_0^1 B''_k B''_k'.

    Gauss-Legendre with q nodes per knot span integrates the degree 2(q-3)
    integrand exactly.
    """
    dim = basis.dim
    gram = np.zeros((dim, dim))
    if basis.order < 3:
        return gram

    nodes, weights = np.polynomial.legendre.leggauss(basis.order)
    breaks = np.unique(basis.knots)
    for a, b in zip(breaks[:-1], breaks[1:]):
        half = 0.5 * (b - a)
        points = a + half * (nodes + 1.0)
        second = second_deriv_basis_matrix(basis, points)
        gram += (second * (half * weights)[:, None]).T @ second
    return 0.5 * (gram + gram.T)


def greville_abscissae(basis: SplineBasis) -> np.ndarray:
    """Knot averages xi*_s = mean(knots[s+1 : s+q])."""
    q = basis.order
    return np.array([basis.knots[s + 1:s + q].mean() for s in range(basis.dim)])


def affine_coefficients(basis: SplineBasis, intercept: float, slope: float) -> np.ndarray:
    """Spline coefficients reproducing intercept + slope * u exactly."""
    return intercept + slope * greville_abscissae(basis)


def fit_rescaler(index_values: Sequence[float], margin: float = 0.01) -> IndexRescaler:
    """
    Fit the [0, 1] map from observed index values.

    Args:
        index_values: Raw index values Z^T beta_l
        margin: Fraction of the range added on both sides

    Returns:
        IndexRescaler with lo = min - margin*range, hi = max + margin*range
    """
    values = np.asarray(index_values, dtype=float)
    if values.size == 0:
        raise ParameterError("cannot fit a rescaler to no values")
    if margin < 0:
        raise ParameterError(f"margin must be nonnegative, got {margin}")
    lo, hi = float(values.min()), float(values.max())
    spread = hi - lo
    if not spread > 0:
        raise ParameterError(f"index values have a degenerate range (all equal to {lo})")
    return IndexRescaler(lo=lo - margin * spread, hi=hi + margin * spread)
