"""Error laws and data generators of the three simulation examples."""

from dataclasses import dataclass, field
from typing import Callable, Literal, Optional

import numpy as np
from scipy import optimize, stats

from config.settings import ErrorLawParameters, settings
from core.model import Dataset
from core.quantile import check_tau
from utils.errors import ParameterError

ErrorKind = Literal["sn", "t3", "la", "mn"]
ERROR_KINDS = ("sn", "t3", "la", "mn")


@dataclass(frozen=True)
class ErrorLaw:
    """One of the four error distributions with its published constants."""
    kind: ErrorKind
    params: ErrorLawParameters = field(default_factory=lambda: settings.designs.error_laws)

    def __post_init__(self):
        if self.kind not in ERROR_KINDS:
            raise ParameterError(f"unknown error law '{self.kind}', expected one of {ERROR_KINDS}")

    @property
    def mixture_weights(self) -> tuple[float, float]:
        return 1.0 - self.params.mixture_rho, self.params.mixture_rho

    def sample(self, rng: np.random.Generator, size=None):
        p = self.params
        if self.kind == "sn":
            return rng.standard_normal(size)
        if self.kind == "t3":
            return rng.standard_t(p.t_df, size)
        if self.kind == "la":
            return rng.laplace(0.0, p.laplace_scale, size)
        wide = rng.random(size) < p.mixture_rho
        scale = np.where(wide, p.mixture_sigma2, p.mixture_sigma1)
        return scale * rng.standard_normal(size)

    def cdf(self, x):
        p = self.params
        if self.kind == "sn":
            return stats.norm.cdf(x)
        if self.kind == "t3":
            return stats.t.cdf(x, p.t_df)
        if self.kind == "la":
            return stats.laplace.cdf(x, scale=p.laplace_scale)
        w1, w2 = self.mixture_weights
        return w1 * stats.norm.cdf(x, scale=p.mixture_sigma1) + w2 * stats.norm.cdf(x, scale=p.mixture_sigma2)


def error_law(kind: str) -> ErrorLaw:
    return ErrorLaw(kind=kind.lower())


def sample_error(law: ErrorLaw, rng: np.random.Generator, size=None):
    """Draw from the law; a scalar when size is None."""
    draw = law.sample(rng, size)
    return float(draw) if size is None else draw


def quantile_shift(law: ErrorLaw, tau: float) -> float:
    """
    c_tau, the tau-quantile of the law, so that eps - c_tau has tau-quantile zero.

    Normal and Laplace use closed forms; t and the mixture solve the CDF equation.
    """
    tau = check_tau(tau)
    if tau == 0.5:
        return 0.0
    if law.kind == "sn":
        return float(stats.norm.ppf(tau))
    if law.kind == "la":
        b = law.params.laplace_scale
        return float(b * np.log(2.0 * tau) if tau < 0.5 else -b * np.log(2.0 * (1.0 - tau)))
    bound = 1.0
    while law.cdf(bound) < tau or law.cdf(-bound) > tau:
        bound *= 2.0
    return float(optimize.brentq(lambda x: law.cdf(x) - tau, -bound, bound, xtol=1e-12, rtol=1e-14))


def equicorrelated_normal(rng: np.random.Generator, n: int, dim: int, rho: float) -> np.ndarray:
    """
    n draws of N(0, (1 - rho) I + rho 11^T).

    Uses the closed-form symmetric root sqrt(1 - rho) I + c 11^T.
    """
    if dim > 1 and not -1.0 / (dim - 1) < rho < 1.0:
        raise ParameterError(f"correlation {rho} does not give a valid {dim}x{dim} covariance")
    base = np.sqrt(1.0 - rho)
    c = (np.sqrt(1.0 - rho + dim * rho) - base) / dim
    draws = rng.standard_normal((n, dim))
    return base * draws + c * draws.sum(axis=1, keepdims=True)


@dataclass(frozen=True)
class Truth:
    """True loadings and curves of one design at one quantile level."""
    example: int
    tau: float
    loadings: np.ndarray
    curves: tuple  # m_l as vectorized callables
    linear: tuple
    support: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        if self.support is None:
            object.__setattr__(self, "support", np.asarray(self.loadings) != 0)

    @property
    def d(self) -> int:
        return self.loadings.shape[0]

    def curve(self, l: int, u) -> np.ndarray:
        """m_l at index values (1-based component)."""
        return np.asarray(self.curves[l - 1](np.asarray(u, dtype=float)), dtype=float)

    def at(self, tau: float) -> "Truth":
        return self


@dataclass(frozen=True)
class QuantileVaryingTruth:
    """Loadings and curves that depend on the quantile level."""
    loadings_at: Callable[[float], np.ndarray]
    curves_at: Callable[[float], tuple]
    linear: tuple = (True, False, False)

    def at(self, tau: float) -> Truth:
        tau = check_tau(tau)
        return Truth(example=2, tau=tau, loadings=self.loadings_at(tau), curves=self.curves_at(tau), linear=self.linear)


def _unit_rows(rows, p: int) -> np.ndarray:
    """Normalize published directions and pad them with zeros to length p."""
    rows = np.asarray(rows, dtype=float)
    rows = rows / np.linalg.norm(rows, axis=1, keepdims=True)
    return np.hstack([rows, np.zeros((rows.shape[0], p - rows.shape[1]))])


def _response(x: np.ndarray, z: np.ndarray, truth: Truth) -> np.ndarray:
    index = z @ truth.loadings.T
    return sum(truth.curve(l + 1, index[:, l]) * x[:, l] for l in range(truth.d))


def _shifted_errors(law: ErrorLaw, rng: np.random.Generator, n: int, tau: float) -> np.ndarray:
    return law.sample(rng, n) - quantile_shift(law, tau)


def _intercept(cols: np.ndarray) -> np.ndarray:
    return np.column_stack([np.ones(cols.shape[0]), cols])


def gen_example1(
    n: int,
    law: ErrorLaw,
    rng: np.random.Generator,
    tau: float = 0.5,
    sigma: Optional[float] = None,
) -> tuple[Dataset, Truth]:
    """
    Y = exp(u1)/5 + sin(pi u2/2) X2 + u3^2 X3 + sigma (eps - c_tau).

    (X2, X3) and Z are equicorrelated standard normal blocks.
    """
    if n < 1:
        raise ParameterError(f"n must be >= 1, got {n}")
    design = settings.designs.examples["ex1"]
    sigma = design.sigma if sigma is None else sigma
    truth = Truth(
        example=1,
        tau=tau,
        loadings=_unit_rows(design.loadings, design.p),
        curves=(lambda u: np.exp(u) / 5.0, lambda u: np.sin(0.5 * np.pi * u), lambda u: u ** 2),
        linear=tuple(design.linear),
    )
    x = _intercept(equicorrelated_normal(rng, n, design.d - 1, design.correlation))
    z = equicorrelated_normal(rng, n, design.p, design.correlation)
    y = _response(x, z, truth) + sigma * _shifted_errors(law, rng, n, tau)
    return Dataset(y=y, x=x, z=z), truth


def example2_loadings(tau: float) -> np.ndarray:
    """Rows (tau^1/2, tau, 2tau), (tau, tau^1/2, 2tau), (2tau, tau, tau^1/2) over sqrt(5 tau^2 + tau)."""
    r = np.sqrt(tau)
    rows = np.array([[r, tau, 2 * tau], [tau, r, 2 * tau], [2 * tau, tau, r]])
    return rows / np.sqrt(5 * tau ** 2 + tau)


def example2_curves(tau: float) -> tuple:
    scale3 = -0.5 * np.log1p(-tau)
    return (
        lambda u: np.sqrt(tau) * u,
        lambda u: tau * np.sin(0.5 * np.pi * u),
        lambda u: scale3 * u ** 2,
    )


def gen_example2(n: int, rng: np.random.Generator) -> tuple[Dataset, QuantileVaryingTruth]:
    """
    Y_i = sum_l m_{U_i,l}(Z_i^T beta_{U_i,l}) X_il with U_i ~ U(0, 1).

    Z ~ U[0,1]^3 and (X2, X3) independent standard normal.
    """
    if n < 1:
        raise ParameterError(f"n must be >= 1, got {n}")
    x = _intercept(rng.standard_normal((n, 2)))
    z = rng.random((n, 3))
    level = rng.random(n)

    r = np.sqrt(level)
    norm = np.sqrt(5 * level ** 2 + level)
    loadings = np.stack(
        [
            np.column_stack([r, level, 2 * level]),
            np.column_stack([level, r, 2 * level]),
            np.column_stack([2 * level, level, r]),
        ],
        axis=1,
    ) / norm[:, None, None]
    index = np.einsum("ik,ilk->il", z, loadings)
    m = np.column_stack([
        r * index[:, 0],
        level * np.sin(0.5 * np.pi * index[:, 1]),
        -0.5 * np.log1p(-level) * index[:, 2] ** 2,
    ])
    y = np.sum(m * x, axis=1)
    truth = QuantileVaryingTruth(loadings_at=example2_loadings, curves_at=example2_curves)
    return Dataset(y=y, x=x, z=z), truth


def example3_pn(n: int) -> int:
    """p_n = floor(n^(1/3))."""
    return int(np.floor(float(n) ** (1.0 / 3.0) + 1e-9))


def gen_example3(
    n: int,
    pn: Optional[int],
    law: ErrorLaw,
    rng: np.random.Generator,
    tau: float = 0.5,
    sigma: Optional[float] = None,
) -> tuple[Dataset, Truth]:
    """
    Sparse loadings padded with p_n - 3 zeros; m3 and m4 are linear.

    Y = 0.2 u1^3 + cos(pi u2/2) X2 + 0.5 u3 X3 - 0.5 u4 X4 + sigma (eps - c_tau).
    """
    if n < 1:
        raise ParameterError(f"n must be >= 1, got {n}")
    pn = example3_pn(n) if pn is None else pn
    if pn < 3:
        raise ParameterError(f"p_n must be >= 3, got {pn}")
    design = settings.designs.examples["ex3"]
    sigma = design.sigma if sigma is None else sigma
    truth = Truth(
        example=3,
        tau=tau,
        loadings=_unit_rows(design.loadings, pn),
        curves=(
            lambda u: 0.2 * u ** 3,
            lambda u: np.cos(0.5 * np.pi * u),
            lambda u: 0.5 * u,
            lambda u: -0.5 * u,
        ),
        linear=tuple(design.linear),
    )
    x = _intercept(equicorrelated_normal(rng, n, design.d - 1, design.correlation))
    z = equicorrelated_normal(rng, n, pn, design.correlation)
    y = _response(x, z, truth) + sigma * _shifted_errors(law, rng, n, tau)
    return Dataset(y=y, x=x, z=z), truth


def generate(example: int, n: int, law: ErrorLaw, rng: np.random.Generator, tau: float = 0.5,
             sigma: Optional[float] = None, pn: Optional[int] = None):
    """Dispatch to the example generator; the truth is returned at level tau."""
    if example == 1:
        return gen_example1(n, law, rng, tau, sigma)
    if example == 2:
        dataset, truth = gen_example2(n, rng)
        return dataset, truth.at(tau)
    if example == 3:
        return gen_example3(n, pn, law, rng, tau, sigma)
    raise ParameterError(f"example must be 1, 2 or 3, got {example}")
