"""Configuration management for the VICM toolkit."""

import configparser
import os
from functools import lru_cache
from pathlib import Path
from typing import Literal, Optional

import numpy as np
import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from utils.errors import ConfigError

# Load environment variables
load_dotenv()

# Project root directory
PROJECT_ROOT = Path(__file__).parent.parent


def _split_list(value):
    """Accept comma-separated strings from run files as lists."""
    if isinstance(value, str):
        return [item.strip() for item in value.split(",") if item.strip()]
    return value


class FitConfig(BaseModel):
    """Unpenalized estimation settings ([model] and [fit] sections)."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    tau: float = Field(default=0.5, gt=0.0, lt=1.0)
    order: int = Field(default=4, ge=2)
    knots: Optional[int] = Field(default=None, ge=0)  # None -> floor(n^(1/(2q+1)))
    knot_placement: Literal["uniform", "quantile"] = "uniform"
    rescale_margin: float = Field(default=0.01, ge=0.0)
    bandwidth: Optional[float] = Field(default=None, gt=0.0)  # None -> n^(-0.3)
    max_outer: int = Field(default=50, gt=0)
    max_inner: int = Field(default=200, gt=0)
    tol_outer: float = Field(default=1e-6, gt=0.0)
    tol_inner: float = Field(default=1e-8, gt=0.0)
    step_halving_max: int = Field(default=20, gt=0)
    init_ls_iterations: int = Field(default=10, ge=0)
    init_random_starts: int = Field(default=5, ge=0)
    seed: int = 0

    def resolved_bandwidth(self, n: int) -> float:
        """Bandwidth used for n observations."""
        if self.bandwidth is not None:
            return self.bandwidth
        return float(n) ** -0.3


MODEL_KEYS = {"tau", "order", "knots", "knot_placement", "rescale_margin"}


class PenaltyConfig(BaseModel):
    """SCAD penalty and optimizer settings ([penalty] section)."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    alpha1: Optional[float] = Field(default=None, ge=0.0)  # None -> MSIC grid search
    alpha2: Optional[float] = Field(default=None, ge=0.0)
    a: float = Field(default=3.7, gt=2.0)
    kappa: float = Field(default=1e-6, gt=0.0)
    zero_threshold: float = Field(default=1e-4, gt=0.0)
    max_mm: int = Field(default=50, gt=0)
    linearity_threshold: Optional[float] = Field(default=None, gt=0.0)
    qn_max_iter: int = Field(default=500, gt=0)
    qn_grad_tol: float = Field(default=1e-6, gt=0.0)


class TuningConfig(BaseModel):
    """Grids for bandwidth cross-validation and MSIC ([tuning] section)."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    delta_grid: list[float] = Field(default_factory=lambda: [round(0.1 * k, 1) for k in range(1, 11)])
    folds: int = Field(default=5, ge=2)
    alpha1_grid: list[float] = Field(default_factory=lambda: list(np.logspace(-3, 0, 20)))
    alpha2_grid: list[float] = Field(default_factory=lambda: list(np.logspace(-2, 1, 20)))

    @field_validator("delta_grid", "alpha1_grid", "alpha2_grid", mode="before")
    @classmethod
    def _parse_grid(cls, value):
        return [float(v) for v in _split_list(value)]

    @field_validator("delta_grid", "alpha1_grid", "alpha2_grid")
    @classmethod
    def _non_empty(cls, value):
        if not value:
            raise ValueError("grid must not be empty")
        return value


class SimulateConfig(BaseModel):
    """Monte Carlo design ([simulate] section)."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    example: int = 1  # 1, 2 or 3
    error: Literal["sn", "t3", "la", "mn"] = "sn"
    n: int = Field(default=500, ge=10)
    pn: Optional[int] = Field(default=None, ge=3)  # Example 3 only; None -> floor(n^(1/3))
    tau: float = Field(default=0.5, gt=0.0, lt=1.0)
    sigma: Optional[float] = Field(default=None, ge=0.0)  # None -> published value
    replications: int = Field(default=100, gt=0)
    seed: int = 0
    pipeline: Optional[Literal["fit_only", "select", "select+identify"]] = None

    @field_validator("example")
    @classmethod
    def _known_example(cls, value: int) -> int:
        if value not in (1, 2, 3):
            raise ValueError(f"example must be 1, 2 or 3, got {value}")
        return value

    def resolved_pipeline(self) -> str:
        """Example 3 studies selection and identification; the others plain fits."""
        if self.pipeline is not None:
            return self.pipeline
        return "select+identify" if self.example == 3 else "fit_only"


class IOConfig(BaseModel):
    """Input/output locations and CSV schema ([io] section)."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    data: Optional[Path] = None
    out: Path = Path("results")
    model: Optional[Path] = None  # fit.json consumed by `predict`
    response: str = "y"
    x_cols: list[str] = Field(default_factory=list)
    z_cols: list[str] = Field(default_factory=list)
    add_intercept: bool = True
    standardize_z: bool = False

    @field_validator("x_cols", "z_cols", mode="before")
    @classmethod
    def _parse_columns(cls, value):
        return _split_list(value)


class SystemSettings(BaseModel):
    """Process-level settings taken from the environment."""
    threads: int = Field(default_factory=lambda: int(os.getenv("VICM_THREADS", "1")), ge=1)
    log_level: str = Field(default_factory=lambda: os.getenv("VICM_LOG_LEVEL", "INFO").upper())
    log_dir: Optional[Path] = Field(default_factory=lambda: Path(os.environ["VICM_LOG_DIR"]) if os.getenv("VICM_LOG_DIR") else None)


class RunConfig(BaseModel):
    """Everything a CLI invocation needs."""
    model_config = ConfigDict(extra="forbid")

    fit: FitConfig = Field(default_factory=FitConfig)
    penalty: PenaltyConfig = Field(default_factory=PenaltyConfig)
    tuning: TuningConfig = Field(default_factory=TuningConfig)
    simulate: SimulateConfig = Field(default_factory=SimulateConfig)
    io: IOConfig = Field(default_factory=IOConfig)

    def with_overrides(self, section: str, **values) -> "RunConfig":
        """Return a copy with validated overrides applied to one section."""
        values = {k: v for k, v in values.items() if v is not None}
        if not values:
            return self
        current = getattr(self, section)
        try:
            updated = type(current)(**{**current.model_dump(), **values})
        except ValidationError as e:
            raise ConfigError(f"invalid [{section}] override: {_first_error(e)}") from e
        return self.model_copy(update={section: updated})

    def validate_paths(self, need_data: bool = False, need_model: bool = False):
        """Check input paths before any work starts."""
        if need_data:
            if self.io.data is None:
                raise ConfigError("a data file is required (--data or [io] data)")
            if not self.io.data.is_file():
                raise ConfigError(f"data file not found: {self.io.data}")
        if need_model:
            if self.io.model is None:
                raise ConfigError("a fitted model is required (--model or [io] model)")
            if not self.io.model.is_file():
                raise ConfigError(f"model file not found: {self.io.model}")
        if self.io.out.exists() and not self.io.out.is_dir():
            raise ConfigError(f"output path is not a directory: {self.io.out}")


SECTIONS = ("model", "fit", "penalty", "tuning", "simulate", "io")


def _first_error(error: ValidationError) -> str:
    first = error.errors()[0]
    location = ".".join(str(part) for part in first["loc"])
    return f"{location}: {first['msg']}"


def load_run_config(path: Optional[Path] = None) -> RunConfig:
    """
    Parse a run file of `key = value` lines grouped in [section] headers.

    Args:
        path: Run file; None gives the defaults

    Returns:
        Validated RunConfig
    """
    if path is None:
        return RunConfig()

    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")

    parser = configparser.ConfigParser(
        comment_prefixes=("#",),
        inline_comment_prefixes=("#",),
        interpolation=None,
    )
    parser.optionxform = str  # keys are case-sensitive
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as e:
        raise ConfigError(f"cannot parse {path}: {e}") from e

    unknown = [s for s in parser.sections() if s not in SECTIONS]
    if unknown:
        raise ConfigError(f"unknown section [{unknown[0]}] in {path}")

    raw = {s: dict(parser.items(s)) if parser.has_section(s) else {} for s in SECTIONS}

    stray = [k for k in raw["fit"] if k in MODEL_KEYS]
    if stray:
        raise ConfigError(f"key '{stray[0]}' belongs in [model], not [fit]")
    misplaced = [k for k in raw["model"] if k not in MODEL_KEYS]
    if misplaced:
        raise ConfigError(f"unknown key '{misplaced[0]}' in [model]")

    try:
        return RunConfig(
            fit=FitConfig(**raw["model"], **raw["fit"]),
            penalty=PenaltyConfig(**raw["penalty"]),
            tuning=TuningConfig(**raw["tuning"]),
            simulate=SimulateConfig(**raw["simulate"]),
            io=IOConfig(**raw["io"]),
        )
    except ValidationError as e:
        raise ConfigError(f"invalid configuration in {path}: {_first_error(e)}") from e


class ErrorLawParameters(BaseModel):
    """Published constants of the error distributions."""
    t_df: float = 3.0
    laplace_scale: float = 1.0
    mixture_rho: float = 0.1
    mixture_sigma1: float = 1.0
    mixture_sigma2: float = 5.0

    @model_validator(mode="after")
    def _check_mixture(self):
        if not 0.0 <= self.mixture_rho <= 1.0:
            raise ValueError("mixture weight must lie in [0, 1]")
        return self


class ExampleDesign(BaseModel):
    """Published constants of one simulation example."""
    d: int
    p: Optional[int] = None  # None -> floor(n^(1/3)) (high-dimensional example)
    sigma: float = 0.0
    correlation: float = 0.0
    loadings: Optional[list[list[float]]] = None  # unnormalized directions on the leading coordinates
    linear: list[bool] = Field(default_factory=list)


class DesignCatalog(BaseModel):
    """Contents of config/designs.yaml."""
    error_laws: ErrorLawParameters
    examples: dict[str, ExampleDesign]


class Settings:
    """Global settings manager."""

    def __init__(self):
        self.system = SystemSettings()
        self.designs = load_design_catalog()

    def get_logs_dir(self) -> Optional[Path]:
        """Get log directory path, creating it when configured."""
        if self.system.log_dir is None:
            return None
        self.system.log_dir.mkdir(parents=True, exist_ok=True)
        return self.system.log_dir


@lru_cache(maxsize=1)
def load_design_catalog() -> DesignCatalog:
    """Load published simulation constants from YAML."""
    designs_file = PROJECT_ROOT / "config" / "designs.yaml"

    if not designs_file.exists():
        raise FileNotFoundError(f"Design file not found: {designs_file}")

    with open(designs_file, "r") as f:
        data = yaml.safe_load(f)

    return DesignCatalog(**data)


# Global settings instance
settings = Settings()


if __name__ == "__main__":
    config = load_run_config()
    print(config.model_dump_json(indent=2))
    print(settings.designs.model_dump_json(indent=2))
