"""Exception hierarchy for the VICM toolkit.

Every error carries the process exit code the batch CLI reports for it.
"""

from typing import Any, Optional

import numpy as np


class VicmError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 3
    kind = "numeric"


class ParameterError(VicmError, ValueError):
    """An argument is outside its documented range."""

    exit_code = 1
    kind = "parameter"


class DomainError(VicmError, ValueError):
    """A function was evaluated outside its domain."""

    exit_code = 1
    kind = "domain"


class ConfigError(VicmError):
    """Run file or command-line configuration is invalid."""

    exit_code = 1
    kind = "config"


class DataError(VicmError):
    """Input data could not be read or fails validation."""

    exit_code = 2
    kind = "data"

    def __init__(self, message: str, row: Optional[int] = None, column: Optional[str] = None):
        super().__init__(message)
        self.row = row
        self.column = column


class ConstraintViolationError(VicmError):
    """Loadings left the identifiability set (unit norm, positive first entry)."""

    kind = "constraint"


class SingularDesignError(VicmError):
    """Spline design has no usable information for some component."""

    kind = "singular_design"

    def __init__(self, message: str, block: Optional[int] = None):
        super().__init__(message)
        self.block = block


class ConditioningError(VicmError):
    """A regularized system is still too ill-conditioned to solve."""

    kind = "conditioning"


class NumericError(VicmError):
    """Non-finite values appeared during an iteration."""

    kind = "numeric"

    def __init__(self, message: str, snapshot: Any = None):
        super().__init__(message)
        self.snapshot = None if snapshot is None else np.array(snapshot, copy=True)


class InsufficientDataError(VicmError):
    """Too few observations for the number of free parameters."""

    kind = "insufficient_observations"


class TuningError(VicmError):
    """Every candidate of a tuning grid failed."""

    kind = "tuning"
