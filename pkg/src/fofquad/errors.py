"""Exception types raised across the package."""

import numpy as np


class FofquadError(Exception):
    """Base class for all package errors."""

    kind = "error"


class DomainError(FofquadError, ValueError):
    kind = "domain_error"


class DimensionError(FofquadError, ValueError):
    kind = "dimension_error"


class RankError(FofquadError, np.linalg.LinAlgError):
    kind = "rank_error"


class IllConditionedError(FofquadError, np.linalg.LinAlgError):
    """Covariance or system matrix that cannot be factorized.

    Attributes
    ----------
    min_eigenvalue : float or None
        Estimate of the smallest eigenvalue of the offending matrix.
    """

    kind = "ill_conditioned"

    def __init__(self, message, min_eigenvalue=None):
        super().__init__(message)
        self.min_eigenvalue = min_eigenvalue


class UndefinedCriterionError(FofquadError, ValueError):
    kind = "undefined_criterion"


class EmptyDatasetError(FofquadError, ValueError):
    kind = "empty_dataset"


class ConfigError(FofquadError, ValueError):
    kind = "config_error"


class InputError(FofquadError, ValueError):
    kind = "input_error"
