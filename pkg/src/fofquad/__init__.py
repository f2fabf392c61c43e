"""Function-on-function quadratic regression with Gaussian-process errors."""

__version__ = "0.1.0"

from .basis import (  # noqa: E402
    BasisSystem,
    bspline_basis,
    difference_penalty,
    eval_basis,
    gaussian_rbf_basis,
    gram_matrix,
)
from .design import QuadraticModelSpec, build_covariate, build_penalty  # noqa: E402
from .estimator import FittedModel, RegressionData, fit, predict  # noqa: E402
from .gpcov import NuParams, cov_matrix, kernel  # noqa: E402
from .smoothing import FunctionalCurve, LongitudinalDataset, smooth_curve, smooth_dataset  # noqa: E402

__all__ = [
    "BasisSystem",
    "FittedModel",
    "FunctionalCurve",
    "LongitudinalDataset",
    "NuParams",
    "QuadraticModelSpec",
    "RegressionData",
    "build_covariate",
    "build_penalty",
    "bspline_basis",
    "cov_matrix",
    "difference_penalty",
    "eval_basis",
    "fit",
    "gaussian_rbf_basis",
    "gram_matrix",
    "kernel",
    "predict",
    "smooth_curve",
    "smooth_dataset",
]
