"""Leave-one-out prediction intervals for high-dimensional linear regression."""

__version__ = "0.1.0"

from .dgp import CovarianceSpec, DesignSpec, Law, ModelInstance, sigma_sqrt  # noqa: E402
from .estimators import EstimatorSpec, FitResult, fit  # noqa: E402
from .intervals import (  # noqa: E402
    LooResiduals,
    PredictionInterval,
    build_interval,
    build_split_interval,
    empirical_quantile,
    loo_residuals,
    prediction_interval,
)

__all__ = [
    "CovarianceSpec", "DesignSpec", "Law", "ModelInstance", "sigma_sqrt",
    "EstimatorSpec", "FitResult", "fit",
    "LooResiduals", "PredictionInterval", "build_interval", "build_split_interval",
    "empirical_quantile", "loo_residuals", "prediction_interval",
]
