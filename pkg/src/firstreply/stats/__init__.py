"""Risk ratios, rank tests, collinearity diagnostics and the engagement model."""

from .collinearity import vif
from .mixed import (
    COLUMNS,
    EngagementModel,
    IdentifiabilityError,
    ModelFitError,
    SeparationError,
    design_matrix,
    fit_mixed_logistic,
    fit_random_intercept_logit,
    laplace_loglik,
    threshold_events,
)
from .ranks import TestResult, UndefinedStatistic, spearman, wilcoxon_signed_rank
from .ratios import ErrResult, err, risk_ratio

__all__ = [
    "COLUMNS",
    "EngagementModel",
    "ErrResult",
    "IdentifiabilityError",
    "ModelFitError",
    "SeparationError",
    "TestResult",
    "UndefinedStatistic",
    "design_matrix",
    "err",
    "fit_mixed_logistic",
    "fit_random_intercept_logit",
    "laplace_loglik",
    "risk_ratio",
    "spearman",
    "threshold_events",
    "vif",
    "wilcoxon_signed_rank",
]
