"""calibra: regression calibration for mismeasured continuous exposures.

Corrects exposure-effect estimates for measurement error under a main
study / external validation study design, advises on covariate placement
from declared causal roles, and reproduces the estimator's operating
characteristics through a deterministic Monte Carlo harness.
"""

__version__ = "0.1.0"

from .core import (
    AdjustmentStrategy,
    DagRole,
    Dataset,
    OutcomeModelSpec,
    classify_role,
    role_from_index,
    validate_dataset,
)
from .errors import (
    CalibraError,
    ConvergenceError,
    InsufficientDataError,
    ScenarioError,
    SchemaError,
    SeparationError,
    ShapeError,
    SingularMatrixError,
)
from .estimators import (
    ConditionReport,
    EstimateResult,
    MomentSet,
    asymptotic_variance,
    check_logistic_approx,
    estimate_crs,
    estimate_with_interaction,
    fit_logistic_irls,
    sandwich_variance,
)
from .mem import MemFit, fit_mem, impute_x

__all__ = [
    "AdjustmentStrategy",
    "CalibraError",
    "ConditionReport",
    "ConvergenceError",
    "DagRole",
    "Dataset",
    "EstimateResult",
    "InsufficientDataError",
    "MemFit",
    "MomentSet",
    "OutcomeModelSpec",
    "ScenarioError",
    "SchemaError",
    "SeparationError",
    "ShapeError",
    "SingularMatrixError",
    "asymptotic_variance",
    "check_logistic_approx",
    "classify_role",
    "estimate_crs",
    "estimate_with_interaction",
    "fit_logistic_irls",
    "fit_mem",
    "impute_x",
    "role_from_index",
    "sandwich_variance",
    "validate_dataset",
]
