"""Measurement error model: calibrate true exposure on its surrogate.

Fits x ~ 1 + z + covariates by least squares on the validation arm and
imputes the conditional-mean exposure in the main arm.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import linalg
from .core import Dataset, EXPOSURE_COL, SURROGATE_COL
from .errors import SchemaError


@dataclass(frozen=True)
class MemFit:
    """Calibration model coefficients plus what variance assembly needs."""

    alpha: np.ndarray  # (intercept, slope on z, covariate slopes...)
    residual_var: float  # var of x - eta, denominator n - p
    included_covariates: tuple[str, ...]
    xtx_inv: np.ndarray  # validation-arm Gram inverse, original scale
    n: int

    def __post_init__(self):
        if self.residual_var < 0:
            raise ValueError("residual_var must be nonnegative")
        if self.alpha.shape[0] != 2 + len(self.included_covariates):
            raise ValueError("alpha length must be 2 + number of covariates")


def regressor_matrix(data: Dataset, covariates: tuple[str, ...]) -> np.ndarray:
    """Design matrix (1, z, covariates...) for either arm."""
    cols = [np.ones(data.n), data.col(SURROGATE_COL)]
    cols.extend(data.col(name) for name in covariates)
    return np.column_stack(cols)


def fit_mem(validation: Dataset, covariates=()) -> MemFit:
    """Fit the calibration model on the validation arm."""
    if validation.arm != "validation":
        raise SchemaError(f"fit_mem needs the validation arm, got {validation.arm!r}")
    covariates = tuple(covariates)
    x = validation.col(EXPOSURE_COL)
    design = regressor_matrix(validation, covariates)
    fit = linalg.ols_solve(design, x)
    return MemFit(
        alpha=fit.coef,
        residual_var=fit.residual_var,
        included_covariates=covariates,
        xtx_inv=fit.xtx_inv,
        n=validation.n,
    )


def impute_x(main: Dataset, fit: MemFit) -> np.ndarray:
    """Per-row conditional-mean exposure in the main arm."""
    design = regressor_matrix(main, fit.included_covariates)
    return design @ fit.alpha


def mem_residuals(validation: Dataset, fit: MemFit) -> np.ndarray:
    """In-sample calibration residuals x - eta on the validation arm."""
    design = regressor_matrix(validation, fit.included_covariates)
    return validation.col(EXPOSURE_COL) - design @ fit.alpha
