"""L1-penalized calibration models with cross-validated tuning.

Minimizes (1/(2n)) ||y - b0 - X beta||^2 + lambda * ||beta_std||_1 by cyclic
coordinate descent with soft thresholding on standardized predictors, warm
started along a descending lambda grid.  Reported coefficients are always on
the original covariate scale.  The data-driven calibration estimator wires a
cross-validated path into the two-stage pipeline and bootstraps both study
arms for its variance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .core import AdjustmentStrategy, Dataset, EXPOSURE_COL, OUTCOME_COL, SURROGATE_COL
from .errors import ConvergenceError, SchemaError, SingularMatrixError
from .estimators import EstimateResult, Z975, fit_logistic_irls
from .mem import MemFit

MAX_SWEEPS = 100_000
COORD_TOL = 1e-9
KKT_TOL = 1e-6


def default_lambda_grid() -> np.ndarray:
    """log10 lambda from 3 down to -3 in steps of 0.25 (descending)."""
    return 10.0 ** np.arange(3.0, -3.25, -0.25)


@dataclass(frozen=True)
class LassoPath:
    """Penalized fits along a descending lambda grid, original scale."""

    lambda_grid: np.ndarray
    coefs: np.ndarray  # grid x predictors, original scale
    intercepts: np.ndarray
    std_coefs: np.ndarray  # grid x predictors, standardized scale
    means: np.ndarray
    sds: np.ndarray
    objective_trace: dict[int, list[float]] = field(default_factory=dict)

    def predict(self, design: np.ndarray, grid_index: int) -> np.ndarray:
        return self.intercepts[grid_index] + design @ self.coefs[grid_index]

    def active(self, grid_index: int, tol: float = 0.0) -> np.ndarray:
        return np.where(np.abs(self.coefs[grid_index]) > tol)[0]


def _soft_threshold(value: float, penalty: float) -> float:
    if value > penalty:
        return value - penalty
    if value < -penalty:
        return value + penalty
    return 0.0


def _objective(resid: np.ndarray, beta: np.ndarray, lam: float, n: int) -> float:
    return float(resid @ resid) / (2.0 * n) + lam * float(np.sum(np.abs(beta)))


def fit_lasso_path(
    design: np.ndarray,
    response: np.ndarray,
    lambda_grid: np.ndarray | None = None,
    *,
    track_objective: bool = False,
) -> LassoPath:
    """Cyclic coordinate descent over a descending penalty grid.

    design carries the raw predictors without an intercept column; the
    intercept is handled through centering.  At every grid point the
    returned coefficients satisfy the subgradient optimality conditions to
    1e-6: |(1/n) x_j' r| <= lambda for zero coefficients and
    = lambda * sign(beta_j) for active ones.
    """
    design = linalg.as_matrix(design, "design")
    response = linalg.as_vector(response, "response")
    n, p = design.shape
    if response.shape[0] != n:
        raise linalg.ShapeError("design and response row counts differ")
    grid = default_lambda_grid() if lambda_grid is None else np.asarray(lambda_grid, dtype=np.float64)
    if grid.ndim != 1 or grid.size == 0:
        raise ValueError("lambda grid must be a nonempty 1-d array")
    if np.any(grid < 0.0):
        raise ValueError("lambda values must be nonnegative")
    if np.any(np.diff(grid) > 0.0):
        raise ValueError("lambda grid must be sorted descending")

    means = design.mean(axis=0)
    sds = design.std(axis=0)
    if np.any(sds == 0.0):
        dead = int(np.where(sds == 0.0)[0][0])
        raise SingularMatrixError(f"column {dead} is constant; cannot standardize", pivot=dead)
    x_std = (design - means) / sds
    y_center = response - response.mean()

    std_coefs = np.zeros((grid.size, p))
    beta = np.zeros(p)
    resid = y_center.copy()
    trace: dict[int, list[float]] = {}
    for gi, lam in enumerate(grid):
        objs: list[float] = []
        for sweep in range(MAX_SWEEPS):
            max_delta = 0.0
            for j in range(p):
                old = beta[j]
                rho = (x_std[:, j] @ resid) / n + old
                new = _soft_threshold(rho, lam)
                if new != old:
                    resid -= (new - old) * x_std[:, j]
                    beta[j] = new
                    max_delta = max(max_delta, abs(new - old))
            if track_objective:
                objs.append(_objective(resid, beta, lam, n))
            if max_delta < COORD_TOL:
                break
        else:
            raise ConvergenceError(
                f"coordinate descent exceeded {MAX_SWEEPS} sweeps at lambda={lam:g}"
            )
        std_coefs[gi] = beta
        if track_objective:
            trace[gi] = objs

    coefs = std_coefs / sds[None, :]
    intercepts = response.mean() - coefs @ means
    return LassoPath(
        lambda_grid=grid,
        coefs=coefs,
        intercepts=intercepts,
        std_coefs=std_coefs,
        means=means,
        sds=sds,
        objective_trace=trace,
    )


def kkt_gaps(path: LassoPath, design: np.ndarray, response: np.ndarray) -> np.ndarray:
    """Worst subgradient-condition violation at every grid point."""
    design = linalg.as_matrix(design, "design")
    response = linalg.as_vector(response, "response")
    n = design.shape[0]
    x_std = (design - path.means) / path.sds
    y_center = response - response.mean()
    gaps = np.zeros(path.lambda_grid.size)
    for gi, lam in enumerate(path.lambda_grid):
        beta = path.std_coefs[gi]
        grad = x_std.T @ (y_center - x_std @ beta) / n
        active = beta != 0.0
        gap_active = np.abs(grad[active] - lam * np.sign(beta[active])) if active.any() else np.array([0.0])
        gap_zero = np.maximum(np.abs(grad[~active]) - lam, 0.0) if (~active).any() else np.array([0.0])
        gaps[gi] = max(gap_active.max(initial=0.0), gap_zero.max(initial=0.0))
    return gaps


@dataclass(frozen=True)
class CvLassoResult:
    best_lambda: float
    best_index: int
    lambda_grid: np.ndarray
    cv_curve: np.ndarray  # mean held-out squared error per grid point


def cross_validate_lasso(
    design: np.ndarray,
    response: np.ndarray,
    lambda_grid: np.ndarray | None = None,
    k: int = 10,
    seed: int = 0,
) -> CvLassoResult:
    """k-fold cross validation over the penalty grid.

    Folds come from a seeded shuffle followed by a contiguous split; each
    fold refits the whole path on its training part (including the
    standardization).  Ties in held-out error break toward the larger
    penalty, i.e. the sparser model.
    """
    design = linalg.as_matrix(design, "design")
    response = linalg.as_vector(response, "response")
    n = design.shape[0]
    if k < 2:
        raise ValueError("k must be at least 2")
    if n < k:
        raise ValueError(f"need at least k={k} rows, got {n}")
    grid = default_lambda_grid() if lambda_grid is None else np.asarray(lambda_grid, dtype=np.float64)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))
    order = rng.permutation(n)
    folds = np.array_split(order, k)
    sq_err = np.zeros((k, grid.size))
    for fi, held in enumerate(folds):
        train = np.setdiff1d(order, held, assume_unique=True)
        path = fit_lasso_path(design[train], response[train], grid)
        for gi in range(grid.size):
            pred = path.predict(design[held], gi)
            sq_err[fi, gi] = float(np.mean((response[held] - pred) ** 2))
    curve = sq_err.mean(axis=0)
    best_index = 0
    for gi in range(1, grid.size):
        if curve[gi] < curve[best_index]:
            best_index = gi
    return CvLassoResult(
        best_lambda=float(grid[best_index]),
        best_index=best_index,
        lambda_grid=grid,
        cv_curve=curve,
    )


# ---------------------------------------------------------------------------
# Data-driven calibration pipeline
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SelectionReport:
    """What the cross-validated penalty kept, dropped, and how it chose."""

    candidates: tuple[str, ...]
    retained: tuple[str, ...]
    zeroed: tuple[str, ...]
    surrogate_coef: float
    best_lambda: float
    lambda_grid: np.ndarray
    cv_curve: np.ndarray
    coef_path: np.ndarray  # grid x (surrogate + candidates), original scale
    n_boot: int
    se_normal: float | None
    ci_percentile: tuple[float, float] | None
    ci_normal: tuple[float, float] | None
    seed: int


def _pipeline_beta(
    main: Dataset,
    validation: Dataset,
    candidates: tuple[str, ...],
    confounders: tuple[str, ...],
    grid: np.ndarray,
    k: int,
    seed: int,
    link: str,
    refit: str,
    val_rows: np.ndarray | None = None,
    main_rows: np.ndarray | None = None,
) -> tuple[np.ndarray, CvLassoResult, LassoPath, np.ndarray]:
    """One full run: CV-selected calibration model, then outcome fit.

    refit="ols" treats the penalty as a covariate selector and refits the
    chosen support by least squares before imputing (as the adjusted-R-squared
    selection practice would); refit="penalized" imputes straight from the
    shrunken coefficients.  Returns the stage-2 coefficients, the CV result,
    the path, and the calibration coefficients actually used for imputation
    (intercept, surrogate, candidates; zeros for dropped candidates).
    """
    vsel = slice(None) if val_rows is None else val_rows
    msel = slice(None) if main_rows is None else main_rows
    design_val = np.column_stack(
        [validation.col(SURROGATE_COL)[vsel]] + [validation.col(c)[vsel] for c in candidates]
    )
    x_val = validation.col(EXPOSURE_COL)[vsel]
    cv = cross_validate_lasso(design_val, x_val, grid, k=k, seed=seed)
    path = fit_lasso_path(design_val, x_val, grid)
    if refit == "penalized":
        alpha = np.concatenate(([path.intercepts[cv.best_index]], path.coefs[cv.best_index]))
    else:
        support = path.active(cv.best_index)
        refit_design = np.column_stack([np.ones(x_val.shape[0]), design_val[:, support]])
        coef = linalg.ols_solve(refit_design, x_val).coef
        alpha = np.zeros(1 + design_val.shape[1])
        alpha[0] = coef[0]
        alpha[1 + support] = coef[1:]
    design_main = np.column_stack(
        [main.col(SURROGATE_COL)[msel]] + [main.col(c)[msel] for c in candidates]
    )
    eta = alpha[0] + design_main @ alpha[1:]
    stage2_cols = [np.ones(eta.shape[0]), eta] + [main.col(c)[msel] for c in confounders]
    design2 = np.column_stack(stage2_cols)
    y = main.col(OUTCOME_COL)[msel]
    if link == "identity":
        beta = linalg.ols_solve(design2, y).coef
    else:
        beta = fit_logistic_irls(design2, y).coef
    return beta, cv, path, alpha


def data_driven_mem_estimate(
    main: Dataset,
    validation: Dataset,
    candidate_covariates,
    outcome_confounders=(),
    *,
    lambda_grid: np.ndarray | None = None,
    k: int = 10,
    seed: int = 0,
    n_boot: int = 1000,
    link: str = "identity",
    refit: str = "ols",
) -> tuple[EstimateResult, SelectionReport]:
    """Structure-agnostic calibration: penalize everything, let CV choose.

    Stage 1 selects calibration covariates by a cross-validated L1 path of
    the true exposure on the surrogate plus every candidate (validation
    arm), then refits the selected support by least squares (refit="ols",
    the default, mirroring how selected calibration models are fit in
    practice) or imputes from the shrunken coefficients (refit="penalized").
    Stage 2 regresses the outcome on the imputed exposure plus the declared
    confounders.  Variance comes from a nonparametric bootstrap resampling
    the two arms independently and re-running the entire pipeline,
    selection included.
    """
    if refit not in ("ols", "penalized"):
        raise ValueError(f"refit must be 'ols' or 'penalized', got {refit!r}")
    candidates = tuple(candidate_covariates)
    confounders = tuple(outcome_confounders)
    for name in candidates:
        if name not in validation or name not in main:
            raise SchemaError(f"candidate covariate {name!r} missing from an arm")
    grid = default_lambda_grid() if lambda_grid is None else np.asarray(lambda_grid, dtype=np.float64)

    beta, cv, path, alpha = _pipeline_beta(
        main, validation, candidates, confounders, grid, k, seed, link, refit
    )
    names = ("intercept", "eta") + confounders

    boot_draws = np.empty((n_boot, beta.shape[0]))
    n_ok = 0
    for b in range(n_boot):
        ss = np.random.SeedSequence(entropy=[int(seed), b])
        rng_val, rng_main, sub = [
            np.random.Generator(np.random.Philox(child)) for child in ss.spawn(3)
        ]
        val_rows = rng_val.integers(0, validation.n, size=validation.n)
        main_rows = rng_main.integers(0, main.n, size=main.n)
        cv_seed = int(sub.integers(0, 2**31 - 1))
        try:
            draw, _, _, _ = _pipeline_beta(
                main, validation, candidates, confounders, grid, k, cv_seed, link, refit,
                val_rows=val_rows, main_rows=main_rows,
            )
        except Exception:  # resample-induced degeneracies are skipped
            continue
        boot_draws[n_ok] = draw
        n_ok += 1
    boot_draws = boot_draws[:n_ok]

    if n_ok >= 2:
        boot_cov = np.cov(boot_draws, rowvar=False, ddof=1)
        boot_cov = np.atleast_2d(boot_cov)
        se1 = float(np.sqrt(boot_cov[1, 1]))
        ci_normal = (float(beta[1]) - Z975 * se1, float(beta[1]) + Z975 * se1)
        lo, hi = np.percentile(boot_draws[:, 1], [2.5, 97.5])
        ci_percentile = (float(lo), float(hi))
    else:
        boot_cov = np.full((beta.shape[0], beta.shape[0]), np.nan)
        se1 = float("nan")
        ci_normal = (float("nan"), float("nan"))
        ci_percentile = None

    # calibration coefficients actually used for imputation, MemFit layout
    design_val = np.column_stack(
        [np.ones(validation.n), validation.col(SURROGATE_COL)]
        + [validation.col(c) for c in candidates]
    )
    resid = validation.col(EXPOSURE_COL) - design_val @ alpha
    active = 1 + len(path.active(cv.best_index))
    dof = max(validation.n - active, 1)
    mem_fit = MemFit(
        alpha=alpha,
        residual_var=float(resid @ resid) / dof,
        included_covariates=candidates,
        xtx_inv=linalg.ols_solve(design_val, validation.col(EXPOSURE_COL)).xtx_inv,
        n=validation.n,
    )
    retained = tuple(c for i, c in enumerate(candidates) if path.coefs[cv.best_index][i + 1] != 0.0)
    zeroed = tuple(c for c in candidates if c not in retained)
    strategy = AdjustmentStrategy(
        covariates=tuple(dict.fromkeys(candidates + confounders)),
        in_mem=retained,
        in_outcome=confounders,
    )
    result = EstimateResult(
        strategy=strategy,
        link=link,
        beta=beta,
        beta_names=names,
        mem=mem_fit,
        sandwich_cov=boot_cov,
        se_beta1=se1,
        ci95=ci_normal,
        n_main=main.n,
        n_validation=validation.n,
        diagnostics={"variance": "bootstrap", "n_boot": n_ok},
    )
    report = SelectionReport(
        candidates=candidates,
        retained=retained,
        zeroed=zeroed,
        surrogate_coef=float(path.coefs[cv.best_index][0]),
        best_lambda=cv.best_lambda,
        lambda_grid=grid,
        cv_curve=cv.cv_curve,
        coef_path=path.coefs,
        n_boot=n_ok,
        se_normal=se1 if n_ok >= 2 else None,
        ci_percentile=ci_percentile,
        ci_normal=ci_normal if n_ok >= 2 else None,
        seed=seed,
    )
    return result, report
