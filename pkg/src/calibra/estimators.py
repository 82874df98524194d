"""Two-stage calibrated estimators with stacked estimating-equation variances.

Stage 1 fits the calibration model on the validation arm, stage 2 regresses
the outcome on the imputed exposure (identity or logit link) in the main arm,
and the sandwich combines both stages so that the reported variance accounts
for the estimated calibration coefficients.  The two stages may be solved
sequentially because the stacked system is block triangular in
(calibration, outcome) parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit
from scipy.stats import chi2

from . import linalg
from .core import (
    AdjustmentStrategy,
    Dataset,
    OUTCOME_COL,
    OutcomeModelSpec,
    validate_dataset,
)
from .errors import (
    ConvergenceError,
    SchemaError,
    SeparationError,
    SingularMatrixError,
)
from .mem import MemFit, fit_mem, impute_x, mem_residuals, regressor_matrix

Z975 = 1.959964  # two-sided 95% normal quantile, pinned

IRLS_MAX_ITER = 100
IRLS_SCORE_TOL = 1e-8
IRLS_COEF_TOL = 1e-10
IRLS_MAX_HALVINGS = 10
SEPARATION_LP = 30.0


# ---------------------------------------------------------------------------
# Logistic fitting (IRLS / Newton with step halving)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LogisticFit:
    coef: np.ndarray
    info_inv: np.ndarray  # (X' W X)^-1 at the solution
    fitted: np.ndarray  # per-row event probabilities
    score_contribs: np.ndarray  # per-row x_i (y_i - p_i)
    iterations: int
    trace: tuple = ()


def _deviance(y: np.ndarray, p: np.ndarray) -> float:
    p = np.clip(p, 1e-12, 1.0 - 1e-12)
    return -2.0 * float(y @ np.log(p) + (1.0 - y) @ np.log(1.0 - p))


def _newton_step(info: np.ndarray, score: np.ndarray) -> np.ndarray:
    # hot path: tiny SPD system, numpy's LAPACK call beats the checked solver
    try:
        return np.linalg.solve(info, score)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrixError(f"singular information matrix: {exc}") from exc


def _check_separation(lp: np.ndarray, event_mask: np.ndarray) -> None:
    if float(np.max(np.abs(lp))) <= SEPARATION_LP:
        return
    events = lp[event_mask]
    nonevents = lp[~event_mask]
    if events.size and np.all(np.abs(events) > SEPARATION_LP):
        raise SeparationError("all event rows have |linear predictor| > 30")
    if nonevents.size and np.all(np.abs(nonevents) > SEPARATION_LP):
        raise SeparationError("all non-event rows have |linear predictor| > 30")


def fit_logistic_irls(design: np.ndarray, y: np.ndarray) -> LogisticFit:
    """Maximize the Bernoulli log-likelihood by Newton steps with halving.

    Starts from the zero vector; converged when the summed score has max
    absolute component < 1e-8 and the last relative coefficient change is
    < 1e-10.  Raises SeparationError when one outcome class sits entirely
    beyond |linear predictor| = 30, ConvergenceError after 100 iterations.
    """
    design = linalg.as_matrix(design, "design")
    y = linalg.as_vector(y, "y")
    if design.shape[0] != y.shape[0]:
        raise linalg.ShapeError("design and y row counts differ")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValueError("y must be coded 0/1")
    p_dim = design.shape[1]
    event_mask = y == 1.0
    beta = np.zeros(p_dim)
    dev = 2.0 * y.shape[0] * np.log(2.0)  # deviance at the zero start
    rel_change = np.inf
    trace: list[tuple[int, float, float]] = []
    for iteration in range(1, IRLS_MAX_ITER + 1):
        lp = design @ beta
        _check_separation(lp, event_mask)
        prob = expit(lp)
        score = design.T @ (y - prob)
        max_score = float(np.max(np.abs(score)))
        trace.append((iteration, max_score, dev))
        if max_score < IRLS_SCORE_TOL and rel_change < IRLS_COEF_TOL:
            weights = prob * (1.0 - prob)
            info = design.T @ (design * weights[:, None])
            return LogisticFit(
                coef=beta,
                info_inv=linalg.inv_sym(info),
                fitted=prob,
                score_contribs=design * (y - prob)[:, None],
                iterations=iteration,
                trace=tuple(trace),
            )
        weights = prob * (1.0 - prob)
        info = design.T @ (design * weights[:, None])
        step = _newton_step(info, score)
        for _ in range(IRLS_MAX_HALVINGS + 1):
            candidate = beta + step
            cand_dev = _deviance(y, expit(design @ candidate))
            if cand_dev <= dev + 1e-12:
                break
            step = 0.5 * step
        rel_change = float(np.max(np.abs(candidate - beta))) / (
            float(np.max(np.abs(candidate))) + 1e-12
        )
        beta = candidate
        dev = cand_dev
    _check_separation(design @ beta, event_mask)
    raise ConvergenceError(
        f"IRLS did not converge in {IRLS_MAX_ITER} iterations", trace=trace
    )


# ---------------------------------------------------------------------------
# Sandwich variance from stacked estimating equations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StageSummary:
    """Per-stage ingredients: score regressors, residuals, and dispersion.

    weights carries the GLM variance weights (p(1-p) for the logit link);
    None means ordinary least squares.  dispersion is the model-based
    residual variance (1.0 for the logit link, where the Bernoulli variance
    is already the weight).
    """

    regressors: np.ndarray
    residuals: np.ndarray
    dispersion: float
    weights: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.regressors.shape[0]

    def gram(self) -> np.ndarray:
        if self.weights is None:
            return self.regressors.T @ self.regressors
        return self.regressors.T @ (self.regressors * self.weights[:, None])

    def score_contribs(self) -> np.ndarray:
        return self.regressors * self.residuals[:, None]


def sandwich_variance(
    stage1: StageSummary,
    stage2: StageSummary,
    cross: np.ndarray,
    mode: str = "model",
) -> np.ndarray:
    """Covariance of the stage-2 coefficients, corrected for stage 1.

    cross is the derivative of the average stage-2 estimating function with
    respect to the stage-1 coefficients (sign absorbed; zero when the
    outcome model does not use the imputed exposure).  With the two arms
    sampled independently the stacked sandwich reduces to

        A22^-1 [B22 + cross A11^-1 B11 A11^-T cross^T] A22^-T

    where the A blocks are average score derivatives and the B blocks are
    covariances of the average scores.  mode="model" uses the
    dispersion-times-Gram middle matrices; mode="empirical" uses the robust
    outer-product form.
    """
    if mode not in ("model", "empirical"):
        raise ValueError(f"mode must be 'model' or 'empirical', got {mode!r}")
    n, m = stage1.n, stage2.n
    a11 = stage1.gram() / n
    a22 = stage2.gram() / m
    cross = np.asarray(cross, dtype=np.float64)
    if cross.shape != (a22.shape[0], a11.shape[0]):
        raise linalg.ShapeError(
            f"cross block is {cross.shape}, expected {(a22.shape[0], a11.shape[0])}"
        )

    def middle(stage: StageSummary, a: np.ndarray, count: int) -> np.ndarray:
        if mode == "model":
            return stage.dispersion * a / count
        g = stage.score_contribs()
        return (g.T @ g) / count**2

    b11 = middle(stage1, a11, n)
    b22 = middle(stage2, a22, m)
    a11_inv_crosst = linalg.solve_sym(a11, cross.T)
    bread = b22 + a11_inv_crosst.T @ b11 @ a11_inv_crosst
    half = linalg.solve_sym(a22, bread)
    cov = linalg.solve_sym(a22, half.T)
    return 0.5 * (cov + cov.T)


# ---------------------------------------------------------------------------
# Logistic-approximation condition checks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConditionReport:
    """Whether the logit-link calibration approximation is trustworthy.

    Condition I asks the calibration residual variance times the squared
    effect to be small (< 0.5); condition II asks for a rare outcome
    (prevalence < 5%) with homoskedastic calibration errors.  Either one
    suffices.
    """

    var_x_given_zv: float
    beta1: float
    product: float
    condition_i: bool
    prevalence: float
    homoskedasticity_p: float
    condition_ii: bool
    overall: bool

    @property
    def warning(self) -> str | None:
        if self.overall:
            return None
        return (
            f"neither approximation condition holds: var(x|z,v)*beta^2 = "
            f"{self.product:.3g} >= 0.5 and prevalence = {self.prevalence:.3g} >= 0.05"
        )


def check_logistic_approx(
    mem_fit: MemFit,
    beta1: float,
    prevalence: float,
    homoskedasticity_p: float = 1.0,
) -> ConditionReport:
    """Evaluate the two sufficient conditions for the logit-link approximation."""
    if not 0.0 <= prevalence <= 1.0:
        raise ValueError(f"prevalence must be in [0, 1], got {prevalence}")
    product = mem_fit.residual_var * beta1**2
    condition_i = product < 0.5
    condition_ii = prevalence < 0.05 and homoskedasticity_p >= 0.05
    return ConditionReport(
        var_x_given_zv=mem_fit.residual_var,
        beta1=float(beta1),
        product=float(product),
        condition_i=bool(condition_i),
        prevalence=float(prevalence),
        homoskedasticity_p=float(homoskedasticity_p),
        condition_ii=bool(condition_ii),
        overall=bool(condition_i or condition_ii),
    )


def breusch_pagan_p(residuals: np.ndarray, regressors: np.ndarray) -> float:
    """LM test p-value for heteroskedastic residuals (squared-residual aux fit)."""
    residuals = linalg.as_vector(residuals, "residuals")
    regressors = linalg.as_matrix(regressors, "regressors")
    n, p = regressors.shape
    if p < 2:
        return 1.0
    e2 = residuals**2
    tss = float(np.sum((e2 - e2.mean()) ** 2))
    if tss == 0.0:
        return 1.0
    try:
        coef = np.linalg.solve(regressors.T @ regressors, regressors.T @ e2)
    except np.linalg.LinAlgError:
        return 1.0
    rss = float(np.sum((e2 - regressors @ coef) ** 2))
    lm = n * (1.0 - rss / tss)
    return float(chi2.sf(max(lm, 0.0), df=p - 1))


# ---------------------------------------------------------------------------
# The calibrated two-stage estimator
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EstimateResult:
    """Outcome-model coefficients with calibration-aware covariance."""

    strategy: AdjustmentStrategy
    link: str
    beta: np.ndarray
    beta_names: tuple[str, ...]
    mem: MemFit
    sandwich_cov: np.ndarray
    se_beta1: float
    ci95: tuple[float, float]
    n_main: int
    n_validation: int
    condition_report: ConditionReport | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def beta1(self) -> float:
        return float(self.beta[1])

    def beta_of_v(self, values: dict[str, float]) -> float:
        """Exposure effect at covariate values, including interaction slopes."""
        out = self.beta1
        for i, name in enumerate(self.beta_names):
            if name.startswith("eta*"):
                out += float(self.beta[i]) * values[name[4:]]
        return out

    def odds_ratio(self) -> tuple[float, tuple[float, float]]:
        if self.link != "logit":
            raise ValueError("odds ratios only apply to the logit link")
        lo, hi = self.ci95
        return float(np.exp(self.beta1)), (float(np.exp(lo)), float(np.exp(hi)))


def _require_valid(data: Dataset, arm: str) -> None:
    if data.arm != arm:
        raise SchemaError(f"expected the {arm} arm, got {data.arm!r}")
    violations = validate_dataset(data)
    if violations:
        raise SchemaError(violations)


def _stage2_design(
    main: Dataset,
    eta: np.ndarray,
    outcome_covs: tuple[str, ...],
    interaction_covs: tuple[str, ...],
) -> tuple[np.ndarray, tuple[str, ...]]:
    cols = [np.ones(main.n), eta]
    names = ["intercept", "eta"]
    for name in outcome_covs:
        cols.append(main.col(name))
        names.append(name)
    for name in interaction_covs:
        cols.append(eta * main.col(name))
        names.append(f"eta*{name}")
    return np.column_stack(cols), tuple(names)


def _effective_slope(
    beta: np.ndarray,
    names: tuple[str, ...],
    main: Dataset,
) -> np.ndarray:
    """Per-row derivative of the linear predictor with respect to eta."""
    slope = np.full(main.n, float(beta[1]))
    for i, name in enumerate(names):
        if name.startswith("eta*"):
            slope = slope + float(beta[i]) * main.col(name[4:])
    return slope


def estimate_crs(
    main: Dataset,
    validation: Dataset,
    strategy: AdjustmentStrategy,
    spec: OutcomeModelSpec | None = None,
    *,
    sandwich_mode: str = "model",
) -> EstimateResult:
    """Calibrate, impute, regress, and assemble the stacked-sandwich variance.

    Stage 1 regresses the true exposure on (1, z, strategy.in_mem) in the
    validation arm; stage 2 regresses the outcome on (1, eta,
    strategy.in_outcome[, eta * V interactions]) in the main arm with the
    requested link.  The coefficient on eta is the corrected exposure effect.
    """
    spec = spec or OutcomeModelSpec()
    _require_valid(main, "main")
    _require_valid(validation, "validation")
    if spec.link == "logit" and main.outcome_type != "binary":
        raise SchemaError("logit link requires a binary outcome")

    mem_fit = fit_mem(validation, strategy.in_mem)
    eta = impute_x(main, mem_fit)
    interaction_covs = spec.interactions_for(strategy.in_outcome)
    design2, names = _stage2_design(main, eta, strategy.in_outcome, interaction_covs)
    y = main.col(OUTCOME_COL)

    if spec.link == "identity":
        fit2 = linalg.ols_solve(design2, y)
        beta = fit2.coef
        resid2 = y - design2 @ beta
        weights = None
        dispersion2 = fit2.residual_var
        iterations = None
    else:
        logit_fit = fit_logistic_irls(design2, y)
        beta = logit_fit.coef
        resid2 = y - logit_fit.fitted
        weights = logit_fit.fitted * (1.0 - logit_fit.fitted)
        dispersion2 = 1.0
        iterations = logit_fit.iterations

    # Cross block: derivative of the average stage-2 score in the calibration
    # coefficients, evaluated with the per-row exposure slope (constant beta1
    # without interactions).  Published block form; the residual part of the
    # exact Jacobian is dropped here on purpose.
    u1_main = regressor_matrix(main, mem_fit.included_covariates)
    slope = _effective_slope(beta, names, main)
    w_eff = slope if weights is None else slope * weights
    cross = (design2 * w_eff[:, None]).T @ u1_main / main.n

    stage1 = StageSummary(
        regressors=regressor_matrix(validation, mem_fit.included_covariates),
        residuals=mem_residuals(validation, mem_fit),
        dispersion=mem_fit.residual_var,
    )
    stage2 = StageSummary(
        regressors=design2, residuals=resid2, dispersion=dispersion2, weights=weights
    )
    cov = sandwich_variance(stage1, stage2, cross, mode=sandwich_mode)

    se_beta1 = float(np.sqrt(cov[1, 1]))
    beta1 = float(beta[1])
    ci95 = (beta1 - Z975 * se_beta1, beta1 + Z975 * se_beta1)

    condition = None
    if spec.link == "logit":
        bp = breusch_pagan_p(stage1.residuals, stage1.regressors)
        condition = check_logistic_approx(mem_fit, beta1, float(y.mean()), bp)

    diagnostics = {"sandwich_mode": sandwich_mode}
    if iterations is not None:
        diagnostics["irls_iterations"] = iterations
    return EstimateResult(
        strategy=strategy,
        link=spec.link,
        beta=beta,
        beta_names=names,
        mem=mem_fit,
        sandwich_cov=cov,
        se_beta1=se_beta1,
        ci95=ci95,
        n_main=main.n,
        n_validation=validation.n,
        condition_report=condition,
        diagnostics=diagnostics,
    )


def estimate_with_interaction(
    main: Dataset,
    validation: Dataset,
    strategy: AdjustmentStrategy,
    spec: OutcomeModelSpec,
    *,
    sandwich_mode: str = "model",
) -> EstimateResult:
    """Exposure-by-covariate interaction model; valid only with every
    covariate in both models (the OM placement)."""
    if strategy.label != "OM":
        raise ValueError("interaction models require the OM placement for every covariate")
    if not spec.include_interaction:
        raise ValueError("spec.include_interaction must be set")
    return estimate_crs(main, validation, strategy, spec, sandwich_mode=sandwich_mode)


def naive_estimate(
    main: Dataset,
    covariates: tuple[str, ...] = (),
    link: str = "identity",
) -> tuple[float, float]:
    """Uncorrected regression of the outcome on the raw surrogate.

    Returns (coefficient on z, standard error); used by reports to show the
    attenuation the calibration removes.
    """
    design = regressor_matrix(main, tuple(covariates))
    y = main.col(OUTCOME_COL)
    if link == "identity":
        fit = linalg.ols_solve(design, y)
        se = float(np.sqrt(fit.residual_var * fit.xtx_inv[1, 1]))
        return float(fit.coef[1]), se
    logit_fit = fit_logistic_irls(design, y)
    return float(logit_fit.coef[1]), float(np.sqrt(logit_fit.info_inv[1, 1]))


# ---------------------------------------------------------------------------
# Limiting variances from population moments
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MomentSet:
    """Population variances/covariances among z, v and the two calibration
    predictors (with and without the covariate), plus the limiting
    validation-to-main size ratio rho.

    The *_val overrides let the validation arm come from a different source
    population; by default both arms share the same moments.
    """

    var_z: float
    var_v: float
    cov_zv: float
    var_eta_adj: float
    cov_eta_adj_z: float
    cov_eta_adj_v: float
    var_eta_unadj: float
    cov_eta_unadj_z: float
    cov_eta_unadj_v: float
    rho: float
    var_z_val: float | None = None
    var_v_val: float | None = None
    cov_zv_val: float | None = None

    def __post_init__(self):
        if self.rho <= 0:
            raise ValueError("rho must be positive")
        pairs = [
            (self.cov_zv, self.var_z, self.var_v, "z,v"),
            (self.cov_eta_adj_z, self.var_eta_adj, self.var_z, "eta_adj,z"),
            (self.cov_eta_adj_v, self.var_eta_adj, self.var_v, "eta_adj,v"),
            (self.cov_eta_unadj_z, self.var_eta_unadj, self.var_z, "eta_unadj,z"),
            (self.cov_eta_unadj_v, self.var_eta_unadj, self.var_v, "eta_unadj,v"),
        ]
        for cov, va, vb, label in pairs:
            bound = np.sqrt(max(va, 0.0) * max(vb, 0.0)) * (1.0 + 1e-9)
            if abs(cov) > bound and bound > 0:
                raise ValueError(f"implied correlation for ({label}) exceeds 1")

    # validation-population moments default to the main-population values
    @property
    def var_z_n(self) -> float:
        return self.var_z if self.var_z_val is None else self.var_z_val

    @property
    def var_v_n(self) -> float:
        return self.var_v if self.var_v_val is None else self.var_v_val

    @property
    def cov_zv_n(self) -> float:
        return self.cov_zv if self.cov_zv_val is None else self.cov_zv_val


def asymptotic_variance(
    strategy: AdjustmentStrategy | str,
    moments: MomentSet,
    beta: float,
    sigma_x: float,
    sigma_y: float,
) -> float:
    """Limiting m * Var(corrected effect) for one adjustment strategy.

    sigma_x and sigma_y are the residual *variances* of the calibration and
    outcome models under the given strategy.  The four closed forms share the
    structure (outcome-noise term) + (1/rho) * (calibration-noise term).
    """
    label = strategy if isinstance(strategy, str) else strategy.label
    if label not in ("OM", "--", "-M", "O-"):
        raise ValueError(f"unknown strategy {label!r}")
    m = moments
    c11_den = m.var_z_n * m.var_v_n - m.cov_zv_n**2

    if label in ("OM", "-M") and m.var_eta_adj <= 0:
        raise SingularMatrixError("Var(eta) is zero: degenerate calibration predictor")
    if label in ("--", "O-") and m.var_eta_unadj <= 0:
        raise SingularMatrixError("Var(eta) is zero: degenerate calibration predictor")

    if label == "OM":
        c22_den = m.var_eta_adj * m.var_v - m.cov_eta_adj_v**2
        if c22_den <= 0 or c11_den <= 0:
            raise SingularMatrixError("degenerate moment matrix")
        c11 = 1.0 / c11_den
        c22 = 1.0 / c22_den
        k = m.cov_eta_adj_z * m.var_v - m.cov_zv * m.cov_eta_adj_v
        return sigma_y * c22 * m.var_v + (1.0 / m.rho) * sigma_x * beta**2 * c11 * c22**2 * k**2 * m.var_v_n

    if label == "--":
        return sigma_y / m.var_eta_unadj + (1.0 / m.rho) * sigma_x * beta**2 * m.cov_eta_unadj_z**2 / (
            m.var_eta_unadj**2 * m.var_z_n
        )

    if label == "-M":
        if c11_den <= 0:
            raise SingularMatrixError("degenerate moment matrix")
        c11 = 1.0 / c11_den
        k = (
            m.cov_eta_adj_z**2 * m.var_v_n
            - 2.0 * m.cov_eta_adj_z * m.cov_eta_adj_v * m.cov_zv_n
            + m.cov_eta_adj_v**2 * m.var_z_n
        )
        return sigma_y / m.var_eta_adj + (1.0 / m.rho) * sigma_x * beta**2 * c11 * k / m.var_eta_adj**2

    # O-
    c22_den = m.var_eta_unadj * m.var_v - m.cov_eta_unadj_v**2
    if c22_den <= 0:
        raise SingularMatrixError("degenerate moment matrix")
    c22 = 1.0 / c22_den
    k = m.cov_eta_unadj_z * m.var_v - m.cov_zv * m.cov_eta_unadj_v
    return sigma_y * c22 * m.var_v + (1.0 / m.rho) * sigma_x * beta**2 * c22**2 * k**2 / m.var_z_n
