import numpy as np
import pytest
from scipy.special import expit

import calibra.estimators as est
from calibra.core import AdjustmentStrategy, Dataset, OutcomeModelSpec, STRATEGY_LABELS
from calibra.errors import ConvergenceError, SchemaError, SeparationError, SingularMatrixError
from calibra.estimators import (
    MomentSet,
    StageSummary,
    asymptotic_variance,
    check_logistic_approx,
    estimate_crs,
    estimate_with_interaction,
    fit_logistic_irls,
    naive_estimate,
    sandwich_variance,
)
from calibra.advisor import closed_form_plim, scenario_moments
from calibra.mem import impute_x, regressor_matrix
from calibra.simulator import Scenario, base_scenario, generate_scenario_data, replicate_seed
from calibra import linalg


def _arms(x, z, v, y, binary=False):
    outcome = "binary" if binary else "continuous"
    validation = Dataset({"x": x, "z": z, "v": v}, arm="validation", outcome_type=outcome)
    main = Dataset({"z": z, "v": v, "y": y}, arm="main", outcome_type=outcome)
    return main, validation


def _orthogonal_noise(rng, x, n):
    """Noise made exactly orthogonal to (1, x) in sample."""
    raw = rng.normal(size=n)
    basis = np.column_stack([np.ones(n), x])
    coef, *_ = np.linalg.lstsq(basis, raw, rcond=None)
    return raw - basis @ coef


# ---------------------------------------------------------------------------
# perfect-surrogate degeneracy
# ---------------------------------------------------------------------------


def test_perfect_surrogate_identity_strategies_coincide():
    rng = np.random.default_rng(101)
    n = 400
    x = rng.normal(size=n)
    v = _orthogonal_noise(rng, x, n)
    y = 0.8 * x + rng.normal(size=n)
    main, validation = _arms(x, x, v, y)
    naive_slope, _ = naive_estimate(main, (), "identity")
    betas = []
    for label in STRATEGY_LABELS:
        res = estimate_crs(main, validation, AdjustmentStrategy.from_label(label, ("v",)))
        betas.append(res.beta1)
    assert max(betas) - min(betas) < 1e-10
    assert abs(betas[0] - naive_slope) < 1e-10


def test_perfect_surrogate_logit_matches_naive_fit():
    rng = np.random.default_rng(102)
    n = 600
    x = rng.normal(size=n)
    v = rng.normal(size=n)
    y = (rng.random(n) < expit(-1.0 + 0.7 * x + 0.3 * v)).astype(float)
    main, validation = _arms(x, x, v, y, binary=True)
    spec = OutcomeModelSpec(link="logit")
    res = estimate_crs(main, validation, AdjustmentStrategy.from_label("OM", ("v",)), spec)
    design = np.column_stack([np.ones(n), x, v])
    naive = fit_logistic_irls(design, y)
    assert abs(res.beta1 - naive.coef[1]) < 1e-8


# ---------------------------------------------------------------------------
# probability-limit cross-check on the counterexample process
# ---------------------------------------------------------------------------


def _counterexample_scenario(n_total=100_000):
    # v -> x and v -> z slopes both 1, all noise sds 1, v -> y slope 1
    return Scenario(
        label="counterexample",
        dag_index=4,
        eta_v=1.0,
        theta_x=1.0,
        theta_v=1.0,
        beta_x=1.0,
        beta_v=1.0,
        sd_ez=1.0,
        n_total=n_total,
        n_vs=n_total // 2,
        n_reps=1,
    )


def test_unadjusted_plim_matches_covariance_algebra():
    s = _counterexample_scenario()
    plim = closed_form_plim("--", s)
    assert plim == pytest.approx(5.0 / 3.0, abs=1e-12)
    main, validation = generate_scenario_data(s, replicate_seed(7, 0))
    res = estimate_crs(main, validation, AdjustmentStrategy.from_label("--", ("v",)))
    assert res.beta1 == pytest.approx(plim, rel=0.02)


# ---------------------------------------------------------------------------
# sandwich assembly
# ---------------------------------------------------------------------------


def test_sandwich_zero_residuals_gives_zero_matrix():
    rng = np.random.default_rng(5)
    r1 = np.column_stack([np.ones(40), rng.normal(size=40)])
    r2 = np.column_stack([np.ones(60), rng.normal(size=60)])
    stage1 = StageSummary(r1, np.zeros(40), dispersion=0.0)
    stage2 = StageSummary(r2, np.zeros(60), dispersion=0.0)
    cov = sandwich_variance(stage1, stage2, np.zeros((2, 2)))
    assert np.max(np.abs(cov)) == 0.0
    cov_emp = sandwich_variance(stage1, stage2, np.zeros((2, 2)), mode="empirical")
    assert np.max(np.abs(cov_emp)) == 0.0


def test_sandwich_decouples_to_plain_ols_when_cross_is_zero():
    rng = np.random.default_rng(6)
    n, m = 50, 120
    r1 = np.column_stack([np.ones(n), rng.normal(size=n)])
    design = np.column_stack([np.ones(m), rng.normal(size=m)])
    y = design @ np.array([0.3, 1.1]) + rng.normal(size=m)
    fit = linalg.ols_solve(design, y)
    resid = y - design @ fit.coef
    stage1 = StageSummary(r1, rng.normal(size=n), dispersion=1.3)
    stage2 = StageSummary(design, resid, dispersion=fit.residual_var)
    cov = sandwich_variance(stage1, stage2, np.zeros((2, 2)))
    plain = fit.residual_var * fit.xtx_inv
    assert np.max(np.abs(cov - plain)) < 1e-12


def test_sandwich_output_symmetric_psd():
    s = base_scenario(4)
    main, validation = generate_scenario_data(s, replicate_seed(3, 1))
    for label in STRATEGY_LABELS:
        res = estimate_crs(main, validation, AdjustmentStrategy.from_label(label, ("v",)))
        cov = res.sandwich_cov
        assert np.max(np.abs(cov - cov.T)) < 1e-12
        assert np.min(np.linalg.eigvalsh(cov)) > -1e-8 * np.max(np.abs(cov))


def test_sandwich_empirical_mode_close_to_model_under_homoskedasticity():
    s = base_scenario(5)
    main, validation = generate_scenario_data(s, replicate_seed(5, 2))
    strategy = AdjustmentStrategy.from_label("OM", ("v",))
    cov_m = estimate_crs(main, validation, strategy).se_beta1
    cov_e = estimate_crs(main, validation, strategy, sandwich_mode="empirical").se_beta1
    assert cov_e == pytest.approx(cov_m, rel=0.1)


# ---------------------------------------------------------------------------
# logistic fitting
# ---------------------------------------------------------------------------


def test_irls_balanced_symmetric_zero_solution():
    design = np.column_stack([np.ones(4), np.array([-1.0, -1.0, 1.0, 1.0])])
    y = np.array([0.0, 1.0, 0.0, 1.0])
    fit = fit_logistic_irls(design, y)
    assert np.max(np.abs(fit.coef)) < 1e-8


def test_irls_gradient_vanishes_against_finite_differences():
    rng = np.random.default_rng(33)
    n = 300
    x = rng.normal(size=n)
    y = (rng.random(n) < expit(0.4 * x - 0.5)).astype(float)
    design = np.column_stack([np.ones(n), x])
    fit = fit_logistic_irls(design, y)

    def loglik(beta):
        lp = design @ beta
        return float(y @ lp - np.logaddexp(0.0, lp).sum())

    h = 1e-5
    grad = np.empty(2)
    for j in range(2):
        up, dn = fit.coef.copy(), fit.coef.copy()
        up[j] += h
        dn[j] -= h
        grad[j] = (loglik(up) - loglik(dn)) / (2 * h)
    assert np.max(np.abs(grad)) < 1e-6


def test_irls_matches_grid_oracle_on_tiny_data():
    x = np.array([-1.5, -1.0, -0.5, -0.2, 0.3, 0.8, 1.2, 2.0])
    y = np.array([0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 1.0])
    design = np.column_stack([np.ones(8), x])
    fit = fit_logistic_irls(design, y)
    b0 = np.arange(-3.0, 3.0, 0.01)
    b1 = np.arange(-3.0, 3.0, 0.01)
    grid0, grid1 = np.meshgrid(b0, b1, indexing="ij")
    lp = grid0[..., None] + grid1[..., None] * x[None, None, :]
    ll = (lp * y[None, None, :] - np.logaddexp(0.0, lp)).sum(axis=2)
    best = np.unravel_index(np.argmax(ll), ll.shape)
    oracle = np.array([b0[best[0]], b1[best[1]]])
    assert np.max(np.abs(fit.coef - oracle)) < 0.02


def test_irls_score_contribs_shape_and_zero_sum():
    rng = np.random.default_rng(44)
    n = 200
    x = rng.normal(size=n)
    y = (rng.random(n) < expit(0.3 + 0.5 * x)).astype(float)
    design = np.column_stack([np.ones(n), x])
    fit = fit_logistic_irls(design, y)
    assert fit.score_contribs.shape == (n, 2)
    assert np.max(np.abs(fit.score_contribs.sum(axis=0))) < 1e-7


def test_irls_separation_detected():
    design = np.column_stack([np.ones(6), np.array([-3.0, -2.0, -1.0, 1.0, 2.0, 3.0])])
    y = np.array([0.0, 0.0, 0.0, 1.0, 1.0, 1.0])
    with pytest.raises(SeparationError):
        fit_logistic_irls(design, y)


def test_irls_nonconvergence_carries_trace(monkeypatch):
    monkeypatch.setattr(est, "IRLS_MAX_ITER", 2)
    rng = np.random.default_rng(55)
    x = rng.normal(size=100)
    y = (rng.random(100) < expit(x)).astype(float)
    with pytest.raises(ConvergenceError) as err:
        fit_logistic_irls(np.column_stack([np.ones(100), x]), y)
    assert len(err.value.trace) == 2


def test_irls_rejects_noncoded_outcome():
    with pytest.raises(ValueError):
        fit_logistic_irls(np.ones((4, 1)), np.array([0.0, 1.0, 0.5, 1.0]))


# ---------------------------------------------------------------------------
# approximation condition checks
# ---------------------------------------------------------------------------


def _mem_stub(residual_var):
    from calibra.mem import MemFit

    return MemFit(
        alpha=np.array([0.0, 1.0]),
        residual_var=residual_var,
        included_covariates=(),
        xtx_inv=np.eye(2),
        n=100,
    )


def test_condition_i_small_product():
    rep = check_logistic_approx(_mem_stub(0.2), beta1=0.5, prevalence=0.2)
    assert rep.condition_i and not rep.condition_ii and rep.overall
    assert rep.product == pytest.approx(0.05)


def test_condition_ii_rare_and_homoskedastic():
    rep = check_logistic_approx(_mem_stub(3.0), beta1=1.0, prevalence=0.03, homoskedasticity_p=0.4)
    assert not rep.condition_i and rep.condition_ii and rep.overall


def test_conditions_both_fail_produces_warning():
    rep = check_logistic_approx(_mem_stub(3.0), beta1=1.0, prevalence=0.2)
    assert not rep.overall
    assert rep.warning is not None


def test_condition_prevalence_domain():
    with pytest.raises(ValueError):
        check_logistic_approx(_mem_stub(1.0), 1.0, prevalence=1.5)


# ---------------------------------------------------------------------------
# asymptotic variances
# ---------------------------------------------------------------------------


def test_asymptotic_variance_all_strategies_agree_without_covariate_effects():
    dgp = scenario_moments(base_scenario(5))
    values = [
        asymptotic_variance(label, dgp.moments, dgp.beta, dgp.sigma_x[label], dgp.sigma_y[label])
        for label in STRATEGY_LABELS
    ]
    assert max(values) - min(values) < 1e-10


@pytest.mark.parametrize("dag", [7, 8])
def test_asymptotic_variance_calibration_only_beats_no_adjustment(dag):
    dgp = scenario_moments(base_scenario(dag))
    v_m = asymptotic_variance("-M", dgp.moments, dgp.beta, dgp.sigma_x["-M"], dgp.sigma_y["-M"])
    v_u = asymptotic_variance("--", dgp.moments, dgp.beta, dgp.sigma_x["--"], dgp.sigma_y["--"])
    assert v_m <= v_u


def test_asymptotic_variance_matches_reported_magnitude():
    # main-arm variance of the corrected effect at the no-covariate base case
    s = base_scenario(5)
    dgp = scenario_moments(s)
    m_var = asymptotic_variance("OM", dgp.moments, dgp.beta, dgp.sigma_x["OM"], dgp.sigma_y["OM"])
    assert m_var / s.n_ms == pytest.approx(1.14e-3, rel=0.15)


def test_asymptotic_variance_degenerate_moments():
    dgp = scenario_moments(base_scenario(5))
    broken = MomentSet(
        var_z=dgp.moments.var_z,
        var_v=dgp.moments.var_v,
        cov_zv=dgp.moments.cov_zv,
        var_eta_adj=0.0,
        cov_eta_adj_z=0.0,
        cov_eta_adj_v=0.0,
        var_eta_unadj=dgp.moments.var_eta_unadj,
        cov_eta_unadj_z=dgp.moments.cov_eta_unadj_z,
        cov_eta_unadj_v=dgp.moments.cov_eta_unadj_v,
        rho=dgp.moments.rho,
    )
    with pytest.raises(SingularMatrixError):
        asymptotic_variance("OM", broken, dgp.beta, 0.5, 1.0)


def test_momentset_rejects_impossible_correlation():
    with pytest.raises(ValueError):
        MomentSet(
            var_z=1.0, var_v=1.0, cov_zv=1.5,
            var_eta_adj=1.0, cov_eta_adj_z=0.0, cov_eta_adj_v=0.0,
            var_eta_unadj=1.0, cov_eta_unadj_z=0.0, cov_eta_unadj_v=0.0,
            rho=0.1,
        )


# ---------------------------------------------------------------------------
# interaction model
# ---------------------------------------------------------------------------


def _interaction_draw(rng, n, gamma2):
    v = rng.normal(size=n)
    x = 0.4 * v + rng.normal(size=n)
    z = 0.5 * x + 0.5 * rng.normal(size=n)
    y = 0.5 * x + gamma2 * x * v + 0.8 * v + rng.normal(size=n)
    return x, z, v, y


def _interaction_estimate(x, z, v, y, n_vs=400):
    n = len(x)
    validation = Dataset({"x": x[:n_vs], "z": z[:n_vs], "v": v[:n_vs]}, arm="validation")
    main = Dataset({"z": z[n_vs:], "v": v[n_vs:], "y": y[n_vs:]}, arm="main")
    spec = OutcomeModelSpec(include_interaction=True, interaction_covariates=("v",))
    return estimate_with_interaction(
        main, validation, AdjustmentStrategy.from_label("OM", ("v",)), spec
    )


def test_interaction_null_effect_is_statistically_zero():
    rng = np.random.default_rng(202)
    hits = 0
    reps = 200
    for _ in range(reps):
        x, z, v, y = _interaction_draw(rng, 5000, gamma2=0.0)
        res = _interaction_estimate(x, z, v, y)
        idx = res.beta_names.index("eta*v")
        se = np.sqrt(res.sandwich_cov[idx, idx])
        hits += abs(res.beta[idx]) < 3.0 * se
    assert hits / reps >= 0.98


def test_interaction_recovers_generating_slopes():
    rng = np.random.default_rng(100)
    x, z, v, y = _interaction_draw(rng, 10_000, gamma2=0.3)
    res = _interaction_estimate(x, z, v, y)
    idx = res.beta_names.index("eta*v")
    se1 = res.se_beta1
    se2 = np.sqrt(res.sandwich_cov[idx, idx])
    assert abs(res.beta1 - 0.5) < 2 * se1
    assert abs(res.beta[idx] - 0.3) < 2 * se2
    assert res.beta_of_v({"v": 1.0}) == pytest.approx(res.beta1 + res.beta[idx])


def test_interaction_slopes_unbiased_over_replicates():
    rng = np.random.default_rng(206)
    g1, g2 = [], []
    for _ in range(25):
        x, z, v, y = _interaction_draw(rng, 10_000, gamma2=0.3)
        res = _interaction_estimate(x, z, v, y)
        g1.append(res.beta1)
        g2.append(res.beta[res.beta_names.index("eta*v")])
    assert np.mean(g1) == pytest.approx(0.5, abs=3 * np.std(g1) / 5)
    assert np.mean(g2) == pytest.approx(0.3, abs=3 * np.std(g2) / 5)


def test_interaction_degenerate_matches_naive_interaction_ols():
    rng = np.random.default_rng(204)
    n = 500
    x, _, v, y = _interaction_draw(rng, n, gamma2=0.3)
    main, validation = _arms(x, x, v, y)
    spec = OutcomeModelSpec(include_interaction=True, interaction_covariates=("v",))
    res = estimate_with_interaction(
        main, validation, AdjustmentStrategy.from_label("OM", ("v",)), spec
    )
    design = np.column_stack([np.ones(n), x, v, x * v])
    naive = linalg.ols_solve(design, y)
    assert abs(res.beta1 - naive.coef[1]) < 1e-10
    assert abs(res.beta[res.beta_names.index("eta*v")] - naive.coef[3]) < 1e-10


def test_interaction_requires_om_placement():
    rng = np.random.default_rng(205)
    x, z, v, y = _interaction_draw(rng, 200, gamma2=0.0)
    main, validation = _arms(x, z, v, y)
    spec = OutcomeModelSpec(include_interaction=True, interaction_covariates=("v",))
    with pytest.raises(ValueError, match="OM placement"):
        estimate_with_interaction(
            main, validation, AdjustmentStrategy.from_label("-M", ("v",)), spec
        )


# ---------------------------------------------------------------------------
# invariants
# ---------------------------------------------------------------------------


def test_score_zero_at_every_fitted_stage():
    s = base_scenario(4)
    main, validation = generate_scenario_data(s, replicate_seed(11, 3))
    for label in STRATEGY_LABELS:
        strategy = AdjustmentStrategy.from_label(label, ("v",))
        res = estimate_crs(main, validation, strategy)
        u1 = regressor_matrix(validation, res.mem.included_covariates)
        r1 = validation.col("x") - u1 @ res.mem.alpha
        scale1 = np.max(np.abs(u1))
        assert np.max(np.abs(u1.T @ r1)) < 1e-8 * validation.n * scale1
        eta = impute_x(main, res.mem)
        cols = [np.ones(main.n), eta] + [main.col(c) for c in strategy.in_outcome]
        design2 = np.column_stack(cols)
        r2 = main.col("y") - design2 @ res.beta
        scale2 = np.max(np.abs(design2))
        assert np.max(np.abs(design2.T @ r2)) < 1e-8 * main.n * scale2


@pytest.mark.parametrize("link", ["identity", "logit"])
def test_surrogate_rescaling_leaves_estimates_unchanged(link):
    s = base_scenario(2, "binary" if link == "logit" else "continuous")
    main, validation = generate_scenario_data(s, replicate_seed(13, 4))
    scaled_main = Dataset(
        {"z": 3.0 * main.col("z"), "v": main.col("v"), "y": main.col("y")},
        arm="main",
        outcome_type=main.outcome_type,
    )
    scaled_validation = Dataset(
        {"x": validation.col("x"), "z": 3.0 * validation.col("z"), "v": validation.col("v")},
        arm="validation",
        outcome_type=validation.outcome_type,
    )
    spec = OutcomeModelSpec(link=link)
    for label in STRATEGY_LABELS:
        strategy = AdjustmentStrategy.from_label(label, ("v",))
        a = estimate_crs(main, validation, strategy, spec)
        b = estimate_crs(scaled_main, scaled_validation, strategy, spec)
        assert np.max(np.abs(a.beta - b.beta)) < 1e-10
        assert abs(a.se_beta1 - b.se_beta1) < 1e-10
        assert abs(a.ci95[0] - b.ci95[0]) < 1e-10


def test_ci_is_wald_with_pinned_z():
    s = base_scenario(1)
    main, validation = generate_scenario_data(s, replicate_seed(17, 5))
    res = estimate_crs(main, validation, AdjustmentStrategy.from_label("OM", ("v",)))
    lo, hi = res.ci95
    assert lo == pytest.approx(res.beta1 - 1.959964 * res.se_beta1, abs=1e-14)
    assert hi == pytest.approx(res.beta1 + 1.959964 * res.se_beta1, abs=1e-14)


def test_logit_link_requires_binary_outcome():
    s = base_scenario(1)
    main, validation = generate_scenario_data(s, replicate_seed(19, 6))
    with pytest.raises(SchemaError):
        estimate_crs(
            main, validation,
            AdjustmentStrategy.from_label("OM", ("v",)),
            OutcomeModelSpec(link="logit"),
        )
