from dataclasses import replace

import numpy as np
import pytest

import calibra.simulator as sim
from calibra.errors import CalibraError, ScenarioError
from calibra.simulator import (
    Scenario,
    base_scenario,
    find_scenario,
    generate_scenario_data,
    percent_bias,
    replicate_seed,
    run_scenario,
    scenario_catalog,
)


def test_generate_is_deterministic():
    s = base_scenario(3)
    seed = replicate_seed(99, 4)
    m1, v1 = generate_scenario_data(s, seed)
    m2, v2 = generate_scenario_data(s, seed)
    for name in m1.columns:
        assert np.array_equal(m1.col(name), m2.col(name))
    for name in v1.columns:
        assert np.array_equal(v1.col(name), v2.col(name))


def test_generate_split_sizes_and_columns():
    s = base_scenario(1)
    main, validation = generate_scenario_data(s, replicate_seed(1, 0))
    assert validation.n == 400 and main.n == 4600
    assert set(validation.columns) == {"x", "z", "v"}
    assert set(main.columns) == {"z", "v", "y"}


def test_partial_correlation_of_surrogate_given_covariate():
    # corr(x, z | v) at the design's calibration strength is about 0.71
    s = replace(base_scenario(3), n_total=5000, n_vs=400)
    main, validation = generate_scenario_data(s, replicate_seed(2, 1))
    x = validation.col("x")
    z = validation.col("z")
    v = validation.col("v")
    allx = np.concatenate([x])
    design = np.column_stack([np.ones(len(v)), v])

    def resid(col):
        coef, *_ = np.linalg.lstsq(design, col, rcond=None)
        return col - design @ coef

    r = np.corrcoef(resid(x), resid(z))[0, 1]
    assert r == pytest.approx(0.71, abs=0.05)
    assert allx.shape[0] == 400


def test_binary_base_case_is_rare_outcome():
    s = base_scenario(1, "binary")
    main, _ = generate_scenario_data(s, replicate_seed(3, 2))
    assert main.col("y").mean() < 0.05


def test_bernoulli_covariate_variant():
    s = find_scenario("dag3-binary-v-continuous")
    _, validation = generate_scenario_data(s, replicate_seed(4, 3))
    values = set(np.unique(validation.col("v")))
    assert values <= {0.0, 1.0}


def test_percent_bias_examples():
    assert percent_bias(np.array([0.5, 0.5]), 0.5) == 0.0
    assert percent_bias(np.array([0.985]), 0.5) == pytest.approx(97.0)
    assert percent_bias(np.array([0.25]), 0.5) == pytest.approx(-50.0)
    with pytest.raises(ValueError):
        percent_bias(np.array([1.0]), 0.0)


def test_catalog_has_expected_entries():
    catalog = scenario_catalog()
    labels = [s.label for s in catalog]
    assert len(labels) == len(set(labels))
    big_me = find_scenario("dag4-large-me-continuous")
    assert big_me.theta_v == 2.0
    binary_base = find_scenario("dag1-base-binary")
    assert binary_base.n_total == 10_000
    assert binary_base.n_vs == 400
    assert binary_base.logit_intercept == -5.0
    narrative = find_scenario("dag4-narrative-continuous")
    assert narrative.theta_x == 0.8 and narrative.eta_v == 0.5


def test_catalog_scenarios_satisfy_their_invariants():
    for s in scenario_catalog():
        assert 1 <= s.dag_index <= 8
        assert s.n_vs < s.n_total
        # coefficient flags consistent with the dag (enforced at construction)
        Scenario(**vars(s))


def test_unknown_scenario_label():
    with pytest.raises(KeyError):
        find_scenario("dag9-base-continuous")


def test_scenario_coefficient_consistency_enforced():
    with pytest.raises(ValueError, match="eta_v"):
        Scenario(label="bad", dag_index=1, eta_v=0.3, theta_x=0.5, theta_v=0.0,
                 beta_x=0.5, beta_v=0.8)


def test_run_scenario_report_shape_and_ere_normalization():
    s = replace(base_scenario(5), n_reps=60)
    report = run_scenario(s, 11)
    assert set(report.strategies) == {"OM", "--", "-M", "O-"}
    assert report.strategies["OM"].ere == 1.0
    for metrics in report.strategies.values():
        assert 0.0 <= metrics.coverage95 <= 1.0
        assert metrics.n_used == 60
        assert metrics.condition_ok_fraction is None
    assert report.n_failed == 0
    assert report.rng_version == "philox-seedseq/1"


def test_run_scenario_deterministic_across_worker_counts():
    s = replace(base_scenario(2), n_reps=24)
    serial = run_scenario(s, 17, n_jobs=1)
    parallel = run_scenario(s, 17, n_jobs=2)
    for label in serial.strategies:
        a, b = serial.strategies[label], parallel.strategies[label]
        assert a.percent_bias == b.percent_bias
        assert a.empirical_variance == b.empirical_variance
        assert a.mean_sandwich_variance == b.mean_sandwich_variance
        assert a.coverage95 == b.coverage95


def test_failed_replicates_recorded_and_excluded(monkeypatch):
    calls = {"n": 0}
    real = sim.estimate_crs

    def flaky(main, validation, strategy, spec):
        calls["n"] += 1
        raise CalibraError("boom")

    s = replace(base_scenario(5), n_reps=100)
    baseline = run_scenario(s, 23)

    def sometimes(main, validation, strategy, spec):
        # fail exactly one replicate: the one whose first column matches rep 7
        if np.array_equal(
            main.col("z"), generate_scenario_data(s, replicate_seed(23, 7))[0].col("z")
        ):
            raise CalibraError("injected failure")
        return real(main, validation, strategy, spec)

    monkeypatch.setattr(sim, "estimate_crs", sometimes)
    report = run_scenario(s, 23)
    assert report.n_failed == 1
    assert report.failures[0][0] == 7
    assert all(m.n_used == 99 for m in report.strategies.values())
    assert report.strategies["OM"].percent_bias != baseline.strategies["OM"].percent_bias

    monkeypatch.setattr(sim, "estimate_crs", flaky)
    with pytest.raises(ScenarioError):
        run_scenario(s, 23)
    assert calls["n"] > 0


def test_monte_carlo_convergence_doubling_reps():
    s = replace(base_scenario(5), n_reps=300)
    half = run_scenario(s, 31)
    full = run_scenario(replace(s, n_reps=600), 31)
    for label in ("OM", "--", "-M", "O-"):
        delta = abs(half.strategies[label].percent_bias - full.strategies[label].percent_bias)
        assert delta < 2.0


def test_report_rows_layout():
    s = replace(base_scenario(6), n_reps=30)
    rows = run_scenario(s, 37).rows()
    assert [r["strategy"] for r in rows] == ["OM", "--", "-M", "O-"]
    assert all(r["scenario"] == "dag6-base-continuous" for r in rows)
    assert {"percent_bias", "empirical_variance", "mean_sandwich_variance", "ere",
            "coverage95"} <= set(rows[0])
