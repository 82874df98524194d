import numpy as np
import pytest

from calibra.core import Dataset
from calibra.errors import InsufficientDataError, SchemaError, SingularMatrixError
from calibra.mem import fit_mem, impute_x, mem_residuals
from calibra.simulator import base_scenario, generate_scenario_data, replicate_seed
from dataclasses import replace


def _validation(x, z, **covs):
    return Dataset({"x": np.asarray(x, float), "z": np.asarray(z, float), **covs}, arm="validation")


def _main(z, **covs):
    cols = {"z": np.asarray(z, float), "y": np.zeros(len(z))}
    cols.update({k: np.asarray(v, float) for k, v in covs.items()})
    return Dataset(cols, arm="main")


def test_perfect_surrogate():
    rng = np.random.default_rng(0)
    x = rng.normal(size=50)
    v = rng.normal(size=50)
    fit = fit_mem(_validation(x, x, v=v), ("v",))
    assert np.allclose(fit.alpha, [0.0, 1.0, 0.0], atol=1e-8)
    assert fit.residual_var < 1e-16


def test_three_point_hand_fit():
    fit = fit_mem(_validation([1.0, 2.0, 3.0], [1.0, 3.0, 5.0]))
    assert np.allclose(fit.alpha, [0.5, 0.5], atol=1e-12)


def test_large_sample_slope_matches_covariance_ratio():
    # cov(x, z) / var(z) = 0.5 / 0.5 = 1 when v plays no role
    s = replace(base_scenario(5), n_total=100_000, n_vs=99_000)
    _, validation = generate_scenario_data(s, replicate_seed(123, 0))
    fit = fit_mem(validation, ())
    assert abs(fit.alpha[1] - 1.0) < 0.05


def test_impute_identity_calibration():
    fit = fit_mem(_validation([0.0, 1.0, 2.0], [0.0, 1.0, 2.0]))
    out = impute_x(_main([2.0, 3.0]), fit)
    assert np.allclose(out, [2.0, 3.0], atol=1e-12)


def test_impute_affine():
    fit = fit_mem(_validation([2.0, 3.0, 1.5], [2.0, 4.0, 1.0]))
    # alpha = (1, 0.5) for this exact affine relation x = 1 + z/2
    assert np.allclose(fit.alpha, [1.0, 0.5], atol=1e-10)
    assert np.allclose(impute_x(_main([2.0, 4.0]), fit), [2.0, 3.0], atol=1e-10)


def test_in_sample_correlation_equals_multiple_r():
    rng = np.random.default_rng(8)
    n = 400
    v = rng.normal(size=n)
    x = 0.4 * v + rng.normal(size=n)
    z = 0.5 * x + 0.1 * v + 0.5 * rng.normal(size=n)
    validation = _validation(x, z, v=v)
    fit = fit_mem(validation, ("v",))
    eta = impute_x(_main(z, v=v), fit)
    r_fit = np.corrcoef(eta, x)[0, 1]
    resid = mem_residuals(validation, fit)
    multiple_r = np.sqrt(1.0 - resid @ resid / np.sum((x - x.mean()) ** 2))
    assert abs(r_fit - multiple_r) < 1e-10


def test_scale_equivariance_of_imputation():
    rng = np.random.default_rng(21)
    n = 300
    v = rng.normal(size=n)
    x = 0.4 * v + rng.normal(size=n)
    z = 0.5 * x + 0.5 * rng.normal(size=n)
    zm = rng.normal(size=80)
    vm = rng.normal(size=80)
    for c in (3.0, -0.25):
        fit = fit_mem(_validation(x, z, v=v), ("v",))
        fit_scaled = fit_mem(_validation(x, c * z, v=v), ("v",))
        assert abs(fit_scaled.alpha[1] - fit.alpha[1] / c) < 1e-10
        eta = impute_x(_main(zm, v=vm), fit)
        eta_scaled = impute_x(_main(c * zm, v=vm), fit_scaled)
        assert np.max(np.abs(eta - eta_scaled)) < 1e-12


def test_residual_orthogonality():
    rng = np.random.default_rng(13)
    n = 500
    v = rng.normal(size=n)
    x = rng.normal(size=n)
    z = x + rng.normal(size=n)
    validation = _validation(x, z, v=v)
    fit = fit_mem(validation, ("v",))
    resid = mem_residuals(validation, fit)
    design = np.column_stack([np.ones(n), z, v])
    assert np.max(np.abs(design.T @ resid)) < 1e-8 * n


def test_residual_var_scaling_identity():
    rng = np.random.default_rng(17)
    n = 90
    x = rng.normal(size=n)
    z = x + rng.normal(size=n)
    validation = _validation(x, z)
    fit = fit_mem(validation, ())
    resid = mem_residuals(validation, fit)
    assert fit.residual_var == pytest.approx(np.mean(resid**2) * n / (n - 2), rel=1e-12)


def test_missing_covariate_in_main_is_schema_error():
    fit = fit_mem(
        _validation(
            [1.0, 2.0, 0.5, 3.0],
            [1.0, 2.0, 0.0, 2.5],
            v=np.array([0.1, -0.2, 0.3, 0.4]),
        ),
        ("v",),
    )
    with pytest.raises(SchemaError):
        impute_x(_main([1.0, 2.0]), fit)


def test_insufficient_rows():
    with pytest.raises(InsufficientDataError):
        fit_mem(_validation([1.0, 2.0], [1.0, 2.0]))


def test_collinear_covariate_is_singular():
    z = np.array([1.0, 2.0, 3.0, 4.0])
    with pytest.raises(SingularMatrixError):
        fit_mem(_validation([1.0, 2.0, 2.5, 4.0], z, twice=2 * z), ("twice",))
