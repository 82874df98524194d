"""Shared fixtures: the documented data-driven-selection DGP.

The omission-bias fixture mimics the age-like covariate story: one covariate
("v") whose calibration contribution conditional on the surrogate is exactly
zero by construction (x gains 0.2 v while z gains 0.1 v, which cancels in
the population regression of x on z and v), yet which systematically drives
both the surrogate and the outcome.  Sixteen pure-noise candidates surround
it, as in a realistic candidate screen.  Omitting v from the outcome stage
leaves the no-adjustment probability limit, 59.26% above the true effect.
"""

import numpy as np
import pytest

from calibra.core import Dataset
from calibra.simulator import Scenario

LASSO_FIXTURE_N_TOTAL = 5000
LASSO_FIXTURE_N_VS = 400
LASSO_FIXTURE_N_NOISE = 16
LASSO_FIXTURE_CANDIDATES = ("v",) + tuple(f"w{j}" for j in range(LASSO_FIXTURE_N_NOISE))


def lasso_fixture_scenario() -> Scenario:
    """The fixture's (v, x, z, y) core as a catalog-style scenario."""
    return Scenario(
        label="lasso-omission-fixture",
        dag_index=4,
        eta_v=0.2,
        theta_x=0.5,
        theta_v=0.1,
        beta_x=0.5,
        beta_v=0.8,
        n_total=LASSO_FIXTURE_N_TOTAL,
        n_vs=LASSO_FIXTURE_N_VS,
        n_reps=1,
    )


def lasso_fixture_arms(seed: int) -> tuple[Dataset, Dataset]:
    rng = np.random.default_rng(seed)
    n, n_vs = LASSO_FIXTURE_N_TOTAL, LASSO_FIXTURE_N_VS
    v = rng.normal(size=n)
    x = 0.2 * v + rng.normal(size=n)
    z = 0.5 * x + 0.1 * v + 0.5 * rng.normal(size=n)
    y = 0.5 * x + 0.8 * v + rng.normal(size=n)
    noise = rng.normal(size=(n, LASSO_FIXTURE_N_NOISE))
    cols_v = {"x": x[:n_vs], "z": z[:n_vs], "v": v[:n_vs]}
    cols_m = {"z": z[n_vs:], "v": v[n_vs:], "y": y[n_vs:]}
    for j in range(LASSO_FIXTURE_N_NOISE):
        cols_v[f"w{j}"] = noise[:n_vs, j]
        cols_m[f"w{j}"] = noise[n_vs:, j]
    return Dataset(cols_m, arm="main"), Dataset(cols_v, arm="validation")


@pytest.fixture(scope="session")
def lasso_fixture():
    return lasso_fixture_arms, lasso_fixture_scenario(), LASSO_FIXTURE_CANDIDATES
