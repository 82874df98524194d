"""Deterministic Monte Carlo engine for the scenario catalog.

Each replicate draws, in order,

    v  ~ N(0,1) or Bernoulli(0.4)
    x  = eta_v * v + e_x,            e_x ~ N(0, sd_ex^2)
    z  = theta_x * x + theta_v * v + e_z,  e_z ~ N(0, sd_ez^2)
    y  = beta_x * x + beta_v * v + e_y     (continuous), or
    y  ~ Bernoulli(expit(logit_intercept + beta_x * x + beta_v * v))

then splits off a uniformly sampled validation subset (keeping x, z, v and
dropping y) and leaves the remainder as the main arm (keeping z, v, y).

Noise convention: the second argument of every N(mean, s) above is a
standard deviation, so sd_ez = 0.5 means variance 0.25.  Replicate streams
are keyed by (master_seed, replicate_index, stream_index) through a
counter-based Philox generator, so results are independent of scheduling
and worker counts.
"""

from __future__ import annotations

import concurrent.futures
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from .core import AdjustmentStrategy, Dataset, OutcomeModelSpec, STRATEGY_LABELS
from .errors import CalibraError, ScenarioError
from .estimators import check_logistic_approx, estimate_crs
from . import __version__ as _pkg_version

RNG_VERSION = "philox-seedseq/1"
COVARIATE = "v"

# stream indices within one replicate
_STREAM_V, _STREAM_EX, _STREAM_EZ, _STREAM_EY, _STREAM_SPLIT = range(5)

FAILURE_THRESHOLD = 0.01


@dataclass(frozen=True)
class Scenario:
    """One data-generating process from the simulation catalog."""

    label: str
    dag_index: int
    eta_v: float
    theta_x: float
    theta_v: float
    beta_x: float
    beta_v: float
    sd_ex: float = 1.0
    sd_ez: float = 0.5
    sd_ey: float = 1.0
    v_dist: str = "standard_normal"
    outcome_type: str = "continuous"
    logit_intercept: float = -5.0
    n_total: int = 5000
    n_vs: int = 400
    n_reps: int = 1000

    def __post_init__(self):
        if not 1 <= self.dag_index <= 8:
            raise ValueError(f"dag_index must be 1..8, got {self.dag_index}")
        if self.n_vs >= self.n_total:
            raise ValueError("n_vs must be smaller than n_total")
        if min(self.sd_ex, self.sd_ez) <= 0 or (self.outcome_type == "continuous" and self.sd_ey <= 0):
            raise ValueError("noise standard deviations must be positive")
        if self.v_dist not in ("standard_normal", "bernoulli"):
            raise ValueError(f"unknown v_dist {self.v_dist!r}")
        if self.outcome_type not in ("continuous", "binary"):
            raise ValueError(f"unknown outcome_type {self.outcome_type!r}")
        affects_x, affects_z, affects_y = _dag_flags(self.dag_index)
        for flag, value, name in (
            (affects_x, self.eta_v, "eta_v"),
            (affects_z, self.theta_v, "theta_v"),
            (affects_y, self.beta_v, "beta_v"),
        ):
            if not flag and value != 0.0:
                raise ValueError(f"{name}={value} inconsistent with dag {self.dag_index}")

    @property
    def n_ms(self) -> int:
        return self.n_total - self.n_vs

    @property
    def var_v(self) -> float:
        return 1.0 if self.v_dist == "standard_normal" else 0.4 * 0.6


def _dag_flags(dag_index: int) -> tuple[bool, bool, bool]:
    from .core import role_from_index

    role = role_from_index(dag_index)
    return role.affects_x, role.affects_z, role.affects_y


def replicate_seed(master_seed: int, rep_index: int) -> int:
    """Derive the per-replicate key; stable across platforms and runs."""
    ss = np.random.SeedSequence(entropy=[int(master_seed), int(rep_index)])
    return int(ss.generate_state(1, np.uint64)[0])


def _stream(rep_seed: int, stream_index: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=[int(rep_seed), int(stream_index)])
    return np.random.Generator(np.random.Philox(ss))


def generate_scenario_data(s: Scenario, rep_seed: int) -> tuple[Dataset, Dataset]:
    """Draw one replicate and split it into (main, validation) arms."""
    n = s.n_total
    if s.v_dist == "standard_normal":
        v = _stream(rep_seed, _STREAM_V).standard_normal(n)
    else:
        v = _stream(rep_seed, _STREAM_V).binomial(1, 0.4, size=n).astype(np.float64)
    x = s.eta_v * v + s.sd_ex * _stream(rep_seed, _STREAM_EX).standard_normal(n)
    z = s.theta_x * x + s.theta_v * v + s.sd_ez * _stream(rep_seed, _STREAM_EZ).standard_normal(n)
    if s.outcome_type == "continuous":
        y = s.beta_x * x + s.beta_v * v + s.sd_ey * _stream(rep_seed, _STREAM_EY).standard_normal(n)
    else:
        prob = expit(s.logit_intercept + s.beta_x * x + s.beta_v * v)
        y = (_stream(rep_seed, _STREAM_EY).random(n) < prob).astype(np.float64)
    order = _stream(rep_seed, _STREAM_SPLIT).permutation(n)
    vs, ms = order[: s.n_vs], order[s.n_vs :]
    validation = Dataset(
        {"x": x[vs], "z": z[vs], COVARIATE: v[vs]},
        arm="validation",
        outcome_type=s.outcome_type,
    )
    main = Dataset(
        {"z": z[ms], COVARIATE: v[ms], "y": y[ms]},
        arm="main",
        outcome_type=s.outcome_type,
    )
    return main, validation


def implied_covariance(s: Scenario) -> dict[str, float]:
    """Second moments of (v, x, z, y) implied by the linear DGP.

    Exact for plims of least-squares fits regardless of the covariate
    distribution, since those depend on second moments only.
    """
    var_v = s.var_v
    var_x = s.eta_v**2 * var_v + s.sd_ex**2
    cov_vx = s.eta_v * var_v
    cov_vz = s.theta_x * cov_vx + s.theta_v * var_v
    cov_xz = s.theta_x * var_x + s.theta_v * cov_vx
    var_z = (
        s.theta_x**2 * var_x
        + s.theta_v**2 * var_v
        + 2.0 * s.theta_x * s.theta_v * cov_vx
        + s.sd_ez**2
    )
    cov_vy = s.beta_x * cov_vx + s.beta_v * var_v
    cov_xy = s.beta_x * var_x + s.beta_v * cov_vx
    cov_zy = s.beta_x * cov_xz + s.beta_v * cov_vz
    var_y = (
        s.beta_x**2 * var_x
        + s.beta_v**2 * var_v
        + 2.0 * s.beta_x * s.beta_v * cov_vx
        + s.sd_ey**2
    )
    return {
        "var_v": var_v,
        "var_x": var_x,
        "var_z": var_z,
        "var_y": var_y,
        "cov_vx": cov_vx,
        "cov_vz": cov_vz,
        "cov_vy": cov_vy,
        "cov_xz": cov_xz,
        "cov_xy": cov_xy,
        "cov_zy": cov_zy,
    }


def percent_bias(estimates: np.ndarray, truth: float) -> float:
    """100 * (mean(estimates) - truth) / truth."""
    if truth == 0.0:
        raise ValueError("percent bias is undefined for a zero true effect")
    estimates = np.asarray(estimates, dtype=np.float64)
    return float(100.0 * (estimates.mean() - truth) / truth)


@dataclass(frozen=True)
class StrategyMetrics:
    percent_bias: float
    empirical_variance: float
    mean_sandwich_variance: float
    ere: float
    coverage95: float
    condition_ok_fraction: float | None
    n_used: int


@dataclass(frozen=True)
class SimulationReport:
    scenario: Scenario
    master_seed: int
    n_reps: int
    n_failed: int
    failures: tuple[tuple[int, str, str], ...]
    strategies: dict[str, StrategyMetrics]
    rng_version: str = RNG_VERSION
    engine_version: str = _pkg_version

    def rows(self) -> list[dict]:
        out = []
        for label in STRATEGY_LABELS:
            m = self.strategies[label]
            out.append(
                {
                    "scenario": self.scenario.label,
                    "outcome_type": self.scenario.outcome_type,
                    "strategy": label,
                    "percent_bias": m.percent_bias,
                    "empirical_variance": m.empirical_variance,
                    "mean_sandwich_variance": m.mean_sandwich_variance,
                    "ere": m.ere,
                    "coverage95": m.coverage95,
                    "condition_ok_fraction": m.condition_ok_fraction,
                    "n_used": m.n_used,
                }
            )
        return out


def _run_replicate(s: Scenario, master_seed: int, rep: int) -> dict[str, tuple] | tuple[str, str]:
    """Per-strategy (beta1, sandwich var of beta1, covered, condition_ok)."""
    main, validation = generate_scenario_data(s, replicate_seed(master_seed, rep))
    spec = OutcomeModelSpec(link="identity" if s.outcome_type == "continuous" else "logit")
    out: dict[str, tuple] = {}
    for label in STRATEGY_LABELS:
        strategy = AdjustmentStrategy.from_label(label, (COVARIATE,))
        try:
            res = estimate_crs(main, validation, strategy, spec)
        except CalibraError as err:
            return (label, f"{type(err).__name__}: {err}")
        covered = res.ci95[0] <= s.beta_x <= res.ci95[1]
        cond_ok = None
        if res.condition_report is not None:
            # the design's approximation check uses the true effect size
            cond_ok = check_logistic_approx(
                res.mem,
                s.beta_x,
                res.condition_report.prevalence,
                res.condition_report.homoskedasticity_p,
            ).overall
        out[label] = (res.beta1, res.se_beta1**2, covered, cond_ok)
    return out


def _replicate_range(args) -> list[tuple[int, object]]:
    s, master_seed, reps = args
    return [(r, _run_replicate(s, master_seed, r)) for r in reps]


def run_scenario(s: Scenario, master_seed: int, *, n_jobs: int = 1) -> SimulationReport:
    """Run every strategy on every replicate and aggregate the table metrics.

    All four strategies always run, including the analytically biased ones.
    A replicate that fails for any strategy is recorded and excluded from all
    strategies (so efficiency ratios compare on common replicates); more than
    1% failures aborts the scenario.
    """
    reps = list(range(s.n_reps))
    if n_jobs <= 1 or s.n_reps < 4:
        results = _replicate_range((s, master_seed, reps))
    else:
        chunks = [(s, master_seed, list(chunk)) for chunk in np.array_split(reps, n_jobs * 4) if len(chunk)]
        results = []
        with concurrent.futures.ProcessPoolExecutor(max_workers=n_jobs) as pool:
            for part in pool.map(_replicate_range, chunks):
                results.extend(part)
    results.sort(key=lambda item: item[0])

    failures: list[tuple[int, str, str]] = []
    kept: dict[str, list[tuple]] = {label: [] for label in STRATEGY_LABELS}
    for rep, payload in results:
        if isinstance(payload, tuple):
            failures.append((rep, payload[0], payload[1]))
            continue
        for label in STRATEGY_LABELS:
            kept[label].append(payload[label])

    n_failed = len(failures)
    if n_failed > FAILURE_THRESHOLD * s.n_reps:
        raise ScenarioError(
            f"{n_failed}/{s.n_reps} replicates failed (> {FAILURE_THRESHOLD:.0%}); "
            f"first failure: rep {failures[0][0]} [{failures[0][1]}] {failures[0][2]}"
        )

    emp_var = {
        label: float(np.var([row[0] for row in kept[label]], ddof=1))
        for label in STRATEGY_LABELS
    }
    strategies: dict[str, StrategyMetrics] = {}
    for label in STRATEGY_LABELS:
        rows = kept[label]
        betas = np.array([row[0] for row in rows])
        conds = [row[3] for row in rows]
        strategies[label] = StrategyMetrics(
            percent_bias=percent_bias(betas, s.beta_x),
            empirical_variance=emp_var[label],
            mean_sandwich_variance=float(np.mean([row[1] for row in rows])),
            ere=emp_var["OM"] / emp_var[label],
            coverage95=float(np.mean([row[2] for row in rows])),
            condition_ok_fraction=(
                float(np.mean([bool(c) for c in conds])) if conds[0] is not None else None
            ),
            n_used=len(rows),
        )
    return SimulationReport(
        scenario=s,
        master_seed=master_seed,
        n_reps=s.n_reps,
        n_failed=n_failed,
        failures=tuple(failures[:20]),
        strategies=strategies,
    )


# ---------------------------------------------------------------------------
# Scenario catalog
# ---------------------------------------------------------------------------

_BASE = {
    1: dict(eta_v=0.0, theta_v=0.0, beta_v=0.8),
    2: dict(eta_v=0.0, theta_v=0.1, beta_v=0.8),
    3: dict(eta_v=0.4, theta_v=0.0, beta_v=0.8),
    4: dict(eta_v=0.4, theta_v=0.1, beta_v=0.8),
    5: dict(eta_v=0.0, theta_v=0.0, beta_v=0.0),
    6: dict(eta_v=0.0, theta_v=0.1, beta_v=0.0),
    7: dict(eta_v=0.4, theta_v=0.0, beta_v=0.0),
    8: dict(eta_v=0.4, theta_v=0.1, beta_v=0.0),
}

# variant name -> field overrides applied on top of the dag base case
_VARIANTS = {
    "base": {},
    "small-rxzv": dict(theta_x=0.2),
    "small-beta": dict(beta_x=0.1),
    "neg-rvx": dict(eta_v=-0.4),
    "small-rvx": dict(eta_v=0.2),
    "large-me": dict(theta_v=2.0),
    "weak-bv": dict(beta_v=0.2),
    "binary-v": dict(v_dist="bernoulli"),
    "small-nms": {},  # handled via n_total below
    "small-nvs": dict(n_vs=150),
}

_VARIANTS_BY_DAG = {
    1: ("base", "small-rxzv", "small-beta", "weak-bv", "binary-v", "small-nms", "small-nvs"),
    2: ("base", "small-rxzv", "small-beta", "large-me", "weak-bv", "binary-v", "small-nms", "small-nvs"),
    3: ("base", "small-rxzv", "small-beta", "neg-rvx", "small-rvx", "weak-bv", "binary-v", "small-nms", "small-nvs"),
    4: ("base", "small-rxzv", "small-beta", "neg-rvx", "small-rvx", "large-me", "weak-bv", "binary-v", "small-nms", "small-nvs"),
    5: ("base", "small-rxzv", "small-beta", "binary-v", "small-nms", "small-nvs"),
    6: ("base", "small-rxzv", "small-beta", "large-me", "binary-v", "small-nms", "small-nvs"),
    7: ("base", "small-rxzv", "small-beta", "neg-rvx", "small-rvx", "binary-v", "small-nms", "small-nvs"),
    8: ("base", "small-rxzv", "small-beta", "neg-rvx", "small-rvx", "large-me", "binary-v", "small-nms", "small-nvs"),
}


def base_scenario(dag_index: int, outcome_type: str = "continuous", n_reps: int = 1000) -> Scenario:
    """The headline parameterization for one dag and outcome type."""
    coef = _BASE[dag_index]
    return Scenario(
        label=f"dag{dag_index}-base-{outcome_type}",
        dag_index=dag_index,
        theta_x=0.5,
        beta_x=0.5,
        outcome_type=outcome_type,
        n_total=5000 if outcome_type == "continuous" else 10000,
        n_reps=n_reps,
        **coef,
    )


def scenario_catalog() -> list[Scenario]:
    """Full transcription of the simulation design, both outcome types.

    Sample-size variants treat the headline n as the total before the
    validation subset is carved out: small-nms drops the total to 2,000
    (continuous) or 5,000 (binary); small-nvs shrinks the validation subset
    to 150.  The narrative variant carries the alternative coefficient set
    (eta_v 0.5, theta_x 0.8, theta_v 0.5, beta_v 0.5) quoted alongside the
    tables; it is not checked against any golden numbers.
    """
    out: list[Scenario] = []
    for outcome_type in ("continuous", "binary"):
        for dag_index in range(1, 9):
            for variant in _VARIANTS_BY_DAG[dag_index]:
                base = base_scenario(dag_index, outcome_type)
                overrides = dict(_VARIANTS[variant])
                if variant == "small-nms":
                    overrides["n_total"] = 2000 if outcome_type == "continuous" else 5000
                # variant overrides only apply where the dag allows the arrow
                flags = dict(zip(("eta_v", "theta_v", "beta_v"), _dag_flags(dag_index)))
                overrides = {
                    k: v
                    for k, v in overrides.items()
                    if k not in flags or flags[k]
                }
                out.append(
                    replace(base, label=f"dag{dag_index}-{variant}-{outcome_type}", **overrides)
                )
            narrative = {
                key: coef * flag
                for key, coef, flag in zip(
                    ("eta_v", "theta_v", "beta_v"), (0.5, 0.5, 0.5), _dag_flags(dag_index)
                )
            }
            out.append(
                replace(
                    base_scenario(dag_index, outcome_type),
                    label=f"dag{dag_index}-narrative-{outcome_type}",
                    theta_x=0.8,
                    **narrative,
                )
            )
    return out


def find_scenario(label: str) -> Scenario:
    for s in scenario_catalog():
        if s.label == label:
            return s
    raise KeyError(f"no scenario labelled {label!r} in the catalog")
