"""Command-line surface: estimate, advise, simulate, verify, lasso-mem, catalog.

The CLI is a thin shell: every number it prints comes from a library call
that is equally reachable from tests.  Exit codes: 0 ok, 2 usage or schema
problem, 3 numeric failure, 4 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys

import numpy as np

from . import __version__
from .advisor import (
    CounterexampleParams,
    collection_note,
    recommend,
    validity_matrix,
    verify_counterexample,
    verify_validity_table,
)
from .core import (
    AdjustmentStrategy,
    DagRole,
    Dataset,
    OutcomeModelSpec,
    STRATEGY_LABELS,
    classify_role,
    role_from_index,
    validate_dataset,
)
from .errors import CalibraError, SchemaError
from .lasso import data_driven_mem_estimate
from .estimators import estimate_crs, estimate_with_interaction, naive_estimate
from .simulator import RNG_VERSION, find_scenario, run_scenario, scenario_catalog

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3
EXIT_VERIFY = 4


def _fmt(value) -> str:
    """Human-readable numbers: 4 significant digits."""
    if value is None:
        return "-"
    if isinstance(value, bool):
        return "yes" if value else "no"
    if isinstance(value, float):
        return f"{value:.4g}"
    return str(value)


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if hasattr(obj, "__dict__"):
        return vars(obj)
    raise TypeError(f"not serializable: {type(obj)}")


def _config_hash(args: argparse.Namespace) -> str:
    payload = {k: v for k, v in sorted(vars(args).items()) if k not in ("func",)}
    blob = json.dumps(payload, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _repro_block(args: argparse.Namespace, seed=None) -> dict:
    block = {
        "version": __version__,
        "rng": RNG_VERSION,
        "config_hash": _config_hash(args),
    }
    if seed is not None:
        block["seed"] = seed
    return block


def _write_output(payload, path: str | None, fmt: str, rows: list[dict] | None = None):
    if fmt == "json":
        text = json.dumps(payload, indent=2, sort_keys=True, default=_json_default) + "\n"
    elif fmt == "csv":
        if rows is None:
            raise ValueError("csv output needs tabular rows")
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
        text = buf.getvalue()
    elif fmt == "md":
        if rows is None:
            raise ValueError("md output needs tabular rows")
        headers = list(rows[0].keys())
        lines = ["| " + " | ".join(headers) + " |", "|" + "|".join("---" for _ in headers) + "|"]
        for row in rows:
            lines.append("| " + " | ".join(_fmt(row[h]) for h in headers) + " |")
        text = "\n".join(lines) + "\n"
    else:
        raise ValueError(f"unknown format {fmt!r}")
    if path:
        with open(path, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------


def read_dataset(path: str, arm: str, outcome_type: str) -> Dataset:
    """Load one arm from a headered CSV with '.' decimals."""
    if not os.path.exists(path):
        raise SchemaError(f"file not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        names = []
        for raw in header:
            name = raw.strip()
            names.append(name.lower() if name.lower() in ("x", "y", "z") else name)
        if len(set(names)) != len(names):
            raise SchemaError(f"{path}: duplicate column names in header")
        columns: list[list[float]] = [[] for _ in names]
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(names):
                raise SchemaError(f"{path}:{lineno}: expected {len(names)} fields, got {len(row)}")
            for i, cell in enumerate(row):
                try:
                    columns[i].append(float(cell))
                except ValueError:
                    raise SchemaError(
                        f"{path}:{lineno}: column {names[i]!r} has non-numeric value {cell!r}"
                    ) from None
    try:
        data = Dataset(
            {name: np.array(vals) for name, vals in zip(names, columns)},
            arm=arm,
            outcome_type=outcome_type,
        )
    except ValueError as err:
        raise SchemaError(f"{path}: {err}") from None
    violations = validate_dataset(data)
    if violations:
        raise SchemaError([f"{path}: {v}" for v in violations])
    return data


def _parse_role(text: str) -> DagRole:
    """Accept a dag index 1..8 or an arrow tag like X-Y, -ZY, ---."""
    text = text.strip()
    if text.isdigit():
        return role_from_index(int(text))
    tag = text.upper()
    if len(tag) == 3 and set(tag) <= {"X", "Z", "Y", "-"}:
        return classify_role(tag[0] == "X", tag[1] == "Z", tag[2] == "Y")
    raise ValueError(f"cannot parse covariate role {text!r} (use 1..8 or e.g. X-Y)")


def _parse_assignments(items: list[str], what: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for item in items:
        if "=" not in item:
            raise ValueError(f"{what} must look like name=value, got {item!r}")
        name, value = item.split("=", 1)
        out[name.strip()] = value.strip()
    return out


def _split_csv_list(text: str | None) -> tuple[str, ...]:
    if not text:
        return ()
    return tuple(part.strip() for part in text.split(",") if part.strip())


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_estimate(args) -> int:
    outcome_type = "binary" if args.link == "logit" else "continuous"
    main = read_dataset(args.main, "main", outcome_type)
    validation = read_dataset(args.validation, "validation", outcome_type)

    covariates = _split_csv_list(args.covariates)
    placements = _parse_assignments(args.place or [], "--place")
    for name in placements:
        if name not in covariates:
            covariates = covariates + (name,)
    base = AdjustmentStrategy.from_label(args.strategy, covariates)
    if placements:
        in_mem = set(base.in_mem)
        in_out = set(base.in_outcome)
        for name, label in placements.items():
            if label not in STRATEGY_LABELS:
                raise ValueError(f"--place {name}={label}: unknown placement")
            in_mem.discard(name)
            in_out.discard(name)
            if "M" in label or label == "OM":
                in_mem.add(name)
            if label in ("OM", "O-"):
                in_out.add(name)
        base = AdjustmentStrategy(
            covariates=covariates,
            in_mem=tuple(c for c in covariates if c in in_mem),
            in_outcome=tuple(c for c in covariates if c in in_out),
        )

    spec = OutcomeModelSpec(
        link=args.link,
        include_interaction=args.interaction,
        interaction_covariates=_split_csv_list(args.interact_with),
    )
    if args.interaction:
        result = estimate_with_interaction(main, validation, base, spec, sandwich_mode=args.sandwich)
    else:
        result = estimate_crs(main, validation, base, spec, sandwich_mode=args.sandwich)

    naive_beta, naive_se = naive_estimate(main, base.in_outcome, args.link)

    advisor_flags = {}
    roles = {k: _parse_role(v) for k, v in _parse_assignments(args.roles or [], "--roles").items()}
    for name, role in roles.items():
        if name not in base.covariates:
            continue
        cell = validity_matrix(role)[base.placement(name)]
        if not cell.valid:
            advisor_flags[name] = "biased under declared roles"
        elif cell.caveat:
            advisor_flags[name] = f"valid with caveat: {cell.caveat}"

    report = {
        "command": "estimate",
        "strategy": {
            "label": base.label,
            "in_mem": base.in_mem,
            "in_outcome": base.in_outcome,
        },
        "link": result.link,
        "beta": dict(zip(result.beta_names, result.beta.tolist())),
        "beta1": result.beta1,
        "se_beta1": result.se_beta1,
        "ci95": result.ci95,
        "mem": {
            "alpha": result.mem.alpha.tolist(),
            "residual_var": result.mem.residual_var,
            "covariates": result.mem.included_covariates,
        },
        "naive_beta": naive_beta,
        "naive_se": naive_se,
        "delta_vs_naive": result.beta1 - naive_beta,
        "n_main": result.n_main,
        "n_validation": result.n_validation,
        "sandwich_cov": result.sandwich_cov,
        "advisor_flags": advisor_flags,
        "reproducibility": _repro_block(args),
    }
    if result.link == "logit":
        or_hat, or_ci = result.odds_ratio()
        report["odds_ratio"] = {"estimate": or_hat, "ci95": or_ci}
        report["condition_report"] = vars(result.condition_report)

    print(f"corrected effect ({base.label or 'mixed'}, {result.link} link)")
    print(f"  beta1      {_fmt(result.beta1)}  (se {_fmt(result.se_beta1)})")
    print(f"  ci95       [{_fmt(result.ci95[0])}, {_fmt(result.ci95[1])}]")
    if result.link == "logit":
        or_hat, or_ci = result.odds_ratio()
        print(f"  corrected OR {_fmt(or_hat)}  ci95 [{_fmt(or_ci[0])}, {_fmt(or_ci[1])}]  se {_fmt(result.se_beta1)}")
        cond = result.condition_report
        print(
            f"  approximation: condition I {_fmt(cond.condition_i)} "
            f"(var(x|z,v)*beta^2 = {_fmt(cond.product)}), condition II {_fmt(cond.condition_ii)} "
            f"(prevalence {_fmt(cond.prevalence)}), overall {_fmt(cond.overall)}"
        )
    print(f"  naive beta {_fmt(naive_beta)}  delta {_fmt(result.beta1 - naive_beta)}")
    for name, flag in advisor_flags.items():
        print(f"  advisor: {name}: {flag}")
    _write_output(report, args.out, args.format, rows=[{
        "strategy": base.label, "link": result.link, "beta1": result.beta1,
        "se_beta1": result.se_beta1, "ci_lo": result.ci95[0], "ci_hi": result.ci95[1],
        "naive_beta": naive_beta,
    }])
    return EXIT_OK


def cmd_advise(args) -> int:
    assignments = _parse_assignments(args.role or [], "--role")
    declared = _split_csv_list(args.covariates)
    missing = [c for c in declared if c not in assignments]
    if missing:
        raise ValueError(f"covariates without a declared role: {', '.join(missing)}")
    if not assignments:
        raise ValueError("no covariate roles declared (use --role name=1..8 or name=X-Y)")
    roles = {name: _parse_role(value) for name, value in assignments.items()}
    strategy, rationale = recommend(roles)
    print("covariate adjustment plan")
    for name in roles:
        print(f"  {name:20s} -> {strategy.placement(name)}")
    for line in rationale:
        print(f"  note: {line}")
    note = collection_note(roles)
    if note:
        print(f"  note: {note}")
    payload = {
        "command": "advise",
        "placements": {name: strategy.placement(name) for name in roles},
        "in_mem": strategy.in_mem,
        "in_outcome": strategy.in_outcome,
        "rationale": rationale,
        "collection_note": note,
        "reproducibility": _repro_block(args),
    }
    if args.out:
        _write_output(payload, args.out, args.format, rows=[
            {"covariate": name, "role": str(roles[name]), "placement": strategy.placement(name)}
            for name in roles
        ])
    return EXIT_OK


def cmd_simulate(args) -> int:
    if args.reps is not None and args.reps <= 0:
        raise ValueError("--reps must be a positive integer")
    try:
        scenario = find_scenario(args.scenario)
    except KeyError as err:
        raise ValueError(str(err)) from None
    if args.reps:
        from dataclasses import replace

        scenario = replace(scenario, n_reps=args.reps)
    report = run_scenario(scenario, args.seed, n_jobs=args.threads)
    rows = report.rows()
    payload = {
        "command": "simulate",
        "scenario": vars(scenario) | {"n_ms": scenario.n_ms},
        "metrics": rows,
        "n_failed": report.n_failed,
        "failures": report.failures,
        "reproducibility": _repro_block(args, seed=args.seed),
    }
    print(f"scenario {scenario.label}: {scenario.n_reps} replicates, seed {args.seed}, "
          f"{report.n_failed} failed")
    header = f"{'strategy':>9} {'%bias':>8} {'emp var':>11} {'sand var':>11} {'ERE':>6} {'cover':>6}"
    print(header)
    for row in rows:
        print(
            f"{row['strategy']:>9} {row['percent_bias']:>8.4g} {row['empirical_variance']:>11.4g} "
            f"{row['mean_sandwich_variance']:>11.4g} {row['ere']:>6.4g} {row['coverage95']:>6.4g}"
        )
    _write_output(payload, args.out, args.format, rows=rows)
    return EXIT_OK


def cmd_verify(args) -> int:
    tamper = None
    if args.tamper:
        dag_str, strategy = args.tamper.split(":", 1)
        tamper = (int(dag_str), strategy)
    cells, witness = verify_validity_table(tamper=tamper)
    all_passed = all(cell.passed for cell in cells)
    print("machine-checked validity table (probability limits vs true effect)")
    for dag_index in range(1, 9):
        row = [c for c in cells if c.dag_index == dag_index]
        rendered = "  ".join(
            f"{c.strategy}:{'PASS' if c.passed else 'FAIL'}"
            f"({'valid' if c.expected_valid else 'biased'},plim={_fmt(c.plim)})"
            for c in row
        )
        print(f"  dag {dag_index}: {rendered}")
    print(
        f"  no-adjustment counterexample at a=b=1: lhs {witness.lhs:.12g} vs rhs {witness.rhs:.12g}"
        f" -> {'distinct' if not witness.equal else 'equal'}"
    )
    failed = [c for c in cells if not c.passed]
    for cell in failed:
        print(f"  FAIL at dag {cell.dag_index}, strategy {cell.strategy}: "
              f"plim {_fmt(cell.plim)}, relative deviation {_fmt(cell.relative_deviation)}")
    payload = {
        "command": "verify",
        "cells": [vars(c) for c in cells],
        "counterexample": vars(witness),
        "passed": all_passed,
        "reproducibility": _repro_block(args),
    }
    if args.out:
        _write_output(payload, args.out, args.format, rows=[vars(c) for c in cells])
    if not all_passed or not (abs(witness.lhs - 5.0 / 3.0) < 1e-12 and not witness.equal):
        return EXIT_VERIFY
    return EXIT_OK


def cmd_lasso_mem(args) -> int:
    outcome_type = "binary" if args.link == "logit" else "continuous"
    main = read_dataset(args.main, "main", outcome_type)
    validation = read_dataset(args.validation, "validation", outcome_type)
    result, report = data_driven_mem_estimate(
        main,
        validation,
        _split_csv_list(args.candidates),
        _split_csv_list(args.confounders),
        k=args.folds,
        seed=args.seed,
        n_boot=args.boot,
        link=args.link,
    )
    print(f"data-driven calibration (best lambda {_fmt(report.best_lambda)})")
    print(f"  retained: {', '.join(report.retained) or '(none)'}")
    print(f"  zeroed:   {', '.join(report.zeroed) or '(none)'}")
    print(f"  beta1 {_fmt(result.beta1)}  bootstrap se {_fmt(result.se_beta1)}  "
          f"ci95 [{_fmt(result.ci95[0])}, {_fmt(result.ci95[1])}]")
    payload = {
        "command": "lasso-mem",
        "beta1": result.beta1,
        "se_beta1": result.se_beta1,
        "ci95_normal": report.ci_normal,
        "ci95_percentile": report.ci_percentile,
        "best_lambda": report.best_lambda,
        "retained": report.retained,
        "zeroed": report.zeroed,
        "surrogate_coef": report.surrogate_coef,
        "lambda_grid": report.lambda_grid,
        "cv_curve": report.cv_curve,
        "coef_path": report.coef_path,
        "n_boot": report.n_boot,
        "reproducibility": _repro_block(args, seed=args.seed),
    }
    if args.out:
        _write_output(payload, args.out, args.format, rows=[
            {"covariate": c, "status": "retained" if c in report.retained else "zeroed"}
            for c in report.candidates
        ])
    return EXIT_OK


def cmd_catalog(args) -> int:
    scenarios = scenario_catalog()
    rows = [
        {
            "label": s.label,
            "dag": s.dag_index,
            "outcome_type": s.outcome_type,
            "eta_v": s.eta_v,
            "theta_x": s.theta_x,
            "theta_v": s.theta_v,
            "beta_x": s.beta_x,
            "beta_v": s.beta_v,
            "v_dist": s.v_dist,
            "n_total": s.n_total,
            "n_vs": s.n_vs,
        }
        for s in scenarios
    ]
    for row in rows:
        print(row["label"])
    if args.out:
        _write_output({"command": "catalog", "scenarios": rows}, args.out, args.format, rows=rows)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser and config plumbing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="calibra",
        description="regression calibration for mismeasured continuous exposures",
    )
    parser.add_argument("--version", action="version", version=f"calibra {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common_output(p):
        p.add_argument("--out", default=None, help="write the report to this path")
        p.add_argument("--format", default="json", choices=("json", "csv", "md"))
        p.add_argument("--config", default=None, help="flat key=value config file")

    p_est = sub.add_parser("estimate", help="corrected exposure effect from two CSV arms")
    p_est.add_argument("--main", required=True)
    p_est.add_argument("--validation", required=True)
    p_est.add_argument("--covariates", default="", help="comma-separated covariate columns")
    p_est.add_argument("--strategy", default="OM", choices=STRATEGY_LABELS)
    p_est.add_argument("--place", action="append", metavar="NAME=LABEL",
                       help="override placement for one covariate (repeatable)")
    p_est.add_argument("--link", default="identity", choices=("identity", "logit"))
    p_est.add_argument("--sandwich", default="model", choices=("model", "empirical"))
    p_est.add_argument("--interaction", action="store_true",
                       help="include exposure-by-covariate interaction terms")
    p_est.add_argument("--interact-with", default="", help="covariates that interact")
    p_est.add_argument("--roles", action="append", metavar="NAME=ROLE",
                       help="declared causal roles for the advisor cross-check")
    common_output(p_est)
    p_est.set_defaults(func=cmd_estimate)

    p_adv = sub.add_parser("advise", help="covariate placement plan from causal roles")
    p_adv.add_argument("--role", action="append", metavar="NAME=ROLE",
                       help="dag index 1..8 or arrow tag like X-Y (repeatable)")
    p_adv.add_argument("--covariates", default="",
                       help="optional full covariate list; all must be tagged")
    common_output(p_adv)
    p_adv.set_defaults(func=cmd_advise)

    p_sim = sub.add_parser("simulate", help="run one catalog scenario")
    p_sim.add_argument("--scenario", required=True)
    p_sim.add_argument("--reps", type=int, default=None)
    p_sim.add_argument("--seed", type=int, default=0)
    p_sim.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    common_output(p_sim)
    p_sim.set_defaults(func=cmd_simulate)

    p_ver = sub.add_parser("verify", help="machine-check the validity table")
    p_ver.add_argument("--tamper", default=None, help=argparse.SUPPRESS)
    common_output(p_ver)
    p_ver.set_defaults(func=cmd_verify)

    p_lasso = sub.add_parser("lasso-mem", help="data-driven calibration model")
    p_lasso.add_argument("--main", required=True)
    p_lasso.add_argument("--validation", required=True)
    p_lasso.add_argument("--candidates", required=True)
    p_lasso.add_argument("--confounders", default="")
    p_lasso.add_argument("--folds", type=int, default=10)
    p_lasso.add_argument("--boot", type=int, default=1000)
    p_lasso.add_argument("--seed", type=int, default=0)
    p_lasso.add_argument("--link", default="identity", choices=("identity", "logit"))
    common_output(p_lasso)
    p_lasso.set_defaults(func=cmd_lasso_mem)

    p_cat = sub.add_parser("catalog", help="list the scenario catalog")
    common_output(p_cat)
    p_cat.set_defaults(func=cmd_catalog)

    return parser


def _config_tokens(path: str) -> list[str]:
    """Turn a flat key=value file into CLI tokens (CLI flags still win)."""
    if not os.path.exists(path):
        raise SchemaError(f"config file not found: {path}")
    tokens: list[str] = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise SchemaError(f"{path}:{lineno}: expected key = value, got {line!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            flag = "--" + key.replace("_", "-")
            if value.lower() in ("true", "false"):
                if value.lower() == "true":
                    tokens.append(flag)
            else:
                tokens.extend([flag, value])
    return tokens


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    # pre-scan for --config; its tokens go right after the subcommand so
    # explicit flags override the file
    if "--config" in argv:
        idx = argv.index("--config")
        if idx + 1 >= len(argv):
            parser.error("--config needs a path")
        try:
            extra = _config_tokens(argv[idx + 1])
        except SchemaError as err:
            print(f"error: {err}", file=sys.stderr)
            return EXIT_USAGE
        argv = [argv[0]] + extra + argv[1:]
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except SchemaError as err:
        for violation in err.violations:
            print(f"schema error: {violation}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except CalibraError as err:
        print(f"numeric error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
