"""Command-line front end: estimate on CSV data, run simulations, diagnose.

Exit codes: 0 success, 2 usage error, 3 input error, 4 numeric failure,
5 identification failure.  The environment variable MISTERI_SEED, when set,
overrides any --seed flag.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys

import numpy as np
from scipy import stats

from .errors import IdentificationError, InputError, MisteriError, NumericError
from .estimators import EstimateResult, cmle_fit
from .likelihood import KAPPA_WARN_THRESHOLD, het_test
from .model import Dataset
from .simulation import (
    Scenario,
    default_mixture,
    fit_method,
    generate,
    run_monte_carlo,
    summary_to_json_dict,
    summary_to_row,
    write_dataset_csv,
    write_summary_csv,
    SUMMARY_COLUMNS,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_INPUT = 3
EXIT_NUMERIC = 4
EXIT_IDENTIFICATION = 5

_SCENARIO_ALIASES = {
    "table1": "table1_normal",
    "table2": "table2_weak_many",
    "table3": "table3_mixture",
    "null": "null_effect",
    "valid-iv": "valid_iv",
}

_METHOD_ALIASES = {
    "one-step": "one_step",
    "three-stage": "three_stage",
    "closed-form": "closed_form",
}


def _canonical_method(name: str) -> str:
    return _METHOD_ALIASES.get(name, name)


def _canonical_design(name: str) -> str:
    return _SCENARIO_ALIASES.get(name, name)


def read_dataset_csv(path: str, outcome: str, treatment: str, instruments: list[str] | None):
    """Load a header-first CSV into a Dataset; strict about cells.

    Missing values are not supported: an empty or non-numeric cell is an
    input error reported with its row number and column name.
    """
    try:
        handle = open(path, newline="")
    except OSError as exc:
        raise InputError(f"cannot read input file {path!r}: {exc}") from exc
    with handle:
        reader = csv.reader(handle)
        try:
            header = [name.strip() for name in next(reader)]
        except StopIteration:
            raise InputError(f"empty input file {path!r}") from None
        if instruments is None:
            instruments = [c for c in header if c not in (outcome, treatment)]
            if not instruments:
                raise InputError("no instrument columns left after outcome/treatment mapping")
        for name in [outcome, treatment, *instruments]:
            if name not in header:
                raise InputError(f"unmapped column {name!r}")
        indices = [header.index(outcome), header.index(treatment)] + [
            header.index(name) for name in instruments
        ]
        names = [outcome, treatment, *instruments]
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise InputError(f"row {lineno} has {len(row)} cells, expected {len(header)}")
            parsed = []
            for idx, name in zip(indices, names):
                cell = row[idx].strip()
                if not cell:
                    raise InputError(f"missing value at row {lineno}, column {name!r}")
                try:
                    parsed.append(float(cell))
                except ValueError:
                    raise InputError(
                        f"non-numeric value {cell!r} at row {lineno}, column {name!r}"
                    ) from None
            rows.append(parsed)
    if not rows:
        raise InputError(f"no data rows in {path!r}")
    arr = np.array(rows, dtype=float)
    try:
        return Dataset(y=arr[:, 0], a=arr[:, 1], z=arr[:, 2:])
    except ValueError as exc:
        raise InputError(f"invalid data: {exc}") from exc


def _json_safe(obj):
    if isinstance(obj, dict):
        return {key: _json_safe(value) for key, value in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(value) for value in obj]
    if isinstance(obj, (np.floating, float)):
        value = float(obj)
        return None if not math.isfinite(value) else value
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return [_json_safe(value) for value in obj.tolist()]
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def _two_sided_p(est: float, se: float) -> float | None:
    if not (math.isfinite(est) and math.isfinite(se)) or se <= 0:
        return None
    return float(2.0 * stats.norm.sf(abs(est) / se))


def estimate_json(result: EstimateResult, n: int, p: int) -> dict:
    """Stable-schema JSON document for one estimate."""
    vec = result.theta_hat.to_array()

    def par(idx: int) -> dict:
        return {
            "est": vec[idx],
            "se": result.se[idx],
            "ci": [result.ci_low[idx], result.ci_high[idx]],
            "p": _two_sided_p(vec[idx], result.se[idx]),
        }

    doc = {
        "method": result.method,
        "n": n,
        "p": p,
        "beta": par(0),
        "gamma": par(1),
        "theta": vec,
        "theta_se": result.se,
        "ci_low": result.ci_low,
        "ci_high": result.ci_high,
        "kappa": result.kappa,
        "converged": result.converged,
        "iterations": result.iterations,
        "centering_offset": result.centering_offset,
        "warnings": list(result.warnings),
    }
    return _json_safe(doc)


def _write_json(doc: dict, path: str | None) -> None:
    text = json.dumps(doc, indent=2)
    if path:
        with open(path, "w") as handle:
            handle.write(text + "\n")
    else:
        print(text)


def _seed_from_env(seed: int | None) -> int | None:
    raw = os.environ.get("MISTERI_SEED")
    if raw is None:
        return seed
    try:
        return int(raw)
    except ValueError:
        raise InputError(f"MISTERI_SEED must be an integer, got {raw!r}") from None


def _add_column_args(parser):
    parser.add_argument("--input", required=True, help="CSV file with a header row")
    parser.add_argument("--outcome", default="y", help="outcome column name (default y)")
    parser.add_argument("--treatment", default="a", help="treatment column name (default a)")
    parser.add_argument(
        "--instruments",
        default=None,
        help="comma-separated instrument columns (default: all remaining columns)",
    )


def _parse_instruments(arg: str | None) -> list[str] | None:
    if arg is None:
        return None
    names = [name.strip() for name in arg.split(",") if name.strip()]
    if not names:
        raise InputError("empty --instruments list")
    return names


def cmd_estimate(args) -> int:
    data = read_dataset_csv(
        args.input, args.outcome, args.treatment, _parse_instruments(args.instruments)
    )
    seed = _seed_from_env(args.seed)
    result = fit_method(
        data,
        _canonical_method(args.method),
        n_boot=args.bootstrap,
        seed=seed,
        mixture_k=args.mixture_k,
        level=args.level,
    )
    _write_json(estimate_json(result, data.n, data.p), args.output)
    return EXIT_OK


def cmd_diagnose(args) -> int:
    data = read_dataset_csv(
        args.input, args.outcome, args.treatment, _parse_instruments(args.instruments)
    )
    stat, pvalue = het_test(data)
    fit = cmle_fit(data)
    kappa = fit.kappa
    k = fit.theta_hat.k
    doc = _json_safe(
        {
            "het_stat": stat,
            "het_pvalue": pvalue,
            "kappa": kappa,
            "k": k,
            "min_eigenvalue": None if kappa is None else -kappa * k,
            "warning": bool(kappa is not None and kappa < KAPPA_WARN_THRESHOLD),
        }
    )
    _write_json(doc, args.output)
    return EXIT_OK


def _scenario_from_args(args) -> Scenario:
    design = _canonical_design(args.scenario)
    kwargs = dict(
        design=design,
        n=args.n,
        p=args.p,
        eta_z=args.eta_z,
        beta_true=args.beta,
        gamma_true=args.gamma,
        maf=args.maf,
        seed=_seed_from_env(args.seed) or 0,
    )
    if design == "null_effect":
        kwargs["beta_true"] = 0.0
        kwargs["gamma_true"] = 0.0
    if design == "homoscedastic":
        kwargs["eta_z"] = 0.0
    if design == "table3_mixture":
        kwargs["mixture"] = default_mixture()
    return Scenario(**kwargs)


def cmd_simulate(args) -> int:
    scenario = _scenario_from_args(args)
    if args.emit_data:
        write_dataset_csv(args.emit_data, generate(scenario))
    summary = run_monte_carlo(
        scenario,
        _canonical_method(args.method),
        reps=args.reps,
        n_boot=args.bootstrap,
        mixture_k=args.mixture_k,
        n_jobs=args.threads,
    )
    if args.output and args.output.endswith(".json"):
        _write_json(summary_to_json_dict(summary), args.output)
    elif args.output:
        write_summary_csv(args.output, [summary])
    else:
        row = summary_to_row(summary)
        writer = csv.writer(sys.stdout)
        writer.writerow(SUMMARY_COLUMNS)
        writer.writerow(["" if _is_nan(row[c]) else row[c] for c in SUMMARY_COLUMNS])
    return EXIT_OK


def _is_nan(value) -> bool:
    return value is None or (isinstance(value, float) and math.isnan(value))


_REPRODUCE_ROWS = {
    "table1": [
        {"n": 10_000, "eta_z": 0.2},
        {"n": 10_000, "eta_z": 0.15},
        {"n": 10_000, "eta_z": 0.1},
        {"n": 30_000, "eta_z": 0.1},
        {"n": 30_000, "eta_z": 0.05},
        {"n": 100_000, "eta_z": 0.05},
    ],
    "table2": [
        {"p": 20, "method": "three_stage"},
        {"p": 20, "method": "cmle"},
        {"p": 50, "method": "three_stage"},
        {"p": 50, "method": "cmle"},
    ],
    "table3": [
        {"eta_z": 0.1},
        {"eta_z": 0.25},
        {"eta_z": 0.5},
    ],
}


def cmd_reproduce(args) -> int:
    seed = _seed_from_env(args.seed) or 0
    summaries = []
    for row in _REPRODUCE_ROWS[args.table]:
        if args.table == "table1":
            scenario = Scenario("table1_normal", n=row["n"], eta_z=row["eta_z"], seed=seed)
            method = "one_step"
        elif args.table == "table2":
            scenario = Scenario(
                "table2_weak_many", n=100_000, p=row["p"], eta_z=0.05, seed=seed
            )
            method = row["method"]
        else:
            scenario = Scenario(
                "table3_mixture",
                n=10_000,
                eta_z=row["eta_z"],
                mixture=default_mixture(),
                seed=seed,
            )
            method = "mixture"
        summaries.append(
            run_monte_carlo(scenario, method, reps=args.reps, n_jobs=args.threads)
        )
    if args.output:
        write_summary_csv(args.output, summaries)
    else:
        writer = csv.writer(sys.stdout)
        writer.writerow(SUMMARY_COLUMNS)
        for summary in summaries:
            row = summary_to_row(summary)
            writer.writerow(["" if _is_nan(row[c]) else row[c] for c in SUMMARY_COLUMNS])
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="misteri",
        description=(
            "Causal-effect and selection-bias estimation with possibly invalid "
            "instruments, identified through instrument-dependent outcome variance."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    methods = sorted(
        {"closed-form", "three-stage", "one-step", "cmle", "tsls", "mixture", "semiparam"}
    )

    est = sub.add_parser("estimate", help="fit one estimator on a CSV dataset")
    _add_column_args(est)
    est.add_argument("--method", default="cmle", choices=methods + list(_METHOD_ALIASES.values()))
    est.add_argument("--output", default=None, help="JSON output path (default stdout)")
    est.add_argument("--bootstrap", type=int, default=None, help="bootstrap resamples")
    est.add_argument("--mixture-k", type=int, default=2, dest="mixture_k")
    est.add_argument("--level", type=float, default=0.95)
    est.add_argument("--seed", type=int, default=None)
    est.set_defaults(func=cmd_estimate)

    diag = sub.add_parser("diagnose", help="heteroscedasticity test and kappa diagnostic")
    _add_column_args(diag)
    diag.add_argument("--output", default=None)
    diag.add_argument("--seed", type=int, default=None)
    diag.set_defaults(func=cmd_diagnose)

    sim = sub.add_parser("simulate", help="Monte Carlo run for one scenario")
    sim.add_argument(
        "--scenario",
        required=True,
        choices=sorted(
            {"table1", "table2", "table3", "null", "homoscedastic", "valid-iv"}
            | set(_SCENARIO_ALIASES.values())
            | {"table1_normal", "table2_weak_many", "table3_mixture", "null_effect"}
        ),
    )
    sim.add_argument("--n", type=int, default=10_000)
    sim.add_argument("--p", type=int, default=1)
    sim.add_argument("--eta-z", type=float, default=0.2, dest="eta_z")
    sim.add_argument("--beta", type=float, default=0.8)
    sim.add_argument("--gamma", type=float, default=0.2)
    sim.add_argument("--maf", type=float, default=0.3)
    sim.add_argument("--reps", type=int, default=100)
    sim.add_argument("--method", default="one-step", choices=methods + list(_METHOD_ALIASES.values()))
    sim.add_argument("--bootstrap", type=int, default=None)
    sim.add_argument("--mixture-k", type=int, default=2, dest="mixture_k")
    sim.add_argument("--seed", type=int, default=42)
    sim.add_argument("--threads", type=int, default=1, help="worker processes (0 = auto)")
    sim.add_argument("--output", default=None, help=".csv or .json output path")
    sim.add_argument("--emit-data", default=None, help="also write one generated dataset CSV")
    sim.set_defaults(func=cmd_simulate)

    rep = sub.add_parser("reproduce", help="desk-scale reruns of the benchmark tables")
    rep.add_argument("--table", required=True, choices=["table1", "table2", "table3"])
    rep.add_argument("--reps", type=int, default=100)
    rep.add_argument("--seed", type=int, default=42)
    rep.add_argument("--threads", type=int, default=1)
    rep.add_argument("--output", default=None)
    rep.set_defaults(func=cmd_reproduce)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except IdentificationError as exc:
        print(f"identification failure: {exc}", file=sys.stderr)
        return EXIT_IDENTIFICATION
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except MisteriError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
