"""Data generators and Monte Carlo harness for the benchmark designs.

Six designs are bundled.  `table1_normal` is the single-instrument normal
design (mean 0.8A + 0.2A sigma2(Z) + 1 + 0.3Z, log-variance 0.1 + eta_z Z);
`table2_weak_many` the many-weak-instrument variant (mean offset -0.5 + 0.5
per allele, log-variance slope 0.05 per column by default);
`table3_mixture` swaps the normal error for a constrained two-component
mixture; `null_effect` and `homoscedastic` are falsification designs; and
`valid_iv` is a textbook valid-instrument setup used only to sanity-check the
TSLS baseline.  Instruments are allele counts, Binomial(2, maf).
"""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import MisteriError
from .estimators import (
    EstimateResult,
    Theta,
    closed_form_binary,
    cmle_fit,
    one_step_update,
    three_stage,
    tsls_baseline,
    wald_ci,
)
from .mixture import MixtureParams, conditional_mean_profile, mixture_estimate
from .model import Dataset
from .semiparam import semiparam_fit

DESIGNS = (
    "table1_normal",
    "table2_weak_many",
    "table3_mixture",
    "null_effect",
    "homoscedastic",
    "valid_iv",
)

_EST_SEED_OFFSET = 1_000_000_007  # keeps estimator RNG streams apart from data streams


def default_mixture() -> MixtureParams:
    """Two-component benchmark error mixture; the second scale is solved from
    the unit-variance constraint so the constraints hold to machine precision."""
    pi = np.array([0.4, 0.6])
    mu = np.array([-0.6, 0.4])
    delta1 = 0.5
    delta2 = math.sqrt((1.0 - pi @ (mu**2) - pi[0] * delta1**2) / pi[1])
    return MixtureParams(pi=pi, mu=mu, delta=np.array([delta1, delta2]))


@dataclass(frozen=True)
class Scenario:
    """One simulation configuration; replicate r uses seed `seed + r`."""

    design: str
    n: int
    p: int = 1
    eta_z: float = 0.2
    beta_true: float = 0.8
    gamma_true: float = 0.2
    maf: float = 0.3
    mixture: MixtureParams | None = None
    seed: int = 0

    def __post_init__(self):
        if self.design not in DESIGNS:
            raise ValueError(f"unknown design {self.design!r}; choose from {DESIGNS}")
        if self.n < 100:
            raise ValueError("n must be at least 100")
        if self.p < 1:
            raise ValueError("p must be at least 1")
        if not 0.0 < self.maf <= 0.5:
            raise ValueError("maf must lie in (0, 0.5]")
        if self.design == "null_effect" and (self.beta_true != 0.0 or self.gamma_true != 0.0):
            raise ValueError("null_effect design requires beta_true=0 and gamma_true=0")
        if self.design == "homoscedastic" and self.eta_z != 0.0:
            raise ValueError("homoscedastic design requires eta_z=0")


def true_theta(scenario: Scenario) -> Theta | None:
    """Generating parameter vector, or None for the valid_iv design."""
    if scenario.design == "valid_iv":
        return None
    ones = np.ones(scenario.p)
    if scenario.design == "table2_weak_many":
        theta0, thetaz = -0.5, 0.5 * ones
    else:
        theta0, thetaz = 1.0, 0.3 * ones
    return Theta(
        beta=scenario.beta_true,
        gamma=scenario.gamma_true,
        theta0=theta0,
        thetaz=thetaz,
        eta0=0.1,
        etaz=scenario.eta_z * ones,
    )


def generate(scenario: Scenario) -> Dataset:
    """Draw one dataset; bit-identical for identical scenarios."""
    rng = np.random.default_rng(scenario.seed)
    n, p = scenario.n, scenario.p
    z = rng.binomial(2, scenario.maf, size=(n, p)).astype(float)

    if scenario.design == "valid_iv":
        confounder = rng.standard_normal(n)
        a = (
            0.4 * (z.sum(axis=1) - 2.0 * scenario.maf * p)
            + 0.8 * confounder
            + 0.6 * rng.standard_normal(n)
        )
        y = scenario.beta_true * a - confounder + 1.0 + rng.standard_normal(n)
        return Dataset(y=y, a=a, z=z)

    a = rng.standard_normal(n)
    theta = true_theta(scenario)
    v = np.exp(theta.eta0 + z @ theta.etaz)

    if scenario.design == "table3_mixture":
        mix = scenario.mixture if scenario.mixture is not None else default_mixture()
        mean, _ = conditional_mean_profile(theta, mix, a, z, v=v)
        comp = rng.choice(mix.K, size=n, p=mix.pi)
        eps = mix.mu[comp] + mix.delta[comp] * rng.standard_normal(n)
        y = mean + np.sqrt(v) * eps
    else:
        eps = rng.standard_normal(n)
        y = (
            theta.beta * a
            + theta.gamma * a * v
            + theta.theta0
            + z @ theta.thetaz
            + np.sqrt(v) * eps
        )
    return Dataset(y=y, a=a, z=z)


def fit_method(
    data: Dataset,
    method: str,
    n_boot: int | None = None,
    seed: int | None = None,
    mixture_k: int = 2,
    level: float = 0.95,
) -> EstimateResult:
    """Run one named estimator with its default bootstrap size."""
    if method == "three_stage":
        return three_stage(data, n_boot=100 if n_boot is None else n_boot, seed=seed, level=level)
    if method == "one_step":
        preliminary = three_stage(data, n_boot=0)
        return one_step_update(preliminary, data, level=level)
    if method == "cmle":
        return cmle_fit(data, level=level)
    if method == "closed_form":
        return closed_form_binary(
            data, n_boot=500 if n_boot is None else n_boot, seed=seed, level=level
        )
    if method == "tsls":
        return tsls_baseline(data, level=level)
    if method == "mixture":
        return mixture_estimate(
            data, K=mixture_k, n_boot=100 if n_boot is None else n_boot, seed=seed, level=level
        )
    if method == "semiparam":
        fit = semiparam_fit(data, n_boot=100 if n_boot is None else n_boot, seed=seed)
        nanvec = np.full(data.p, np.nan)
        theta = Theta(
            beta=fit.beta, gamma=fit.gamma, theta0=np.nan,
            thetaz=nanvec, eta0=np.nan, etaz=nanvec,
        )
        se = np.full(theta.k, np.nan)
        se[0], se[1] = fit.se
        low, high = wald_ci(theta, se, level)
        return EstimateResult(
            theta_hat=theta,
            se=se,
            ci_low=low,
            ci_high=high,
            method="semiparam",
            converged=True,
            iterations=0,
            centering_offset=float(np.mean(data.a)),
        )
    raise ValueError(f"unknown method {method!r}")


@dataclass
class MonteCarloSummary:
    """Aggregated replication results for one (scenario, method) pair.

    Bias is in percent of the true value (NaN when the truth is zero), SE is
    the average reported standard error, SD the spread of the point estimates,
    and coverage the fraction of level-95 intervals containing the truth.
    Failed replicates are excluded and counted; `flagged` marks a failure rate
    above 5 percent.
    """

    scenario: Scenario
    method: str
    reps: int
    failures: int
    flagged: bool
    mean_beta: float
    bias_pct_beta: float
    se_beta_avg: float
    sd_beta: float
    coverage_beta: float
    mean_gamma: float
    bias_pct_gamma: float
    se_gamma_avg: float
    sd_gamma: float
    coverage_gamma: float
    mean_kappa: float | None = None
    replicates: list[dict] | None = field(default=None, repr=False)


def _replicate_record(scenario: Scenario, method: str, r: int, opts: dict) -> dict:
    sc = replace(scenario, seed=scenario.seed + r)
    data = generate(sc)
    est_seed = scenario.seed + r + _EST_SEED_OFFSET
    result = fit_method(
        data,
        method,
        n_boot=opts.get("n_boot"),
        seed=est_seed,
        mixture_k=opts.get("mixture_k", 2),
        level=opts.get("level", 0.95),
    )
    rec = {
        "r": r,
        "beta_hat": result.beta,
        "gamma_hat": result.gamma,
        "se_beta": float(result.se[0]),
        "se_gamma": float(result.se[1]),
        "hit_beta": bool(result.ci_low[0] <= scenario.beta_true <= result.ci_high[0]),
        "hit_gamma": bool(result.ci_low[1] <= scenario.gamma_true <= result.ci_high[1]),
        "kappa": result.kappa,
        "converged": result.converged,
    }
    return rec


def _replicate_worker(args):
    scenario, method, r, opts = args
    try:
        return r, _replicate_record(scenario, method, r, opts), None
    except (MisteriError, np.linalg.LinAlgError, ValueError) as exc:
        return r, None, f"{type(exc).__name__}: {exc}"


def _bias_pct(mean: float, truth: float) -> float:
    if truth == 0.0:
        return float("nan")
    return 100.0 * (mean - truth) / truth


def run_monte_carlo(
    scenario: Scenario,
    method: str,
    reps: int,
    n_boot: int | None = None,
    mixture_k: int = 2,
    level: float = 0.95,
    keep_replicates: bool = False,
    n_jobs: int = 1,
) -> MonteCarloSummary:
    """Replicate generate-and-estimate `reps` times and aggregate.

    Replicate r draws data with seed `scenario.seed + r` and a derived
    estimator seed, so runs are reproducible and independent of `n_jobs`;
    results are merged in replicate order.
    """
    if reps < 1:
        raise ValueError("reps must be at least 1")
    opts = {"n_boot": n_boot, "mixture_k": mixture_k, "level": level}
    args = [(scenario, method, r, opts) for r in range(reps)]
    if n_jobs == 0:
        n_jobs = os.cpu_count() or 1
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            raw = list(pool.map(_replicate_worker, args, chunksize=max(1, reps // (4 * n_jobs))))
    else:
        raw = [_replicate_worker(arg) for arg in args]
    raw.sort(key=lambda item: item[0])

    records = [rec for _, rec, err in raw if rec is not None]
    failures = sum(1 for _, rec, _ in raw if rec is None)
    if not records:
        raise MisteriError(f"all {reps} replicates failed; method {method!r} unusable here")

    betas = np.array([rec["beta_hat"] for rec in records])
    gammas = np.array([rec["gamma_hat"] for rec in records])
    se_b = np.array([rec["se_beta"] for rec in records])
    se_g = np.array([rec["se_gamma"] for rec in records])
    kappas = [rec["kappa"] for rec in records if rec["kappa"] is not None]

    summary = MonteCarloSummary(
        scenario=scenario,
        method=method,
        reps=reps,
        failures=failures,
        flagged=failures > 0.05 * reps,
        mean_beta=float(betas.mean()),
        bias_pct_beta=_bias_pct(float(betas.mean()), scenario.beta_true),
        se_beta_avg=float(np.nanmean(se_b)) if np.any(np.isfinite(se_b)) else float("nan"),
        sd_beta=float(betas.std(ddof=1)) if betas.size > 1 else float("nan"),
        coverage_beta=float(np.mean([rec["hit_beta"] for rec in records])),
        mean_gamma=float(gammas.mean()),
        bias_pct_gamma=_bias_pct(float(gammas.mean()), scenario.gamma_true),
        se_gamma_avg=float(np.nanmean(se_g)) if np.any(np.isfinite(se_g)) else float("nan"),
        sd_gamma=float(gammas.std(ddof=1)) if gammas.size > 1 else float("nan"),
        coverage_gamma=float(np.mean([rec["hit_gamma"] for rec in records])),
        mean_kappa=float(np.mean(kappas)) if kappas else None,
        replicates=records if keep_replicates else None,
    )
    return summary


@dataclass
class KappaSweepResult:
    """Per-replicate (kappa_hat, beta_hat) pairs plus the aggregate summary."""

    records: list[dict]
    summary: MonteCarloSummary


def kappa_sweep(
    scenario: Scenario, reps: int, n_jobs: int = 1
) -> KappaSweepResult:
    """Run the maximum-likelihood estimator per replicate and pair each
    kappa_hat with its point estimate and a two-standard-error band flag."""
    summary = run_monte_carlo(
        scenario, "cmle", reps, keep_replicates=True, n_jobs=n_jobs
    )
    records = []
    for rec in summary.replicates:
        in_band = abs(rec["beta_hat"] - scenario.beta_true) <= 2.0 * rec["se_beta"]
        records.append(
            {
                "kappa": rec["kappa"],
                "beta_hat": rec["beta_hat"],
                "se_beta": rec["se_beta"],
                "in_band": bool(in_band),
            }
        )
    return KappaSweepResult(records=records, summary=summary)


SUMMARY_COLUMNS = (
    "design",
    "n",
    "p",
    "eta_z",
    "method",
    "reps",
    "failures",
    "flagged",
    "beta_hat",
    "bias_pct",
    "se",
    "sd",
    "cover",
    "gamma_hat",
    "gamma_bias_pct",
    "gamma_se",
    "gamma_sd",
    "gamma_cover",
    "kappa",
)


def summary_to_row(summary: MonteCarloSummary) -> dict:
    """Flatten a summary into the serialization column set."""
    sc = summary.scenario
    return {
        "design": sc.design,
        "n": sc.n,
        "p": sc.p,
        "eta_z": sc.eta_z,
        "method": summary.method,
        "reps": summary.reps,
        "failures": summary.failures,
        "flagged": summary.flagged,
        "beta_hat": summary.mean_beta,
        "bias_pct": summary.bias_pct_beta,
        "se": summary.se_beta_avg,
        "sd": summary.sd_beta,
        "cover": summary.coverage_beta,
        "gamma_hat": summary.mean_gamma,
        "gamma_bias_pct": summary.bias_pct_gamma,
        "gamma_se": summary.se_gamma_avg,
        "gamma_sd": summary.sd_gamma,
        "gamma_cover": summary.coverage_gamma,
        "kappa": summary.mean_kappa,
    }


def _csv_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        if math.isnan(value):
            return ""
        return repr(value)
    return str(value)


def write_summary_csv(path, summaries) -> None:
    """Write summaries as CSV; NaN/absent statistics serialize as empty cells."""
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(SUMMARY_COLUMNS)
        for summary in summaries:
            row = summary_to_row(summary)
            writer.writerow([_csv_cell(row[col]) for col in SUMMARY_COLUMNS])


def summary_to_json_dict(summary: MonteCarloSummary) -> dict:
    """JSON-safe summary dict (NaN becomes null)."""
    row = summary_to_row(summary)
    for key, value in row.items():
        if isinstance(value, float) and math.isnan(value):
            row[key] = None
    return row


def write_dataset_csv(path, data: Dataset) -> None:
    """Write a dataset with header y,a,z1..zp; floats use shortest
    round-trip formatting so re-reading reproduces values bit-exactly."""
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["y", "a"] + [f"z{j + 1}" for j in range(data.p)])
        for i in range(data.n):
            row = [repr(float(data.y[i])), repr(float(data.a[i]))]
            row.extend(repr(float(data.z[i, j])) for j in range(data.p))
            writer.writerow(row)
