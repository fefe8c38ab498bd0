"""Point estimators for the causal effect beta and selection bias gamma.

Five routes are provided: the closed form for a binary treatment and a binary
instrument, the three-stage least-squares construction, a one-step efficient
update, full conditional maximum likelihood (Newton with safeguards), and a
classical TSLS baseline that is expected to fail when instruments are invalid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .errors import IdentificationError, InputError, NumericError, VarianceOverflowError
from .likelihood import KAPPA_WARN_THRESHOLD, hessian, kappa_hat, loglik, score
from .model import (
    Dataset,
    StageOneFit,
    Theta,
    center_treatment,
    least_squares,
)

METHODS = ("closed_form", "three_stage", "one_step", "cmle", "tsls", "mixture", "semiparam")

_KAPPA_WARNING = (
    f"kappa_hat below {KAPPA_WARN_THRESHOLD:g}: weak identification, "
    "estimates and intervals may be unreliable"
)


@dataclass
class EstimateResult:
    """Point estimates with standard errors and Wald intervals.

    All vectors follow the canonical parameter order; entries a method cannot
    estimate (e.g. gamma under TSLS) are NaN.
    """

    theta_hat: Theta
    se: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    method: str
    converged: bool
    iterations: int
    centering_offset: float
    kappa: float | None = None
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.se = np.asarray(self.se, dtype=float)
        self.ci_low = np.asarray(self.ci_low, dtype=float)
        self.ci_high = np.asarray(self.ci_high, dtype=float)
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        vec = self.theta_hat.to_array()
        finite = np.isfinite(self.se)
        if np.any(self.se[finite] < 0):
            raise ValueError("standard errors must be non-negative")
        ok = np.isfinite(vec) & np.isfinite(self.ci_low) & np.isfinite(self.ci_high)
        if np.any(self.ci_low[ok] > vec[ok]) or np.any(vec[ok] > self.ci_high[ok]):
            raise ValueError("confidence bounds must bracket the point estimate")

    @property
    def beta(self) -> float:
        return self.theta_hat.beta

    @property
    def gamma(self) -> float:
        return self.theta_hat.gamma


@dataclass(frozen=True)
class ClosedFormInput:
    """Per-stratum moments for the binary closed form.

    d0, d1 are exposed-minus-unexposed outcome means in the z=0 / z=1 strata;
    s0, s1 the within-cell outcome variances in those strata.
    """

    d0: float
    d1: float
    s0: float
    s1: float

    def __post_init__(self):
        if self.s0 <= 0 or self.s1 <= 0:
            raise ValueError("stratum variances must be positive")


def wald_ci(theta_hat, se: np.ndarray, level: float = 0.95):
    """Normal-quantile confidence bounds theta +- q * se."""
    if not 0.0 < level < 1.0:
        raise ValueError("level must be in (0, 1)")
    vec = theta_hat.to_array() if isinstance(theta_hat, Theta) else np.asarray(theta_hat, float)
    se = np.asarray(se, dtype=float)
    q = float(stats.norm.ppf(0.5 + level / 2.0))
    return vec - q * se, vec + q * se


def closed_form_from_moments(
    moments: ClosedFormInput, weights: tuple[float, float] | None = None
) -> tuple[float, float]:
    """Identification algebra on stratum moments: returns (beta, gamma).

    gamma is the slope of D(z) against sigma2(z); beta averages the two
    stratum-specific intercepts D(z) - gamma*sigma2(z) with the given weights
    (equal weights when omitted; the two values coincide algebraically).
    """
    denom = moments.s1 - moments.s0
    if abs(denom) < 1e-8 * (moments.s1 + moments.s0):
        raise IdentificationError("B3 violated: variance not identified")
    gamma = (moments.d1 - moments.d0) / denom
    b0 = moments.d0 - gamma * moments.s0
    b1 = moments.d1 - gamma * moments.s1
    if weights is None:
        w0 = w1 = 0.5
    else:
        w0, w1 = weights
    beta = (w0 * b0 + w1 * b1) / (w0 + w1)
    return beta, gamma


def _binary_cells(y, a, z):
    """Cell means/variances for the 2x2 (a, z) layout.

    Returns (moments, counts, cell_means) where variances are pooled within
    (a, z) cells for each stratum z.
    """
    means = np.empty((2, 2))
    variances = np.empty((2, 2))
    counts = np.empty((2, 2), dtype=int)
    for av in (0, 1):
        for zv in (0, 1):
            cell = y[(a == av) & (z == zv)]
            counts[av, zv] = cell.size
            if cell.size < 2:
                raise IdentificationError(
                    f"insufficient stratum data: cell (a={av}, z={zv}) has {cell.size} rows"
                )
            means[av, zv] = cell.mean()
            variances[av, zv] = cell.var(ddof=1)
    pooled = np.empty(2)
    for zv in (0, 1):
        dof = counts[:, zv] - 1
        pooled[zv] = float((dof @ variances[:, zv]) / dof.sum())
    moments = ClosedFormInput(
        d0=float(means[1, 0] - means[0, 0]),
        d1=float(means[1, 1] - means[0, 1]),
        s0=float(pooled[0]),
        s1=float(pooled[1]),
    )
    return moments, counts, means


def _closed_form_theta(y, a, z, weighted: bool) -> Theta:
    moments, counts, means = _binary_cells(y, a, z)
    if weighted:
        # weight each stratum's intercept by the inverse of var(D(z)) ~
        # sigma2(z) * (1/n_treated + 1/n_untreated)
        var_d0 = moments.s0 * (1.0 / counts[0, 0] + 1.0 / counts[1, 0])
        var_d1 = moments.s1 * (1.0 / counts[0, 1] + 1.0 / counts[1, 1])
        weights = (1.0 / var_d0, 1.0 / var_d1)
    else:
        weights = None
    beta, gamma = closed_form_from_moments(moments, weights)
    return Theta(
        beta=beta,
        gamma=gamma,
        theta0=float(means[0, 0]),
        thetaz=np.array([means[0, 1] - means[0, 0]]),
        eta0=float(np.log(moments.s0)),
        etaz=np.array([float(np.log(moments.s1) - np.log(moments.s0))]),
    )


def closed_form_binary(
    data: Dataset,
    n_boot: int = 500,
    seed: int | None = None,
    weighted: bool = True,
    level: float = 0.95,
) -> EstimateResult:
    """Closed-form estimator for a binary treatment and one binary instrument.

    gamma is identified as the ratio of the cross-stratum change in the
    exposed-minus-unexposed mean difference to the change in outcome variance;
    beta follows by removing the selection term.  Standard errors come from a
    nonparametric bootstrap.

    Parameters
    ----------
    data : Dataset with a in {0, 1} and a single z column in {0, 1}.
    n_boot : bootstrap resample count (0 skips standard errors).
    seed : seed for the bootstrap resampler.
    weighted : inverse-variance weighting of the two stratum intercepts
        (unweighted average when False).
    """
    if data.p != 1:
        raise InputError("closed_form requires exactly one instrument column")
    a, z = data.a, data.z[:, 0]
    if not np.isin(a, (0.0, 1.0)).all():
        raise InputError("closed_form requires a binary treatment coded 0/1")
    if not np.isin(z, (0.0, 1.0)).all():
        raise InputError("closed_form requires a binary instrument coded 0/1")

    theta = _closed_form_theta(data.y, a, z, weighted)
    k = theta.k
    se = np.full(k, np.nan)
    if n_boot > 0:
        rng = np.random.default_rng(seed)
        draws = np.empty((n_boot, k))
        failures = 0
        for b in range(n_boot):
            idx = rng.integers(0, data.n, data.n)
            try:
                draws[b] = _closed_form_theta(data.y[idx], a[idx], z[idx], weighted).to_array()
            except (IdentificationError, NumericError):
                draws[b] = np.nan
                failures += 1
        if failures > n_boot // 2:
            raise NumericError("bootstrap failed on more than half of the resamples")
        se = np.nanstd(draws, axis=0, ddof=1)
    low, high = wald_ci(theta, se, level)
    return EstimateResult(
        theta_hat=theta,
        se=se,
        ci_low=low,
        ci_high=high,
        method="closed_form",
        converged=True,
        iterations=0,
        centering_offset=0.0,
    )


def stage1_fit(data: Dataset) -> StageOneFit:
    """OLS of y on (1, a, z, a*z); the interaction absorbs the selection term."""
    design = np.column_stack(
        [np.ones(data.n), data.a, data.z, data.a[:, None] * data.z]
    )
    coef, resid = least_squares(design, data.y, context="stage-1 design")
    p = data.p
    return StageOneFit(
        theta0_hat=float(coef[0]),
        thetaA_hat=float(coef[1]),
        thetaz_hat=coef[2 : 2 + p].copy(),
        thetaAz_hat=coef[2 + p :].copy(),
        residuals=resid,
    )


def _log_linear_moment_fit(
    w: np.ndarray, design: np.ndarray, max_iter: int = 100, context: str = "stage-2"
) -> np.ndarray:
    """Solve sum_i (w_i - exp(x_i' eta)) x_i = 0 by damped Newton steps.

    Initialized at eta = (log mean(w), 0, ...); converged when the moment
    residual max-norm drops below 1e-8 * sum(w).
    """
    if np.all(w == 0):
        raise NumericError(f"{context} failure: residuals are all zero")
    n, q = design.shape
    eta = np.zeros(q)
    eta[0] = np.log(np.mean(w))
    tol = 1e-8 * float(np.sum(w))

    def moments(e):
        exponent = design @ e
        if np.any(np.abs(exponent) > 700.0):
            return None, np.inf
        m = np.exp(exponent)
        g = design.T @ (w - m)
        return m, float(np.max(np.abs(g)))

    m, gnorm = moments(eta)
    for _ in range(max_iter):
        if gnorm < tol:
            return eta
        g = design.T @ (w - m)
        info = design.T @ (design * m[:, None])
        try:
            step = np.linalg.solve(info, g)
        except np.linalg.LinAlgError as exc:
            raise NumericError(f"{context} divergence") from exc
        t = 1.0
        for _ in range(31):
            m_new, gnorm_new = moments(eta + t * step)
            if m_new is not None and gnorm_new < gnorm:
                break
            t /= 2.0
        else:
            raise NumericError(f"{context} divergence")
        eta = eta + t * step
        m, gnorm = m_new, gnorm_new
    if gnorm < tol:
        return eta
    raise NumericError(f"{context} divergence")


def stage2_fit(residuals: np.ndarray, z: np.ndarray, max_iter: int = 100):
    """Log-linear variance fit: moment equations of squared residuals on (1, z).

    Returns (eta0, etaz) such that sum_i (e_i^2 - exp(eta0 + etaz'z_i)) (1, z_i) = 0.
    """
    residuals = np.asarray(residuals, dtype=float)
    z = np.asarray(z, dtype=float)
    if z.ndim == 1:
        z = z.reshape(-1, 1)
    design = np.column_stack([np.ones(z.shape[0]), z])
    eta = _log_linear_moment_fit(residuals * residuals, design, max_iter=max_iter)
    return float(eta[0]), eta[1:].copy()


def stage3_fit(
    data: Dataset,
    stage1: StageOneFit,
    sigma2_hat: np.ndarray,
    joint: bool = True,
):
    """Extract (beta, gamma) by regressing y on the treatment and its
    variance-scaled copy.

    The default joint form refits (theta0, thetaz) alongside, giving an
    internally consistent preliminary parameter set; joint=False regresses
    y - (theta0_hat + thetaz_hat'z) on (a, a*sigma2) alone and keeps the
    stage-1 mean coefficients.
    """
    sigma2_hat = np.asarray(sigma2_hat, dtype=float)
    if np.ptp(sigma2_hat) <= 1e-10 * float(np.mean(sigma2_hat)):
        raise IdentificationError("B3 violated at stage 3: fitted variance is constant")
    a_s2 = data.a * sigma2_hat
    if joint:
        design = np.column_stack([data.a, a_s2, np.ones(data.n), data.z])
        coef, _ = least_squares(design, data.y, context="stage-3 design (B3 violated)")
        beta, gamma = float(coef[0]), float(coef[1])
        theta0 = float(coef[2])
        thetaz = coef[3:].copy()
    else:
        target = data.y - (stage1.theta0_hat + data.z @ stage1.thetaz_hat)
        design = np.column_stack([data.a, a_s2])
        coef, _ = least_squares(design, target, context="stage-3 design (B3 violated)")
        beta, gamma = float(coef[0]), float(coef[1])
        theta0 = stage1.theta0_hat
        thetaz = stage1.thetaz_hat.copy()
    return beta, gamma, theta0, thetaz


def _three_stage_theta(data: Dataset, weighted_stage1: bool = False) -> Theta:
    """Stage 1 -> 2 -> 3 on already-centered data; returns the full Theta."""
    fit1 = stage1_fit(data)
    eta0, etaz = stage2_fit(fit1.residuals, data.z)
    if weighted_stage1:
        # one reweighting pass: stage-1 WLS with the stage-2 variances,
        # then refresh the variance fit on the reweighted residuals
        v = np.exp(eta0 + data.z @ etaz)
        wts = 1.0 / np.sqrt(v)
        design = np.column_stack(
            [np.ones(data.n), data.a, data.z, data.a[:, None] * data.z]
        )
        coef, _ = least_squares(design * wts[:, None], data.y * wts, context="stage-1 design")
        resid = data.y - design @ coef
        p = data.p
        fit1 = StageOneFit(
            theta0_hat=float(coef[0]),
            thetaA_hat=float(coef[1]),
            thetaz_hat=coef[2 : 2 + p].copy(),
            thetaAz_hat=coef[2 + p :].copy(),
            residuals=resid,
        )
        eta0, etaz = stage2_fit(fit1.residuals, data.z)
    sigma2_hat = np.exp(eta0 + data.z @ etaz)
    beta, gamma, theta0, thetaz = stage3_fit(data, fit1, sigma2_hat)
    return Theta(beta=beta, gamma=gamma, theta0=theta0, thetaz=thetaz, eta0=eta0, etaz=etaz)


def three_stage(
    data: Dataset,
    n_boot: int = 100,
    seed: int | None = None,
    level: float = 0.95,
    weighted_stage1: bool = False,
) -> EstimateResult:
    """Three-stage estimator: mean fit, log-linear variance fit, effect fit.

    Consistent but inefficient; its output is the standard initializer for
    `one_step_update` and `cmle_fit`.  Standard errors use a nonparametric
    bootstrap over the full three-stage pipeline (n_boot=0 skips them).
    """
    centered, offset = center_treatment(data)
    theta = _three_stage_theta(centered, weighted_stage1)
    k = theta.k
    se = np.full(k, np.nan)
    if n_boot > 0:
        rng = np.random.default_rng(seed)
        draws = np.empty((n_boot, k))
        failures = 0
        for b in range(n_boot):
            idx = rng.integers(0, data.n, data.n)
            try:
                resampled = Dataset(y=data.y[idx], a=data.a[idx], z=data.z[idx])
                rc, _ = center_treatment(resampled)
                draws[b] = _three_stage_theta(rc, weighted_stage1).to_array()
            except (IdentificationError, NumericError):
                draws[b] = np.nan
                failures += 1
        if failures > n_boot // 2:
            raise NumericError("bootstrap failed on more than half of the resamples")
        se = np.nanstd(draws, axis=0, ddof=1)
    low, high = wald_ci(theta, se, level)
    return EstimateResult(
        theta_hat=theta,
        se=se,
        ci_low=low,
        ci_high=high,
        method="three_stage",
        converged=True,
        iterations=0,
        centering_offset=offset,
    )


def _se_and_kappa(theta: Theta, data: Dataset, warnings: list[str]):
    """Standard errors from the negative inverse Hessian, plus kappa_hat."""
    H = hessian(theta, data)
    k = theta.k
    kappa = kappa_hat(H, k)
    if kappa < KAPPA_WARN_THRESHOLD:
        warnings.append(_KAPPA_WARNING)
    se = np.full(k, np.nan)
    try:
        cov = -np.linalg.inv(H)
        diag = np.diag(cov).copy()
        if np.any(diag < 0):
            warnings.append("negative variance estimates: Hessian not negative definite")
            diag[diag < 0] = np.nan
        se = np.sqrt(diag)
    except np.linalg.LinAlgError:
        warnings.append("singular Hessian: standard errors unavailable")
    return se, kappa, H


def one_step_update(
    theta0: Theta | EstimateResult,
    data: Dataset,
    level: float = 0.95,
) -> EstimateResult:
    """Single Newton correction of a consistent preliminary estimate.

    Asymptotically equivalent to full conditional maximum likelihood when the
    preliminary estimate is root-n consistent.  Standard errors come from the
    negative inverse Hessian at the updated point.
    """
    if isinstance(theta0, EstimateResult):
        theta0 = theta0.theta_hat
    centered, offset = center_treatment(data)
    vec = theta0.to_array()
    s = score(theta0, centered)
    H = hessian(theta0, centered)
    try:
        step = np.linalg.solve(H, s)
    except np.linalg.LinAlgError as exc:
        raise NumericError("one-step unavailable: singular information") from exc
    if not np.all(np.isfinite(step)):
        raise NumericError("one-step unavailable: singular information")
    updated = Theta.from_array(vec - step, data.p)
    warnings: list[str] = []
    se, kappa, _ = _se_and_kappa(updated, centered, warnings)
    low, high = wald_ci(updated, se, level)
    return EstimateResult(
        theta_hat=updated,
        se=se,
        ci_low=low,
        ci_high=high,
        method="one_step",
        converged=True,
        iterations=1,
        centering_offset=offset,
        kappa=kappa,
        warnings=warnings,
    )


def cmle_fit(
    data: Dataset,
    init: Theta | EstimateResult | None = None,
    max_iter: int = 100,
    tol_score: float = 1e-8,
    tol_step: float = 1e-10,
    level: float = 0.95,
) -> EstimateResult:
    """Conditional maximum likelihood via safeguarded Newton iteration.

    Each step solves H d = S and backtracks by halving (up to 30 times) until
    the log-likelihood does not decrease; singular Hessians fall back to a
    steepest-ascent step, with an error after 10 consecutive fallbacks.
    Convergence requires a score max-norm below `tol_score`; iteration also
    stops when the accepted step max-norm drops below `tol_step`.

    Parameters
    ----------
    data : Dataset.
    init : preliminary estimate (on the centered-treatment scale); the
        three-stage estimator is run internally when omitted.
    """
    centered, offset = center_treatment(data)
    if init is None:
        theta = _three_stage_theta(centered)
    elif isinstance(init, EstimateResult):
        theta = init.theta_hat
    else:
        theta = init
    p = data.p
    vec = theta.to_array()
    ll = loglik(theta, centered)
    singular_run = 0
    iterations = 0
    for _ in range(max_iter):
        s = score(theta, centered)
        if np.max(np.abs(s)) < tol_score:
            break
        H = hessian(theta, centered)
        step = None
        try:
            cand = np.linalg.solve(H, s)
            if np.all(np.isfinite(cand)) and float(s @ cand) < 0:
                step = -cand
        except np.linalg.LinAlgError:
            step = None
        if step is None:
            singular_run += 1
            if singular_run >= 10:
                raise NumericError("10 consecutive singular Newton steps")
            step = s / max(1.0, float(np.max(np.abs(s))))
        else:
            singular_run = 0

        accepted = False
        t = 1.0
        # non-decrease up to the summation noise floor of the log-likelihood;
        # near the optimum true gains sit below that floor
        slack = 1e-11 * (1.0 + abs(ll))
        for _ in range(31):
            cand_vec = vec + t * step
            cand_theta = Theta.from_array(cand_vec, p)
            try:
                ll_new = loglik(cand_theta, centered)
            except VarianceOverflowError:
                ll_new = -np.inf
            if np.isfinite(ll_new) and ll_new >= ll - slack:
                accepted = True
                break
            t /= 2.0
        if not accepted:
            break
        iterations += 1
        vec, theta, ll = cand_vec, cand_theta, ll_new
        if np.max(np.abs(t * step)) < tol_step:
            break

    s_final = score(theta, centered)
    converged = bool(np.max(np.abs(s_final)) < tol_score)
    warnings: list[str] = []
    if not converged:
        warnings.append("Newton iteration did not reach the score tolerance")
    se, kappa, _ = _se_and_kappa(theta, centered, warnings)
    low, high = wald_ci(theta, se, level)
    return EstimateResult(
        theta_hat=theta,
        se=se,
        ci_low=low,
        ci_high=high,
        method="cmle",
        converged=converged,
        iterations=iterations,
        centering_offset=offset,
        kappa=kappa,
        warnings=warnings,
    )


def tsls_baseline(data: Dataset, level: float = 0.95) -> EstimateResult:
    """Classical two-stage least squares of y on a instrumented by z.

    Included as a comparison baseline only: with an invalid instrument it is
    inconsistent and its output can be arbitrarily far from the truth.
    Standard errors use the heteroscedasticity-robust IV sandwich.
    """
    n, p = data.n, data.p
    zdesign = np.column_stack([np.ones(n), data.z])
    fs_coef, fs_resid = least_squares(zdesign, data.a, context="first-stage design")
    tss = float(np.sum((data.a - data.a.mean()) ** 2))
    rss = float(np.sum(fs_resid**2))
    dof = n - p - 1
    if rss <= 0 or dof <= 0:
        raise IdentificationError("weak first stage: F statistic unavailable")
    fstat = ((tss - rss) / p) / (rss / dof)
    if not np.isfinite(fstat) or fstat < 1e-6:
        raise IdentificationError("weak first stage: instruments do not move the treatment")

    a_hat = zdesign @ fs_coef
    xhat = np.column_stack([np.ones(n), a_hat])
    x = np.column_stack([np.ones(n), data.a])
    coef, _, rank, _ = np.linalg.lstsq(xhat, data.y, rcond=None)
    if rank < 2:
        raise IdentificationError("weak first stage: projected treatment is constant")
    u = data.y - x @ coef
    bread = np.linalg.inv(xhat.T @ xhat)
    meat = xhat.T @ (xhat * (u * u)[:, None])
    cov = bread @ meat @ bread

    nanvec = np.full(p, np.nan)
    theta = Theta(
        beta=float(coef[1]),
        gamma=np.nan,
        theta0=float(coef[0]),
        thetaz=nanvec,
        eta0=np.nan,
        etaz=nanvec,
    )
    se = np.full(theta.k, np.nan)
    se[0] = np.sqrt(cov[1, 1])
    se[2] = np.sqrt(cov[0, 0])
    low, high = wald_ci(theta, se, level)
    return EstimateResult(
        theta_hat=theta,
        se=se,
        ci_low=low,
        ci_high=high,
        method="tsls",
        converged=True,
        iterations=0,
        centering_offset=0.0,
    )
