"""Gaussian-mixture error extension of the location-scale model.

The standardized error is modelled as a K-component normal mixture whose
parameters obey three moment constraints: weights sum to one, the mixture mean
is zero and the mixture variance is one.  Estimation alternates between a
constrained EM fit of the mixture on standardized residuals and a least-squares
refresh of the structural parameters with a tilt-derived offset.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, VarianceOverflowError
from .estimators import EstimateResult, cmle_fit, stage2_fit, wald_ci
from .model import (
    EXP_GUARD,
    Dataset,
    Theta,
    center_treatment,
    least_squares,
    sigma2_eval,
    standardized_residuals,
    variance_vector,
)

CONSTRAINT_TOL = 1e-8
LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class MixtureParams:
    """Constrained mixture of normals for the standardized error."""

    pi: np.ndarray
    mu: np.ndarray
    delta: np.ndarray

    def __post_init__(self):
        pi = np.atleast_1d(np.asarray(self.pi, dtype=float))
        mu = np.atleast_1d(np.asarray(self.mu, dtype=float))
        delta = np.atleast_1d(np.asarray(self.delta, dtype=float))
        if not (pi.shape == mu.shape == delta.shape) or pi.ndim != 1:
            raise ValueError("pi, mu, delta must be 1-d arrays of equal length")
        if np.any(pi <= 0):
            raise ValueError("component weights must be positive")
        if np.any(delta <= 0):
            raise ValueError("component scales must be positive")
        if abs(pi.sum() - 1.0) > CONSTRAINT_TOL:
            raise ValueError("component weights must sum to one")
        if abs(pi @ mu) > CONSTRAINT_TOL:
            raise ValueError("mixture mean must be zero")
        if abs(pi @ (delta**2 + mu**2) - 1.0) > CONSTRAINT_TOL:
            raise ValueError("mixture variance must be one")
        object.__setattr__(self, "pi", pi)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "delta", delta)

    @property
    def K(self) -> int:
        return self.pi.shape[0]


@dataclass
class MixtureFit:
    """Result of the alternating mixture fit.

    theta is on the centered-treatment scale; loglik_trace records the full
    mixture log-likelihood after each outer iteration and is non-decreasing.
    """

    theta: Theta
    mix: MixtureParams
    loglik_trace: list[float] = field(default_factory=list)
    converged: bool = False


def project_constraints(pi, mu, delta):
    """Map raw component parameters onto the constraint set.

    Weights are renormalized, means recentred to zero mixture mean, then means
    and scales shrunk jointly so the mixture variance is exactly one.
    """
    pi = np.asarray(pi, dtype=float)
    mu = np.asarray(mu, dtype=float)
    delta = np.asarray(delta, dtype=float)
    pi = pi / pi.sum()
    mu = mu - pi @ mu
    scale = math.sqrt(float(pi @ (delta**2 + mu**2)))
    return pi, mu / scale, delta / scale


def mixture_weights(gamma: float, a: float, sigma: float, mix: MixtureParams) -> np.ndarray:
    """Tilt weights omega_k = exp(t mu_k + delta_k^2 t^2 / 2) with t = gamma*a*sigma."""
    t = gamma * a * sigma
    exponent = t * mix.mu + 0.5 * (mix.delta**2) * t * t
    if np.any(np.abs(exponent) > EXP_GUARD):
        raise VarianceOverflowError("overflow in mixture tilt weights")
    return np.exp(exponent)


def mixture_conditional_mean(theta: Theta, mix: MixtureParams, a: float, z_row) -> float:
    """Conditional outcome mean under the mixture error model."""
    z_row = np.atleast_1d(np.asarray(z_row, dtype=float))
    s2 = sigma2_eval(theta.eta0, theta.etaz, z_row)
    sigma = math.sqrt(s2)
    w = mix.pi * mixture_weights(theta.gamma, a, sigma, mix)
    denom = w.sum()
    base = theta.beta * a + theta.theta0 + theta.thetaz @ z_row
    return float(
        base
        + sigma * (w @ mix.mu) / denom
        + theta.gamma * a * s2 * (w @ (mix.delta**2)) / denom
    )


def conditional_mean_profile(theta: Theta, mix: MixtureParams, a: np.ndarray, z: np.ndarray, v=None):
    """Vectorized conditional mean over rows; also returns the variance vector."""
    a = np.asarray(a, dtype=float)
    z = np.asarray(z, dtype=float)
    if v is None:
        exponent = theta.eta0 + z @ theta.etaz
        if np.any(np.abs(exponent) > EXP_GUARD):
            raise VarianceOverflowError("variance overflow")
        v = np.exp(exponent)
    sigma = np.sqrt(v)
    t = theta.gamma * a * sigma
    exponent = t[:, None] * mix.mu[None, :] + 0.5 * (mix.delta**2)[None, :] * (t * t)[:, None]
    if np.any(np.abs(exponent) > EXP_GUARD):
        raise VarianceOverflowError("overflow in mixture tilt weights")
    w = mix.pi[None, :] * np.exp(exponent)
    denom = w.sum(axis=1)
    mean = (
        theta.beta * a
        + theta.theta0
        + z @ theta.thetaz
        + sigma * (w @ mix.mu) / denom
        + theta.gamma * a * v * (w @ (mix.delta**2)) / denom
    )
    return mean, v


def _log_density_matrix(eps, pi, mu, delta):
    """(n, K) matrix of log(pi_k) + log phi((eps - mu_k)/delta_k)/delta_k."""
    u = (eps[:, None] - mu[None, :]) / delta[None, :]
    return (np.log(pi) - np.log(delta) - 0.5 * LOG_2PI)[None, :] - 0.5 * u * u


def _row_logsumexp(logm):
    top = logm.max(axis=1)
    return top + np.log(np.exp(logm - top[:, None]).sum(axis=1))


def mixture_loglik(theta: Theta, mix: MixtureParams, data: Dataset) -> float:
    """Log-likelihood of the mixture location-scale model."""
    mean, v = conditional_mean_profile(theta, mix, data.a, data.z)
    eps = (data.y - mean) / np.sqrt(v)
    log_comp = _log_density_matrix(eps, mix.pi, mix.mu, mix.delta)
    return float(np.sum(_row_logsumexp(log_comp)) - 0.5 * np.sum(np.log(v)))


def _residual_loglik(eps, pi, mu, delta) -> float:
    return float(np.sum(_row_logsumexp(_log_density_matrix(eps, pi, mu, delta))))


def _quantile_split_init(eps, K, rng=None):
    order = np.argsort(eps)
    groups = np.array_split(order, K)
    pi = np.array([len(g) / eps.size for g in groups])
    mu = np.array([eps[g].mean() for g in groups])
    floor = 0.05 * eps.std() + 1e-6
    delta = np.array([max(eps[g].std(), floor) for g in groups])
    if rng is not None:
        mu = mu + 0.1 * rng.standard_normal(K)
        delta = delta * (1.0 + 0.5 * rng.random(K))
    return project_constraints(pi, mu, delta)


def fit_mixture_residuals(
    eps: np.ndarray,
    K: int,
    max_iter: int = 500,
    tol: float = 1e-8,
    seed: int = 0,
    init: MixtureParams | None = None,
) -> MixtureParams:
    """Constrained maximum likelihood mixture fit of standardized residuals.

    EM iterations with a projection onto the constraint set after every
    M-step; stops when the log-likelihood gain falls below `tol`.  A collapsed
    component (scale below 1e-4) triggers one perturbed restart before failing.

    Parameters
    ----------
    eps : standardized residuals.
    K : number of components (K=1 returns the standard normal exactly).
    init : warm-start parameters (skips the quantile-split initialization).
    """
    eps = np.asarray(eps, dtype=float)
    if K < 1:
        raise ValueError("K must be at least 1")
    if eps.size <= 5 * K:
        raise ValueError(f"need more than 5K observations (n={eps.size}, K={K})")

    # the component log-density is quadratic in eps, so the E-step evaluates as
    # one matrix product against the fixed moment basis (1, eps, eps^2), and
    # the M-step sufficient statistics as another
    basis = np.column_stack([np.ones(eps.size), eps, eps * eps])
    for attempt in (0, 1):
        if init is not None and attempt == 0:
            pi, mu, delta = init.pi.copy(), init.mu.copy(), init.delta.copy()
        else:
            rng = np.random.default_rng(seed) if attempt else None
            pi, mu, delta = _quantile_split_init(eps, K, rng=rng)
        collapsed = False
        prev_ll = -np.inf
        prev = (pi, mu, delta)
        for _ in range(max_iter):
            inv_d2 = 1.0 / (delta * delta)
            coef = np.empty((3, K))
            coef[0] = np.log(pi) - np.log(delta) - 0.5 * LOG_2PI - 0.5 * mu * mu * inv_d2
            coef[1] = mu * inv_d2
            coef[2] = -0.5 * inv_d2
            resp = basis @ coef
            # densities stay representable without a max shift as long as no
            # row underflows entirely; fall back to the shifted form if one does
            np.exp(resp, out=resp)
            rsum = resp.sum(axis=1)
            if rsum.min() <= 0.0:
                logm = basis @ coef
                top = logm.max(axis=1)
                np.subtract(logm, top[:, None], out=logm)
                np.exp(logm, out=logm)
                resp = logm
                rsum = resp.sum(axis=1)
                ll = float(top.sum() + np.log(rsum).sum())
            else:
                ll = float(np.log(rsum).sum())
            if ll - prev_ll < tol:
                if ll < prev_ll:
                    pi, mu, delta = prev
                break
            prev_ll = ll
            prev = (pi, mu, delta)
            resp /= rsum[:, None]
            suff = resp.T @ basis
            nk = suff[:, 0]
            if np.any(nk < 1e-10):
                collapsed = True
                break
            pi = nk / eps.size
            mu = suff[:, 1] / nk
            var = suff[:, 2] / nk - mu * mu
            if np.any(var < 1e-8):
                collapsed = True
                break
            delta = np.sqrt(var)
            pi, mu, delta = project_constraints(pi, mu, delta)
        if not collapsed:
            return MixtureParams(pi=pi, mu=mu, delta=delta)
        init = None
    raise NumericError("degenerate component in mixture fit")


def alternating_fit(
    data: Dataset,
    K: int = 2,
    max_outer: int = 50,
    rel_tol: float = 1e-3,
    init: tuple[Theta, MixtureParams] | None = None,
    seed: int = 0,
    em_tol: float = 1e-8,
) -> MixtureFit:
    """Alternating optimization of the mixture location-scale model.

    Starts from the normal-model maximum likelihood fit, then loops: fit the
    constrained mixture to standardized residuals; rebuild the tilt regressor
    and offset; refresh the structural parameters by least squares and the
    variance coefficients by the log-linear moment fit.  Stops when the
    relative log-likelihood change drops below `rel_tol`; an iteration that
    lowers the log-likelihood is rolled back and treated as converged, so the
    recorded trace is non-decreasing.

    Parameters
    ----------
    init : optional (theta, mix) warm start that skips the normal-model fit
        (used by bootstrap resampling).
    """
    centered, _ = center_treatment(data)
    y, a, z = centered.y, centered.a, centered.z

    if init is None:
        normal = cmle_fit(centered)
        theta = normal.theta_hat
        mix = None
    else:
        theta, mix = init
    eps = standardized_residuals(theta, centered)

    trace: list[float] = []
    converged = False
    state = None
    for outer in range(max_outer):
        mix = fit_mixture_residuals(eps, K, tol=em_tol, seed=seed + outer, init=mix)

        v = variance_vector(theta, centered)
        sigma = np.sqrt(v)
        t = theta.gamma * a * sigma
        exponent = t[:, None] * mix.mu[None, :] + 0.5 * (mix.delta**2)[None, :] * (t * t)[:, None]
        if np.any(np.abs(exponent) > EXP_GUARD):
            raise VarianceOverflowError("overflow in mixture tilt weights")
        w = mix.pi[None, :] * np.exp(exponent)
        denom = w.sum(axis=1)
        v_tilt = a * v * (w @ (mix.delta**2)) / denom
        w_tilt = sigma * (w @ mix.mu) / denom

        design = np.column_stack([a, v_tilt, np.ones(centered.n), z])
        coef, resid = least_squares(design, y - w_tilt, context="mixture refresh design")
        beta, gamma_new, theta0 = float(coef[0]), float(coef[1]), float(coef[2])
        thetaz = coef[3:].copy()
        eta0, etaz = stage2_fit(resid, z)
        theta_new = Theta(
            beta=beta, gamma=gamma_new, theta0=theta0, thetaz=thetaz, eta0=eta0, etaz=etaz
        )

        vnew = np.exp(eta0 + z @ etaz)
        fitted = beta * a + theta0 + z @ thetaz + gamma_new * v_tilt + w_tilt
        eps = (y - fitted) / np.sqrt(vnew)

        ll = mixture_loglik(theta_new, mix, centered)
        if trace and ll < trace[-1] - 1e-10:
            # a non-improving sweep: keep the previous, better iterate
            theta, mix = state
            converged = True
            break
        theta = theta_new
        state = (theta, mix)
        trace.append(ll)
        if len(trace) >= 2 and abs(trace[-1] - trace[-2]) / abs(trace[-2]) < rel_tol:
            converged = True
            break

    return MixtureFit(theta=theta, mix=mix, loglik_trace=trace, converged=converged)


def mixture_estimate(
    data: Dataset,
    K: int = 2,
    n_boot: int = 100,
    seed: int | None = None,
    level: float = 0.95,
) -> EstimateResult:
    """Alternating mixture fit wrapped with bootstrap standard errors."""
    base_seed = 0 if seed is None else int(seed)
    fit = alternating_fit(data, K=K, seed=base_seed)
    offset = float(np.mean(data.a))
    theta = fit.theta
    k = theta.k
    se = np.full(k, np.nan)
    if n_boot > 0:
        rng = np.random.default_rng(seed)
        draws = np.empty((n_boot, k))
        failures = 0
        warm = (fit.theta, fit.mix)
        for b in range(n_boot):
            idx = rng.integers(0, data.n, data.n)
            try:
                resampled = Dataset(y=data.y[idx], a=data.a[idx], z=data.z[idx])
                # warm start plus a looser EM tolerance: resample noise dwarfs
                # the last digits of the inner fit
                bf = alternating_fit(
                    resampled, K=K, init=warm, seed=base_seed + 101 + b, em_tol=1e-4
                )
                draws[b] = bf.theta.to_array()
            except (NumericError, ValueError, np.linalg.LinAlgError):
                draws[b] = np.nan
                failures += 1
        if failures > n_boot // 2:
            raise NumericError("bootstrap failed on more than half of the resamples")
        se = np.nanstd(draws, axis=0, ddof=1)
    low, high = wald_ci(theta, se, level)
    warnings = [] if fit.converged else ["alternating fit stopped before the tolerance"]
    return EstimateResult(
        theta_hat=theta,
        se=se,
        ci_low=low,
        ci_high=high,
        method="mixture",
        converged=fit.converged,
        iterations=len(fit.loglik_trace),
        centering_offset=offset,
        warnings=warnings,
    )
