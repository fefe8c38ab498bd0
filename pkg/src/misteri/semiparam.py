"""Semiparametric three-stage estimator with an unrestricted error law.

The mean surface is fit with a polynomial-in-treatment, saturated-in-instrument
basis, the variance surface with a log-linear fit on (1, z, z^2), and the
selection tilt is estimated empirically: g_i(gamma) is the exponentially
tilted mean of the standardized residuals.  (beta, gamma) minimize the
resulting residual sum of squares, profiling beta out in closed form and
searching gamma on a bounded bracket.

Instruments must have finite support {0, 1, 2}; continuous instruments are a
documented limitation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import PchipInterpolator

from .errors import IdentificationError, InputError, NumericError
from .estimators import _log_linear_moment_fit
from .model import Dataset, least_squares

# exact tilted means below this sample size; an interpolated shared tilt
# function above it (the tilt is one smooth scalar function of t = gamma*a*sigma)
_EXACT_N = 1000
_GRID_POINTS = 2049
_BOOT_GRID_POINTS = 513


def _check_finite_support(z: np.ndarray):
    if not np.isin(z, (0.0, 1.0, 2.0)).all():
        raise InputError("semiparam requires finite-support instruments (values in {0, 1, 2})")


def _mean_basis(a: np.ndarray, z: np.ndarray, degree: int) -> np.ndarray:
    """Columns: 1, a..a^degree, then per instrument z_j, z_j^2 and all
    a^d * z_j^e interactions; the layout makes mu(0, 0) the first coefficient."""
    a = np.asarray(a, dtype=float)
    z = np.asarray(z, dtype=float)
    n = a.shape[0]
    cols = [np.ones(n)]
    a_pows = [a**d for d in range(1, degree + 1)]
    cols.extend(a_pows)
    for j in range(z.shape[1]):
        zj = z[:, j]
        cols.extend([zj, zj**2])
    for j in range(z.shape[1]):
        zj = z[:, j]
        for zpow in (zj, zj**2):
            cols.extend([ap * zpow for ap in a_pows])
    return np.column_stack(cols)


@dataclass(frozen=True)
class MeanSurface:
    """Evaluable fitted mean surface mu(a, z)."""

    coef: np.ndarray
    degree: int
    p: int

    def mu(self, a, z) -> np.ndarray:
        a = np.atleast_1d(np.asarray(a, dtype=float))
        z = np.asarray(z, dtype=float)
        if z.ndim == 1:
            z = z.reshape(-1, self.p)
        return _mean_basis(a, z, self.degree) @ self.coef

    def mu0(self, z) -> np.ndarray:
        """Treatment-free mean mu(0, z)."""
        z = np.asarray(z, dtype=float)
        if z.ndim == 1:
            z = z.reshape(-1, self.p)
        return self.mu(np.zeros(z.shape[0]), z)


@dataclass(frozen=True)
class VarianceSurface:
    """Evaluable fitted variance surface sigma2(z) = exp(eta' (1, z, z^2))."""

    eta: np.ndarray
    p: int

    def sigma2(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        if z.ndim == 1:
            z = z.reshape(-1, self.p)
        design = np.column_stack([np.ones(z.shape[0]), z, z**2])
        return np.exp(design @ self.eta)


@dataclass(frozen=True)
class SemiparamFit:
    """Semiparametric estimate of (beta, gamma) with its RSS objective."""

    beta: float
    gamma: float
    objective: float
    se: np.ndarray

    def __post_init__(self):
        if self.objective < 0:
            raise ValueError("objective must be non-negative")


def fit_np_mean(data: Dataset, degree: int = 3) -> MeanSurface:
    """Fit the mean surface on the polynomial-by-saturated basis.

    Identification constraints (no z-only constant, interactions vanishing at
    a=0 and z=0) are built into the basis itself.
    """
    _check_finite_support(data.z)
    basis = _mean_basis(data.a, data.z, degree)
    coef, _ = least_squares(basis, data.y, context="mean-surface basis")
    return MeanSurface(coef=coef, degree=degree, p=data.p)


def fit_np_variance(residuals: np.ndarray, z: np.ndarray) -> VarianceSurface:
    """Log-linear variance fit on the saturated basis (1, z, z^2) per column."""
    residuals = np.asarray(residuals, dtype=float)
    z = np.asarray(z, dtype=float)
    if z.ndim == 1:
        z = z.reshape(-1, 1)
    design = np.column_stack([np.ones(z.shape[0]), z, z**2])
    eta = _log_linear_moment_fit(residuals * residuals, design, context="variance-surface fit")
    return VarianceSurface(eta=eta, p=z.shape[1])


def ghat_eval(gamma: float, a_i: float, sigma_i: float, eps_hat: np.ndarray) -> float:
    """Exponentially tilted mean of residuals at tilt t = gamma * a_i * sigma_i."""
    eps_hat = np.asarray(eps_hat, dtype=float)
    if eps_hat.size == 0:
        raise ValueError("eps_hat must be non-empty")
    t = gamma * a_i * sigma_i
    if not np.isfinite(t):
        raise NumericError("gamma out of numeric range")
    x = t * eps_hat
    x -= x.max()
    w = np.exp(x)
    out = float((eps_hat @ w) / w.sum())
    if not np.isfinite(out):
        raise NumericError("gamma out of numeric range")
    return out


def _tilted_means(t_values: np.ndarray, eps: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Exact tilted means of eps at each tilt in t_values."""
    out = np.empty(t_values.shape[0])
    for start in range(0, t_values.shape[0], chunk):
        tv = t_values[start : start + chunk]
        x = tv[:, None] * eps[None, :]
        x -= x.max(axis=1, keepdims=True)
        w = np.exp(x)
        out[start : start + chunk] = (w @ eps) / w.sum(axis=1)
    return out


class _TiltFunction:
    """Shared tilted-mean function g(t); exact for small samples, a monotone
    cubic interpolant on a dense grid otherwise."""

    def __init__(self, eps: np.ndarray, t_max: float, grid_points: int = _GRID_POINTS):
        self.eps = eps
        if eps.size <= _EXACT_N:
            self.interp = None
        else:
            grid = np.linspace(-t_max, t_max, grid_points)
            self.interp = PchipInterpolator(grid, _tilted_means(grid, eps))

    def __call__(self, t: np.ndarray) -> np.ndarray:
        if self.interp is None:
            return _tilted_means(np.asarray(t, dtype=float), self.eps)
        return self.interp(t)


def _semiparam_point(
    data: Dataset,
    degree: int,
    bracket: tuple[float, float],
    grid_points: int,
    tol: float,
    tilt_grid: int = _GRID_POINTS,
):
    """Point estimation core: returns (beta, gamma, objective)."""
    mean = fit_np_mean(data, degree)
    resid = data.y - mean.mu(data.a, data.z)
    varf = fit_np_variance(resid, data.z)
    sigma = np.sqrt(varf.sigma2(data.z))
    eps_hat = resid / sigma

    tilt_scale = data.a * sigma
    target_base = data.y - mean.mu0(data.z)
    t_max = max(abs(bracket[0]), abs(bracket[1])) * float(np.max(np.abs(tilt_scale))) + 1e-9
    if t_max * float(np.max(np.abs(eps_hat))) > 690.0:
        raise NumericError("gamma out of numeric range")
    tilt = _TiltFunction(eps_hat, t_max, grid_points=tilt_grid)
    a_dot = float(data.a @ data.a)
    if a_dot <= 0:
        raise IdentificationError("treatment has no variation")

    def rss(gamma: float) -> tuple[float, float]:
        g = tilt(gamma * tilt_scale)
        target = target_base - sigma * g
        beta = float(data.a @ target) / a_dot
        resid_g = target - beta * data.a
        return float(resid_g @ resid_g), beta

    grid = np.linspace(bracket[0], bracket[1], grid_points)
    values = np.array([rss(g)[0] for g in grid])
    vmin = float(values.min())
    if (float(values.max()) - vmin) < 1e-10 * max(vmin, 1e-300):
        raise IdentificationError("gamma weakly identified: flat objective")
    i_best = int(values.argmin())
    lo = grid[max(0, i_best - 1)]
    hi = grid[min(grid_points - 1, i_best + 1)]

    # bounded golden-section search on [lo, hi]
    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    x1 = hi - invphi * (hi - lo)
    x2 = lo + invphi * (hi - lo)
    f1, _ = rss(x1)
    f2, _ = rss(x2)
    while hi - lo > tol:
        if f1 <= f2:
            hi, x2, f2 = x2, x1, f1
            x1 = hi - invphi * (hi - lo)
            f1, _ = rss(x1)
        else:
            lo, x1, f1 = x1, x2, f2
            x2 = lo + invphi * (hi - lo)
            f2, _ = rss(x2)
    gamma = 0.5 * (lo + hi)
    objective, beta = rss(gamma)
    return beta, gamma, objective


def semiparam_fit(
    data: Dataset,
    degree: int = 3,
    bracket: tuple[float, float] = (-2.0, 2.0),
    grid_points: int = 41,
    tol: float = 1e-6,
    n_boot: int = 100,
    seed: int | None = None,
) -> SemiparamFit:
    """Semiparametric estimate of (beta, gamma).

    For fixed gamma, beta has a closed-form least-squares solution; gamma is
    found by a grid pre-scan over `bracket` refined with golden-section search.
    Standard errors use a nonparametric bootstrap over the whole pipeline
    (n_boot=0 skips them).
    """
    beta, gamma, objective = _semiparam_point(data, degree, bracket, grid_points, tol)
    se = np.full(2, np.nan)
    if n_boot > 0:
        rng = np.random.default_rng(seed)
        # resamples restart near the point estimate on a narrowed bracket
        half = max(0.5, 10.0 * tol)
        nb_lo = max(bracket[0], gamma - half)
        nb_hi = min(bracket[1], gamma + half)
        draws = np.empty((n_boot, 2))
        failures = 0
        for b in range(n_boot):
            idx = rng.integers(0, data.n, data.n)
            try:
                resampled = Dataset(y=data.y[idx], a=data.a[idx], z=data.z[idx])
                # narrowed bracket and a coarser tilt grid: resampling noise
                # dominates the interpolation error
                bb, bg, _ = _semiparam_point(
                    resampled, degree, (nb_lo, nb_hi), 11, tol, tilt_grid=_BOOT_GRID_POINTS
                )
                draws[b] = (bb, bg)
            except (IdentificationError, NumericError):
                draws[b] = np.nan
                failures += 1
        if failures > n_boot // 2:
            raise NumericError("bootstrap failed on more than half of the resamples")
        se = np.nanstd(draws, axis=0, ddof=1)
    return SemiparamFit(beta=beta, gamma=gamma, objective=objective, se=se)
