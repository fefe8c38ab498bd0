"""Conditional normal log-likelihood with analytic score and diagnostics.

Per observation, with r = y - mu(a, z) and v = sigma2(z),

    l = -log(2*pi)/2 - log(v)/2 - r^2 / (2v).

The score stacks, in canonical parameter order,

    d/dbeta   = r a / v
    d/dgamma  = r a
    d/dtheta0 = r / v
    d/dthetaz = r z / v
    d/deta0   = -1/2 + r^2/(2v) + r gamma a
    d/detaz   = z (-1/2 + r^2/(2v) + r gamma a).

The Hessian is obtained by central finite differences of the analytic score
(step max(1e-6, 1e-7|theta_j|)) and symmetrized; second derivatives are
deliberately not hand-coded.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .errors import IdentificationError, NumericError, VarianceOverflowError
from .model import (
    EXP_GUARD,
    Dataset,
    Theta,
    least_squares,
    mean_vector,
    variance_vector,
)

LOG_2PI = math.log(2.0 * math.pi)

# Weak-identification guideline: estimates are trustworthy when the
# information-per-parameter ratio kappa_hat reaches at least this value.
KAPPA_WARN_THRESHOLD = 10.0


@dataclass(frozen=True)
class LikelihoodEval:
    """Log-likelihood value, score and Hessian bundled at one parameter point."""

    value: float
    score: np.ndarray
    hessian: np.ndarray


@dataclass(frozen=True)
class DiagnosticsReport:
    """Weak-identification and heteroscedasticity diagnostics.

    `min_eigenvalue` is the Hessian eigenvalue along its weakest-curvature
    direction (the one closest to zero at a maximum), so that
    kappa_hat == -min_eigenvalue / k.
    """

    kappa_hat: float
    k: int
    min_eigenvalue: float
    het_test_stat: float
    het_test_pvalue: float


def loglik(theta: Theta, data: Dataset) -> float:
    """Conditional normal log-likelihood, including the 2*pi constant."""
    v = variance_vector(theta, data)
    r = data.y - mean_vector(theta, data, variance=v)
    return float(np.sum(-0.5 * LOG_2PI - 0.5 * np.log(v) - r * r / (2.0 * v)))


def _score_columns(vecs: np.ndarray, data: Dataset) -> np.ndarray:
    """Analytic scores for parameter vectors stacked as columns (k x m)."""
    p = data.p
    beta = vecs[0]
    gamma = vecs[1]
    theta0 = vecs[2]
    thetaz = vecs[3 : 3 + p]
    eta0 = vecs[3 + p]
    etaz = vecs[4 + p :]

    a = data.a[:, None]
    exponent = eta0[None, :] + data.z @ etaz
    bad = np.abs(exponent) > EXP_GUARD
    if np.any(bad):
        row = int(np.nonzero(bad.any(axis=1))[0][0])
        raise VarianceOverflowError(
            f"variance overflow: |exponent| > {EXP_GUARD:g} at row {row}", row=row
        )
    v = np.exp(exponent)
    mu = beta[None, :] * a + gamma[None, :] * (a * v) + theta0[None, :] + data.z @ thetaz
    r = data.y[:, None] - mu
    rv = r / v
    u = -0.5 + r * r / (2.0 * v) + r * (gamma[None, :] * a)

    out = np.empty_like(vecs)
    out[0] = data.a @ rv
    out[1] = data.a @ r
    out[2] = rv.sum(axis=0)
    out[3 : 3 + p] = data.z.T @ rv
    out[3 + p] = u.sum(axis=0)
    out[4 + p :] = data.z.T @ u
    return out


def score(theta: Theta, data: Dataset) -> np.ndarray:
    """Analytic gradient of the log-likelihood in canonical order."""
    return _score_columns(theta.to_array()[:, None], data)[:, 0]


def hessian(
    theta: Theta,
    data: Dataset,
    symmetrize: bool = True,
    chunk: int = 8,
) -> np.ndarray:
    """k x k second-derivative matrix via central differences of the score.

    Perturbations are batched `chunk` coordinates at a time so the inner work
    runs as matrix products; set symmetrize=False to inspect the raw
    (numerically near-symmetric) matrix.
    """
    vec = theta.to_array()
    k = vec.shape[0]
    steps = np.maximum(1e-6, 1e-7 * np.abs(vec))
    H = np.empty((k, k))
    for start in range(0, k, chunk):
        idx = np.arange(start, min(start + chunk, k))
        m = idx.shape[0]
        pert = np.repeat(vec[:, None], 2 * m, axis=1)
        pert[idx, np.arange(m)] += steps[idx]
        pert[idx, m + np.arange(m)] -= steps[idx]
        s = _score_columns(pert, data)
        H[:, idx] = (s[:, :m] - s[:, m : 2 * m]) / (2.0 * steps[idx])[None, :]
    if symmetrize:
        H = 0.5 * (H + H.T)
    return H


def evaluate(theta: Theta, data: Dataset) -> LikelihoodEval:
    """Bundle value, score and (symmetrized) Hessian at one point."""
    return LikelihoodEval(
        value=loglik(theta, data),
        score=score(theta, data),
        hessian=hessian(theta, data),
    )


def kappa_hat(hessian_at_estimate: np.ndarray, k: int) -> float:
    """Information-per-parameter ratio at an estimate.

    Returns the smallest eigenvalue of the negative Hessian (the observed
    information) divided by the parameter count k.  Values below
    KAPPA_WARN_THRESHOLD signal weak identification; negative values mean the
    point is not a maximum.
    """
    H = np.asarray(hessian_at_estimate, dtype=float)
    if H.ndim != 2 or H.shape[0] != H.shape[1]:
        raise ValueError("hessian must be a square matrix")
    try:
        eigvals = np.linalg.eigvalsh(0.5 * (H + H.T))
    except np.linalg.LinAlgError as exc:
        raise NumericError("diagnostic unavailable: eigen-decomposition failed") from exc
    return float(-eigvals[-1] / k)


def het_test(data: Dataset) -> tuple[float, float]:
    """Score-type test for instrument-dependent outcome variance.

    Regresses squared residuals of the saturated linear mean fit on (1, Z);
    the statistic is n * R^2, compared to chi-square with p degrees of freedom.
    """
    n, p = data.n, data.p
    if n <= 2 * p + 4:
        raise ValueError(f"need n > 2p + 4 observations (n={n}, p={p})")
    design = np.column_stack(
        [np.ones(n), data.a, data.z, data.a[:, None] * data.z]
    )
    _, resid = least_squares(design, data.y, context="stage-1 design")
    w = resid * resid
    # an exact mean fit leaves only rounding noise: no variance to test
    noise_floor = (1e-10 * (1.0 + float(np.max(np.abs(data.y))))) ** 2
    if float(w.max(initial=0.0)) <= noise_floor:
        return 0.0, 1.0
    zdesign = np.column_stack([np.ones(n), data.z])
    coef, _, rank, _ = np.linalg.lstsq(zdesign, w, rcond=None)
    if rank < zdesign.shape[1]:
        raise IdentificationError("instruments collinear")
    fitted = zdesign @ coef
    sst = float(np.sum((w - w.mean()) ** 2))
    if sst <= 0.0:
        return 0.0, 1.0
    ssr = float(np.sum((w - fitted) ** 2))
    r2 = max(0.0, 1.0 - ssr / sst)
    stat = n * r2
    pvalue = float(stats.chi2.sf(stat, df=p))
    return stat, pvalue


def diagnostics_report(data: Dataset, hessian_at_estimate: np.ndarray) -> DiagnosticsReport:
    """Combine the heteroscedasticity test with the kappa_hat diagnostic."""
    stat, pvalue = het_test(data)
    H = np.asarray(hessian_at_estimate, dtype=float)
    k = H.shape[0]
    kappa = kappa_hat(H, k)
    return DiagnosticsReport(
        kappa_hat=kappa,
        k=k,
        min_eigenvalue=-kappa * k,
        het_test_stat=stat,
        het_test_pvalue=pvalue,
    )
