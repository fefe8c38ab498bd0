"""Shared test constructions."""

import numpy as np

from misteri import Dataset, Theta
from misteri.model import mean_vector, variance_vector


def zero_score_dataset(theta: Theta, n_pairs: int = 300, seed: int = 0):
    """Data whose score vanishes exactly at `theta`.

    Observations come in duplicated-(a, z) pairs with residuals +sqrt(v) and
    -sqrt(v): the mean-parameter score terms cancel pairwise and the variance
    terms satisfy r^2 = v exactly, so S(theta) = 0 up to float roundoff.
    """
    rng = np.random.default_rng(seed)
    p = theta.p
    a_half = rng.standard_normal(n_pairs)
    a_half -= a_half.mean()  # estimators re-center; keep that a no-op
    z_half = rng.integers(0, 3, size=(n_pairs, p)).astype(float)
    a = np.concatenate([a_half, a_half])
    z = np.vstack([z_half, z_half])
    shell = Dataset(y=np.zeros(2 * n_pairs), a=a, z=z)
    v = variance_vector(theta, shell)
    mu = mean_vector(theta, shell, variance=v)
    signs = np.concatenate([np.ones(n_pairs), -np.ones(n_pairs)])
    y = mu + signs * np.sqrt(v)
    return Dataset(y=y, a=a, z=z)


def binary_iv_dataset(
    n: int,
    seed: int,
    beta: float = 0.8,
    gamma: float = 0.2,
    theta0: float = 1.0,
    thetaz: float = 0.3,
    eta0: float = 0.1,
    etaz: float = 0.3,
    z_prob: float = 0.3,
    a_prob: float = 0.5,
):
    """Binary-treatment, binary-instrument analogue of the benchmark design."""
    rng = np.random.default_rng(seed)
    z = (rng.random(n) < z_prob).astype(float)
    a = (rng.random(n) < a_prob).astype(float)
    v = np.exp(eta0 + etaz * z)
    y = beta * a + gamma * a * v + theta0 + thetaz * z + np.sqrt(v) * rng.standard_normal(n)
    return Dataset(y=y, a=a, z=z)


def pooled_stratum_variances(y, a, z):
    """Within-(a, z)-cell variances pooled per instrument stratum (ddof=1)."""
    out = np.empty(2)
    for zv in (0, 1):
        num = 0.0
        dof = 0
        for av in (0, 1):
            cell = y[(a == av) & (z == zv)]
            num += (cell.size - 1) * cell.var(ddof=1)
            dof += cell.size - 1
        out[zv] = num / dof
    return out
