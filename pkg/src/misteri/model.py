"""Structural location-scale model shared by every estimator.

The outcome mean is mu(a, z) = beta*a + gamma*a*sigma2(z) + theta0 + thetaz'z
with log-linear conditional variance sigma2(z) = exp(eta0 + etaz'z).  The
parameter vector flattens in the fixed order

    (beta, gamma, theta0, thetaz[0..p-1], eta0, etaz[0..p-1]),

giving k = 4 + 2p entries; all score/Hessian indexing and serialized output
follow this order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import IdentificationError, VarianceOverflowError

# exp() arguments beyond this leave double range; diverging optimizer steps
# must fail loudly instead of propagating inf/0.
EXP_GUARD = 700.0


@dataclass(frozen=True)
class Dataset:
    """Observed sample: outcome y, treatment a, instrument matrix z (n x p)."""

    y: np.ndarray
    a: np.ndarray
    z: np.ndarray
    a_centered: bool = False
    n: int = field(init=False)
    p: int = field(init=False)

    def __post_init__(self):
        # contiguous copies keep downstream linear algebra bit-reproducible
        # regardless of how the caller sliced the inputs
        y = np.ascontiguousarray(np.atleast_1d(self.y), dtype=float)
        a = np.ascontiguousarray(np.atleast_1d(self.a), dtype=float)
        z = np.ascontiguousarray(self.z, dtype=float)
        if z.ndim == 1:
            z = z.reshape(-1, 1)
        if z.ndim != 2:
            raise ValueError("z must be a 2-d array (n x p)")
        n = y.shape[0]
        if a.shape[0] != n or z.shape[0] != n:
            raise ValueError("y, a and z must have the same number of rows")
        if z.shape[1] < 1:
            raise ValueError("at least one instrument column is required")
        for name, arr in (("y", y), ("a", a), ("z", z)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite values in {name}")
        for j in range(z.shape[1]):
            if z[:, j].min() == z[:, j].max():
                raise IdentificationError(
                    f"instrument column {j} is constant; it carries no information"
                )
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "p", z.shape[1])


@dataclass(frozen=True)
class Theta:
    """Full parameter vector of the location-scale model."""

    beta: float
    gamma: float
    theta0: float
    thetaz: np.ndarray
    eta0: float
    etaz: np.ndarray

    def __post_init__(self):
        thetaz = np.atleast_1d(np.asarray(self.thetaz, dtype=float))
        etaz = np.atleast_1d(np.asarray(self.etaz, dtype=float))
        if thetaz.shape != etaz.shape or thetaz.ndim != 1:
            raise ValueError("thetaz and etaz must be 1-d arrays of equal length")
        object.__setattr__(self, "thetaz", thetaz)
        object.__setattr__(self, "etaz", etaz)

    @property
    def p(self) -> int:
        return self.thetaz.shape[0]

    @property
    def k(self) -> int:
        return 4 + 2 * self.p

    def to_array(self) -> np.ndarray:
        """Flatten in the canonical order (beta, gamma, theta0, thetaz, eta0, etaz)."""
        return np.concatenate(
            [[self.beta, self.gamma, self.theta0], self.thetaz, [self.eta0], self.etaz]
        )

    @classmethod
    def from_array(cls, vec: np.ndarray, p: int) -> "Theta":
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (4 + 2 * p,):
            raise ValueError(f"expected a vector of length {4 + 2 * p}")
        return cls(
            beta=float(vec[0]),
            gamma=float(vec[1]),
            theta0=float(vec[2]),
            thetaz=vec[3 : 3 + p].copy(),
            eta0=float(vec[3 + p]),
            etaz=vec[4 + p :].copy(),
        )


@dataclass(frozen=True)
class StageOneFit:
    """Saturated-in-interaction linear mean fit: y ~ (1, a, z, a*z)."""

    theta0_hat: float
    thetaA_hat: float
    thetaz_hat: np.ndarray
    thetaAz_hat: np.ndarray
    residuals: np.ndarray


def _checked_exp(exponent: np.ndarray | float) -> np.ndarray | float:
    """exp() with a hard guard on the exponent range."""
    ex = np.asarray(exponent, dtype=float)
    bad = np.abs(ex) > EXP_GUARD
    if np.any(bad):
        row = int(np.argmax(bad)) if ex.ndim else None
        raise VarianceOverflowError(
            f"variance overflow: |exponent| > {EXP_GUARD:g}"
            + (f" at row {row}" if row is not None else ""),
            row=row,
        )
    out = np.exp(ex)
    return float(out) if out.ndim == 0 else out


def sigma2_eval(eta0: float, etaz: np.ndarray, z_row: np.ndarray) -> float:
    """Conditional outcome variance exp(eta0 + etaz'z) for one instrument row."""
    etaz = np.atleast_1d(np.asarray(etaz, dtype=float))
    z_row = np.atleast_1d(np.asarray(z_row, dtype=float))
    if etaz.shape != z_row.shape:
        raise ValueError("etaz and z_row must have the same length")
    return _checked_exp(eta0 + etaz @ z_row)


def mu_eval(theta: Theta, a: float, z_row: np.ndarray) -> float:
    """Conditional outcome mean beta*a + gamma*a*sigma2(z) + theta0 + thetaz'z."""
    z_row = np.atleast_1d(np.asarray(z_row, dtype=float))
    s2 = sigma2_eval(theta.eta0, theta.etaz, z_row)
    return theta.beta * a + theta.gamma * a * s2 + theta.theta0 + theta.thetaz @ z_row


def variance_vector(theta: Theta, data: Dataset) -> np.ndarray:
    """Per-row conditional variance over the whole sample."""
    return _checked_exp(theta.eta0 + data.z @ theta.etaz)


def mean_vector(theta: Theta, data: Dataset, variance: np.ndarray | None = None) -> np.ndarray:
    """Per-row conditional mean over the whole sample."""
    v = variance_vector(theta, data) if variance is None else variance
    return theta.beta * data.a + theta.gamma * data.a * v + theta.theta0 + data.z @ theta.thetaz


def standardized_residuals(theta: Theta, data: Dataset) -> np.ndarray:
    """(y - mu) / sigma per row; iid standard normal under the true parameters."""
    v = variance_vector(theta, data)
    return (data.y - mean_vector(theta, data, variance=v)) / np.sqrt(v)


def center_treatment(data: Dataset) -> tuple[Dataset, float]:
    """Return a copy of the data with mean-zero treatment plus the subtracted offset.

    The input is never mutated; estimators call this so that a = 0 refers to the
    average treatment value, and report the offset in their results.
    """
    offset = float(np.mean(data.a))
    centered = Dataset(y=data.y, a=data.a - offset, z=data.z, a_centered=True)
    return centered, offset


def least_squares(design: np.ndarray, y: np.ndarray, context: str = "design"):
    """OLS solve with an explicit rank check.

    Returns (coefficients, residuals).  Raises IdentificationError naming
    `context` when the design matrix is column-rank deficient.
    """
    design = np.asarray(design, dtype=float)
    coef, _, rank, _ = np.linalg.lstsq(design, y, rcond=None)
    if rank < design.shape[1]:
        raise IdentificationError(f"collinear {context}")
    return coef, y - design @ coef
