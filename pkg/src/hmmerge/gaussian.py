"""Multivariate Gaussian log-densities and weighted maximum-likelihood estimation."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.linalg import solve_triangular

from .errors import DegenerateWeightsError, ParameterError

_LOG_2PI = math.log(2.0 * math.pi)

#: Default lower bound on covariance eigenvalues. Callers fitting real data
#: should pass a floor proportional to the data variance scale instead.
DEFAULT_VARIANCE_FLOOR = 1e-6


class CovStructure(Enum):
    """Constraint applied to estimated covariance matrices."""

    FULL = "full"
    SPHERICAL = "spherical"


@dataclass(eq=False)
class GaussianParams:
    """Mean vector and symmetric positive-definite covariance of one component."""

    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.covariance = np.asarray(self.covariance, dtype=float)
        if self.mean.ndim != 1 or self.mean.size == 0:
            raise ParameterError("mean must be a non-empty vector")
        q = self.mean.shape[0]
        if self.covariance.shape != (q, q):
            raise ParameterError(
                f"covariance shape {self.covariance.shape} does not match dimension {q}"
            )
        if not np.allclose(self.covariance, self.covariance.T, rtol=1e-9, atol=1e-12):
            raise ParameterError("covariance must be symmetric")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def _cholesky(params: GaussianParams) -> np.ndarray:
    try:
        return np.linalg.cholesky(params.covariance)
    except np.linalg.LinAlgError as exc:
        raise ParameterError("covariance is not positive definite") from exc


def log_density(x: np.ndarray, params: GaussianParams):
    """Log of the Gaussian density at ``x``.

    ``x`` may be a single vector or an ``(n, Q)`` matrix of row vectors;
    the result is a float or an ``n``-vector accordingly. Always finite for
    finite inputs because the covariance is positive definite.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    pts = np.atleast_2d(x)
    if pts.shape[1] != params.dim:
        raise ParameterError(
            f"points have dimension {pts.shape[1]}, parameters have {params.dim}"
        )
    chol = _cholesky(params)
    dev = pts - params.mean
    half = solve_triangular(chol, dev.T, lower=True)
    quad = np.einsum("ij,ij->j", half, half)
    log_det = 2.0 * np.log(np.diag(chol)).sum()
    out = -0.5 * (params.dim * _LOG_2PI + log_det + quad)
    return float(out[0]) if single else out


def _floor_eigenvalues(cov: np.ndarray, floor: float) -> np.ndarray:
    vals, vecs = np.linalg.eigh(cov)
    if vals[0] >= floor:
        return cov
    vals = np.maximum(vals, floor)
    floored = (vecs * vals) @ vecs.T
    return 0.5 * (floored + floored.T)


def weighted_mle(
    points: np.ndarray,
    weights: np.ndarray,
    structure: CovStructure = CovStructure.FULL,
    floor: float = DEFAULT_VARIANCE_FLOOR,
) -> GaussianParams:
    """Weighted maximum-likelihood Gaussian fit.

    The mean is the weighted average and the covariance the weighted scatter,
    shaped per ``structure``: FULL keeps the whole matrix, SPHERICAL pools the
    per-coordinate variances into a single value times the identity. All
    covariance eigenvalues are clamped from below at ``floor`` so shrinking
    responsibility sets cannot produce a singular component.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    w = np.asarray(weights, dtype=float)
    if w.shape != (pts.shape[0],):
        raise ValueError(f"weights shape {w.shape} does not match {pts.shape[0]} points")
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    total = w.sum()
    if total <= 0.0:
        raise DegenerateWeightsError("all weights are zero")
    q = pts.shape[1]
    mean = (w @ pts) / total
    dev = pts - mean
    if structure is CovStructure.SPHERICAL:
        sigma2 = (w @ np.einsum("ij,ij->i", dev, dev)) / (total * q)
        cov = max(sigma2, floor) * np.eye(q)
    else:
        cov = (dev * w[:, None]).T @ dev / total
        cov = 0.5 * (cov + cov.T)
        cov = _floor_eigenvalues(cov, floor)
    return GaussianParams(mean=mean, covariance=cov)
