"""Ensemble-averaged return densities and homogeneous correlation algebra.

The return vector is modelled as a multivariate normal whose covariance is
averaged over a Wishart ensemble with ``N`` degrees of freedom around the
mean ``Sigma = sigma C sigma``. Equivalently, ``r | z ~ Normal(0, (z/N) Sigma)``
with ``z ~ chi2(N)``; the closed form of that mixture is a K-Bessel density.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy import special

from .special import log_kv, log_kv_array

LINALG_TOL = 1e-12
_LOG_2PI = math.log(2.0 * math.pi)


class SingularDensityWarning(RuntimeWarning):
    """The density diverges at the requested point; a nearby value was returned."""


@dataclass(frozen=True)
class CorrelationModel:
    """Homogeneous average correlation ``c`` with fluctuation strength ``N``."""

    K: int
    c: float
    N: float = math.inf

    def __post_init__(self):
        if int(self.K) != self.K or self.K < 1:
            raise ValueError(f"K must be a positive integer, got {self.K!r}")
        object.__setattr__(self, "K", int(self.K))
        lower = -1.0 / (self.K - 1) if self.K > 1 else -math.inf
        if not (lower < self.c < 1.0):
            raise ValueError(
                f"c={self.c!r} outside the positive-definite range ({lower:.6g}, 1) for K={self.K}"
            )
        if not self.N > 0:
            raise ValueError(f"N must be positive, got {self.N!r}")

    @property
    def stationary(self) -> bool:
        return math.isinf(self.N)

    def with_N(self, N: float) -> "CorrelationModel":
        return CorrelationModel(self.K, self.c, N)

    def matrix(self) -> np.ndarray:
        C = np.full((self.K, self.K), self.c)
        np.fill_diagonal(C, 1.0)
        return C


@dataclass(frozen=True, eq=False)
class CovarianceSpec:
    """Per-asset standard deviations plus a correlation structure.

    ``correlation`` is either a :class:`CorrelationModel` or an explicit
    symmetric matrix with unit diagonal.
    """

    sigma: np.ndarray
    correlation: Union[CorrelationModel, np.ndarray]

    def __post_init__(self):
        sigma = np.atleast_1d(np.asarray(self.sigma, dtype=float))
        if sigma.ndim != 1 or np.any(~(sigma > 0)):
            raise ValueError("sigma must be a vector of positive reals")
        object.__setattr__(self, "sigma", sigma)
        corr = self.correlation
        if isinstance(corr, CorrelationModel):
            if corr.K != sigma.size:
                raise ValueError(f"correlation model has K={corr.K}, sigma has {sigma.size} entries")
            return
        corr = np.atleast_2d(np.asarray(corr, dtype=float))
        if corr.shape != (sigma.size, sigma.size):
            raise ValueError(f"correlation matrix shape {corr.shape} does not match K={sigma.size}")
        if np.max(np.abs(corr - corr.T)) > LINALG_TOL:
            raise ValueError("correlation matrix is not symmetric within 1e-12")
        if np.max(np.abs(np.diag(corr) - 1.0)) > LINALG_TOL:
            raise ValueError("correlation matrix diagonal must be exactly 1")
        corr = 0.5 * (corr + corr.T)
        np.fill_diagonal(corr, 1.0)
        object.__setattr__(self, "correlation", corr)

    @property
    def K(self) -> int:
        return self.sigma.size

    @property
    def is_homogeneous(self) -> bool:
        return isinstance(self.correlation, CorrelationModel)

    def correlation_matrix(self) -> np.ndarray:
        if self.is_homogeneous:
            return self.correlation.matrix()
        return self.correlation

    def matrix(self) -> np.ndarray:
        """Dense ``Sigma = sigma C sigma``."""
        return self.sigma[:, None] * self.correlation_matrix() * self.sigma[None, :]

    def quadratic_form(self, r) -> tuple[float, float]:
        """Return ``(r^T Sigma^{-1} r, log det Sigma)``."""
        r = np.asarray(r, dtype=float).reshape(-1)
        if r.size != self.K:
            raise ValueError(f"r has {r.size} entries, expected {self.K}")
        y = r / self.sigma
        log_det_sigma = 2.0 * np.sum(np.log(self.sigma))
        if self.is_homogeneous:
            K, c = self.K, self.correlation.c
            top = 1.0 + (K - 1) * c
            q = (np.dot(y, y) - c * y.sum() ** 2 / top) / (1.0 - c)
            log_det = math.log(top) + (K - 1) * math.log1p(-c)
            return float(q), log_det + log_det_sigma
        eigval, eigvec = np.linalg.eigh(self.correlation)
        if eigval[0] <= LINALG_TOL * max(1.0, eigval[-1]):
            raise np.linalg.LinAlgError(
                f"covariance is non-invertible (smallest correlation eigenvalue {eigval[0]:.3e})"
            )
        proj = eigvec.T @ y
        q = float(np.sum(proj**2 / eigval))
        return q, float(np.sum(np.log(eigval))) + log_det_sigma


def homogeneous_correlation_spectrum(model: CorrelationModel) -> tuple[np.ndarray, np.ndarray]:
    """Exact eigen-decomposition of ``(1-c) I + c e e^T``.

    Returns eigenvalues in descending order (the collective mode first) and
    an orthonormal eigenvector matrix whose first column is ``e/sqrt(K)``.
    The orthogonal complement uses the Helmert basis.
    """
    K, c = model.K, model.c
    eigenvalues = np.full(K, 1.0 - c)
    eigenvalues[0] = 1.0 + (K - 1) * c
    U = np.empty((K, K))
    U[:, 0] = 1.0 / math.sqrt(K)
    for j in range(1, K):
        col = np.zeros(K)
        col[:j] = 1.0
        col[j] = -float(j)
        U[:, j] = col / math.sqrt(j * (j + 1))
    return eigenvalues, U


def _log_ensemble_density(q: float, log_det_sigma: float, K: int, N: float) -> float:
    nu = 0.5 * (K - N)
    log_pref = (
        0.5 * K * math.log(N)
        - 0.5 * (N - 2.0) * math.log(2.0)
        - special.gammaln(0.5 * N)
        - 0.5 * (K * _LOG_2PI + log_det_sigma)
    )
    x = math.sqrt(N * q)
    if x == 0.0:
        if nu < 0.0:
            # K_nu(x) x^{-nu} -> Gamma(|nu|) 2^{|nu|-1} as x -> 0
            return log_pref + special.gammaln(-nu) + (-nu - 1.0) * math.log(2.0)
        warnings.warn(
            f"density diverges at r=0 for K={K}, N={N}; evaluated at the smallest positive radius",
            SingularDensityWarning,
            stacklevel=3,
        )
        x = np.finfo(float).tiny
    return log_pref + log_kv(nu, x) - nu * math.log(x)


def avg_return_density(r, cov: CovarianceSpec, N: float, log: bool = False) -> float:
    """Ensemble-averaged return density ``<g>(r | Sigma, N)``.

    Parameters
    ----------
    r : array_like, shape (K,)
        Return vector over one interval.
    cov : CovarianceSpec
        Average covariance. Homogeneous models use the spectral shortcut.
    N : float
        Fluctuation strength; any positive real.
    log : bool
        Return the log-density instead (useful for large ``K``).

    For ``K >= N`` the density diverges at ``r = 0``; there the value at the
    smallest positive radius is returned and a :class:`SingularDensityWarning`
    is emitted.
    """
    if not N > 0:
        raise ValueError(f"N must be positive, got {N!r}")
    r = np.asarray(r, dtype=float).reshape(-1)
    if not np.all(np.isfinite(r)):
        raise ValueError("r must be finite")
    q, log_det = cov.quadratic_form(r)
    out = _log_ensemble_density(max(q, 0.0), log_det, cov.K, float(N))
    if log:
        return out
    return min(math.exp(min(out, 709.0)), np.finfo(float).max)


def rotated_scaled_density(r_tilde, N: float) -> np.ndarray:
    """Marginal density of one rotated, eigenvalue-scaled return component.

    A symmetric K-Bessel (variance-gamma) law with unit variance. For
    ``N <= 1`` the density has an integrable singularity at zero; there the
    value is returned as ``inf`` (N < 1) or via the log-divergent small-x
    limit evaluated at the smallest positive argument (N == 1).
    """
    if not N > 0:
        raise ValueError(f"N must be positive, got {N!r}")
    x = np.abs(np.asarray(r_tilde, dtype=float)) * math.sqrt(N)
    nu = 0.5 * (N - 1.0)
    log_pref = 0.5 * (1.0 - N) * math.log(2.0) + 0.5 * math.log(N) - 0.5 * math.log(math.pi) - special.gammaln(0.5 * N)
    scalar = x.ndim == 0
    x = np.atleast_1d(x)
    out = np.empty_like(x)
    zero = x == 0.0
    pos = ~zero
    if np.any(pos):
        with np.errstate(divide="ignore"):
            out[pos] = np.exp(log_pref + nu * np.log(x[pos]) + log_kv_array(nu, x[pos]))
    if np.any(zero):
        if nu > 0.0:
            out[zero] = math.exp(log_pref + special.gammaln(nu) + (nu - 1.0) * math.log(2.0))
        elif nu == 0.0:
            tiny = np.finfo(float).tiny
            out[zero] = math.exp(log_pref + log_kv(0.0, tiny))
        else:
            out[zero] = math.inf
    return out[0] if scalar else out


def multivariate_normal_density(r, cov: CovarianceSpec, log: bool = False) -> float:
    """Correlated normal density ``g(r | Sigma)``; the ``N -> inf`` reference."""
    q, log_det = cov.quadratic_form(r)
    out = -0.5 * (cov.K * _LOG_2PI + log_det) - 0.5 * q
    return out if log else math.exp(out)
