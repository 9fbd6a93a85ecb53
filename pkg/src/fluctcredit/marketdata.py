"""Calibration pipeline: prices -> returns -> covariance -> N estimates."""

from __future__ import annotations

import csv
import datetime as dt_
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np
from scipy import integrate

from .ensemble import CorrelationModel, CovarianceSpec, rotated_scaled_density

TRADING_DAYS_PER_MONTH = 20
TRADING_DAYS_PER_YEAR = 252
CVM_CRITICAL_5PCT = 0.461


class DataError(ValueError):
    """Base class for input-data problems."""


class UnparseableRowError(DataError):
    pass


class NonMonotoneDatesError(DataError):
    pass


class NonPositivePriceError(DataError):
    pass


class ZeroVarianceError(DataError):
    pass


@dataclass(eq=False)
class PricePanel:
    tickers: list
    dates: list
    prices: np.ndarray  # (K, M)
    dropped: list = field(default_factory=list)

    @property
    def K(self) -> int:
        return self.prices.shape[0]

    @property
    def M(self) -> int:
        return self.prices.shape[1]


@dataclass(eq=False)
class ReturnPanel:
    returns: np.ndarray  # (K, M - interval)
    interval: int
    tickers: list = field(default_factory=list)
    window: Optional[int] = None

    @property
    def K(self) -> int:
        return self.returns.shape[0]


@dataclass(eq=False)
class CovarianceEstimate:
    """Sample covariance of one return panel plus per-asset drift and volatility.

    ``cov.sigma`` is dimensionless over the return interval; ``mu`` and
    ``rho`` are per unit time and per square-root unit time.
    """

    cov: CovarianceSpec
    mu: np.ndarray
    rho: np.ndarray
    time_unit_days: float


@dataclass(frozen=True)
class NFit:
    N_hat: float
    method: str
    diagnostic: float
    at_boundary: bool = False

    def __post_init__(self):
        if not self.N_hat > 0:
            raise ValueError("N_hat must be positive")


@dataclass(eq=False)
class PairwiseAggregate:
    sample: np.ndarray
    windows: int
    pairs_used: int
    pairs_skipped: int


# --- ingestion -----------------------------------------------------------


def ingest_prices(path, missing_threshold: float = 0.10) -> PricePanel:
    """Read ``date,<ticker>,...`` CSV prices.

    Tickers missing more than ``missing_threshold`` of the days are dropped
    and listed in ``PricePanel.dropped``; afterwards any day still missing a
    price is removed, so the panel has no gaps.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r and any(cell.strip() for cell in r)]
    if not rows:
        raise UnparseableRowError(f"{path}: empty price file")
    header = [h.strip() for h in rows[0]]
    if len(header) < 2 or header[0].lower() != "date":
        raise UnparseableRowError(f"{path}: header must be 'date' followed by tickers")
    tickers = header[1:]
    dates, values = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise UnparseableRowError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            day = dt_.date.fromisoformat(row[0].strip())
            vals = [float(c) if c.strip() not in ("", "NA", "NaN", "nan") else math.nan for c in row[1:]]
        except ValueError as exc:
            raise UnparseableRowError(f"{path}:{lineno}: {exc}") from None
        if dates and day <= dates[-1]:
            raise NonMonotoneDatesError(f"{path}:{lineno}: date {day} does not follow {dates[-1]}")
        dates.append(day)
        values.append(vals)
    if not dates:
        raise UnparseableRowError(f"{path}: no price rows")
    prices = np.array(values, dtype=float).T
    bad = np.isfinite(prices) & (prices <= 0)
    if np.any(bad):
        k, t = np.argwhere(bad)[0]
        raise NonPositivePriceError(f"{path}: non-positive price for {tickers[k]} on {dates[t]}")
    missing = np.mean(~np.isfinite(prices), axis=1)
    keep = missing <= missing_threshold
    dropped = [t for t, ok in zip(tickers, keep) if not ok]
    prices = prices[keep]
    tickers = [t for t, ok in zip(tickers, keep) if ok]
    full_days = np.all(np.isfinite(prices), axis=0)
    dates = [d for d, ok in zip(dates, full_days) if ok]
    return PricePanel(tickers, dates, prices[:, full_days], dropped)


def export_prices(panel: PricePanel, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", *panel.tickers])
        for t, day in enumerate(panel.dates):
            w.writerow([day.isoformat(), *(f"{v:.17g}" for v in panel.prices[:, t])])


# --- returns and covariance ---------------------------------------------


def compute_returns(p: PricePanel, dt: int = 1) -> ReturnPanel:
    """Arithmetic returns ``(S(t + dt) - S(t)) / S(t)``, overlapping."""
    if dt < 1 or int(dt) != dt:
        raise ValueError("dt must be a positive integer number of trading days")
    if dt >= p.M:
        raise ValueError(f"dt={dt} must be smaller than the number of days M={p.M}")
    S = p.prices
    return ReturnPanel((S[:, dt:] - S[:, :-dt]) / S[:, :-dt], int(dt), list(p.tickers))


def estimate_covariance(r: ReturnPanel, time_unit_days: float = TRADING_DAYS_PER_MONTH) -> CovarianceEstimate:
    """Sample covariance (divisor ``M - 1``) and its correlation matrix."""
    X = r.returns
    if X.shape[1] < 2:
        raise ValueError("need at least two observations")
    S = np.atleast_2d(np.cov(X, ddof=1))
    sd = np.sqrt(np.diag(S))
    if np.any(sd == 0):
        names = [r.tickers[i] if r.tickers else str(i) for i in np.flatnonzero(sd == 0)]
        raise ZeroVarianceError(f"zero-variance assets: {', '.join(names)}")
    C = S / np.outer(sd, sd)
    C = 0.5 * (C + C.T)
    np.fill_diagonal(C, 1.0)
    horizon = r.interval / time_unit_days
    mu = X.mean(axis=1) / horizon
    rho = sd / math.sqrt(horizon)
    return CovarianceEstimate(CovarianceSpec(sd, C), mu, rho, time_unit_days)


def homogeneous_summary(cov: CovarianceSpec) -> CorrelationModel:
    """Average off-diagonal correlation as a homogeneous model (N left at inf)."""
    K = cov.K
    if K < 2:
        raise ValueError("need at least two assets")
    if cov.is_homogeneous:
        return CorrelationModel(K, cov.correlation.c)
    C = cov.correlation
    c = (C.sum() - np.trace(C)) / (K * (K - 1))
    return CorrelationModel(K, float(c))


def homogenized(cov: CovarianceSpec) -> CovarianceSpec:
    """Same volatilities, correlations replaced by their average."""
    return CovarianceSpec(cov.sigma, homogeneous_summary(cov))


# --- standardization -----------------------------------------------------


def _eig_2x2(a, b, d):
    half_tr = 0.5 * (a + d)
    rad = np.hypot(0.5 * (a - d), b)
    theta = 0.5 * np.arctan2(2.0 * b, a - d)
    return half_tr + rad, half_tr - rad, np.cos(theta), np.sin(theta)


def windowed_pairwise_aggregate(r: ReturnPanel, window: int = 25, rel_tol: float = 1e-10) -> PairwiseAggregate:
    """Pool pairwise returns standardized within short windows.

    For each non-overlapping window and each asset pair the window's 2x2
    sample covariance is diagonalized; the demeaned pair is rotated into its
    eigenbasis and each component divided by the square root of its
    eigenvalue. Pairs whose covariance is singular are skipped and counted.
    """
    X = r.returns
    K, M = X.shape
    if M < window:
        raise ValueError(f"panel has {M} observations, fewer than one window of {window}")
    n_win = M // window
    ii, jj = np.triu_indices(K, k=1)
    chunks, used, skipped = [], 0, 0
    for w in range(n_win):
        block = X[:, w * window:(w + 1) * window]
        block = block - block.mean(axis=1, keepdims=True)
        S = block @ block.T / (window - 1)
        a, b, d = S[ii, ii], S[ii, jj], S[jj, jj]
        l1, l2, cs, sn = _eig_2x2(a, b, d)
        ok = l2 > rel_tol * np.maximum(l1, np.finfo(float).tiny)
        skipped += int((~ok).sum())
        used += int(ok.sum())
        x, y = block[ii[ok]], block[jj[ok]]
        cs, sn = cs[ok, None], sn[ok, None]
        first = (cs * x + sn * y) / np.sqrt(l1[ok, None])
        second = (-sn * x + cs * y) / np.sqrt(l2[ok, None])
        chunks.extend([first.ravel(), second.ravel()])
    sample = np.sort(np.concatenate(chunks)) if chunks else np.empty(0)
    return PairwiseAggregate(sample, n_win, used, skipped)


def rotate_scale_returns(r: ReturnPanel, cov: CovarianceSpec, center: bool = True) -> np.ndarray:
    """Rotate return vectors into the eigenbasis of ``Sigma`` and scale to unit variance.

    Returns the pooled components over all times and eigen-directions.
    """
    X = r.returns
    if X.shape[0] != cov.K:
        raise ValueError("covariance dimension does not match the panel")
    if center:
        X = X - X.mean(axis=1, keepdims=True)
    lam, E = np.linalg.eigh(cov.matrix())
    if lam[0] <= 1e-12 * max(lam[-1], 1e-300):
        raise np.linalg.LinAlgError(f"covariance is not positive definite (min eigenvalue {lam[0]:.3e})")
    Y = (E.T @ X) / np.sqrt(lam)[:, None]
    return Y.ravel()


# --- model CDF of the rotated, scaled returns ----------------------------

_GL_X, _GL_W = np.polynomial.legendre.leggauss(8)
CDF_GRID_POINTS = 4096


@lru_cache(maxsize=512)
def _cdf_table(N: float):
    xmax = max(9.0, 35.0 / math.sqrt(N))
    x = np.linspace(0.0, xmax, CDF_GRID_POINTS)
    a, b = x[:-1], x[1:]
    half = 0.5 * (b - a)
    nodes = (0.5 * (a + b))[:, None] + half[:, None] * _GL_X[None, :]
    pieces = (rotated_scaled_density(nodes, N) * _GL_W[None, :]).sum(axis=1) * half
    # the first cell may hold an integrable singularity at zero (N <= 1)
    pieces[0] = integrate.quad(lambda t: float(rotated_scaled_density(t, N)), 0.0, x[1], epsabs=1e-15,
                               epsrel=1e-12, limit=200)[0]
    cdf = 0.5 + np.concatenate([[0.0], np.cumsum(pieces)])
    # the tail beyond xmax is below 1e-12; renormalize the residual quadrature error
    cdf = 0.5 + (cdf - 0.5) * (0.5 / (cdf[-1] - 0.5))
    pdf = rotated_scaled_density(x, N)
    if N <= 1.0:
        pdf[0] = math.inf
    return x, cdf, pdf


def rotated_scaled_cdf(x, N: float) -> np.ndarray:
    """CDF of the rotated-and-scaled density.

    Tabulated once per ``N`` by cell-wise Gauss-Legendre quadrature and
    evaluated by cubic Hermite interpolation (the density is the slope).
    """
    grid, table, pdf = _cdf_table(float(N))
    x = np.asarray(x, dtype=float)
    ax = np.abs(x)
    h = grid[1] - grid[0]
    i = np.clip((ax / h).astype(np.int64), 0, grid.size - 2)
    t = (ax - grid[i]) / h
    y0, y1 = table[i], table[i + 1]
    d0, d1 = pdf[i] * h, pdf[i + 1] * h
    h00 = (1 + 2 * t) * (1 - t) ** 2
    h10 = t * (1 - t) ** 2
    h01 = t * t * (3 - 2 * t)
    h11 = t * t * (t - 1)
    with np.errstate(invalid="ignore"):
        cubic = h00 * y0 + h10 * d0 + h01 * y1 + h11 * d1
    # fall back to linear interpolation where the slope is infinite (N < 1 at zero)
    upper = np.where(np.isfinite(cubic), cubic, y0 + t * (y1 - y0))
    upper = np.where(ax >= grid[-1], 1.0, upper)
    return np.where(x >= 0, upper, 1.0 - upper)


# --- N estimators --------------------------------------------------------

DEFAULT_N_GRID = tuple(float(n) for n in range(1, 51))


def _scan(score, grid: Sequence[float]):
    grid = np.asarray(grid, dtype=float)
    vals = np.array([score(n) for n in grid])
    i = int(np.argmin(vals))
    coarse_best = grid[i]
    at_boundary = i == grid.size - 1 and grid.size > 1
    lo = grid[i - 1] if i > 0 else max(grid[i] - 1.0, 0.1)
    hi = grid[i + 1] if i < grid.size - 1 else grid[i]
    fine = np.round(np.arange(lo, hi + 1e-9, 0.1), 10)
    fine = fine[fine > 0]
    fvals = np.array([score(n) for n in fine])
    j = int(np.argmin(fvals))
    if fvals[j] < vals[i]:
        return float(fine[j]), float(fvals[j]), at_boundary
    return float(coarse_best), float(vals[i]), at_boundary


def fit_N_least_squares(sample, N_grid: Sequence[float] = DEFAULT_N_GRID, min_count: int = 30) -> NFit:
    """Fit ``N`` by least squares between empirical and model log-densities.

    The histogram uses Freedman-Diaconis bins. The model side is the exact
    bin average of the density (CDF difference over the bin width), so the
    comparison is free of binning bias. Bins with fewer than ``min_count``
    entries are ignored: the log of a small count is biased upward in the
    tails and would pull the fit toward heavy tails (small ``N``).
    """
    sample = np.asarray(sample, dtype=float)
    if sample.size < 1000:
        raise ValueError("least-squares fit needs at least 1000 observations")
    if np.ptp(sample) == 0:
        raise ValueError("degenerate histogram: all values equal")
    edges = np.histogram_bin_edges(sample, bins="fd")
    counts, edges = np.histogram(sample, bins=edges)
    width = np.diff(edges)
    use = counts >= max(min_count, 1)
    if use.sum() < 3:
        raise ValueError("degenerate histogram: fewer than three populated bins")
    log_emp = np.log(counts[use] / (sample.size * width[use]))
    tiny = np.finfo(float).tiny

    def score(N):
        mass = np.diff(rotated_scaled_cdf(edges, N))[use] / width[use]
        return float(np.sum((log_emp - np.log(np.maximum(mass, tiny))) ** 2))

    N_hat, resid, boundary = _scan(score, N_grid)
    return NFit(N_hat, "least_squares", resid, boundary)


def cramer_von_mises(sample, cdf) -> float:
    """One-sample statistic ``1/(12n) + sum (F(x_(i)) - (2i-1)/(2n))^2``."""
    x = np.sort(np.asarray(sample, dtype=float))
    n = x.size
    ranks = (2.0 * np.arange(1, n + 1) - 1.0) / (2.0 * n)
    return float(1.0 / (12.0 * n) + np.sum((cdf(x) - ranks) ** 2))


def fit_N_cramer_von_mises(sample, N_grid: Sequence[float] = DEFAULT_N_GRID) -> NFit:
    """Pick the ``N`` whose model CDF minimizes the Cramer-von Mises statistic."""
    x = np.sort(np.asarray(sample, dtype=float))
    if x.size < 1000:
        raise ValueError("Cramer-von Mises fit needs at least 1000 observations")
    if np.ptp(x) == 0:
        raise ValueError("degenerate sample: all values equal")
    n = x.size
    ranks = (2.0 * np.arange(1, n + 1) - 1.0) / (2.0 * n)

    def score(N):
        return float(1.0 / (12.0 * n) + np.sum((rotated_scaled_cdf(x, N) - ranks) ** 2))

    N_hat, stat, boundary = _scan(score, N_grid)
    return NFit(N_hat, "cramer_von_mises", stat, boundary)


def variance_of_square_norm(K: int, c: float, N: float) -> float:
    """Model variance of ``x = r^T r`` for unit-variance returns."""
    return (4.0 * (0.5 + c * c) * K * K / N + 2.0 * c * c * K * K
            + 4.0 * (1.0 - c * c) * K / N + 2.0 * (1.0 - c * c) * K)


def estimate_N_variance_identity(r: ReturnPanel, c: float) -> NFit:
    """Solve the variance identity of ``x = r^T r`` for ``N``.

    Each asset is standardized to zero mean and unit variance first. The
    identity is linear in ``1/N``.
    """
    if not 0.0 <= c < 1.0:
        raise ValueError("c must lie in [0, 1)")
    X = r.returns
    K = X.shape[0]
    sd = X.std(axis=1, ddof=1)
    if np.any(sd == 0):
        raise ZeroVarianceError("zero-variance asset in panel")
    Y = (X - X.mean(axis=1, keepdims=True)) / sd[:, None]
    x = np.sum(Y * Y, axis=0)
    var_x = float(np.var(x, ddof=1))
    slope = 4.0 * (0.5 + c * c) * K * K + 4.0 * (1.0 - c * c) * K
    offset = 2.0 * c * c * K * K + 2.0 * (1.0 - c * c) * K
    if var_x <= offset:
        raise ValueError(
            f"sample variance {var_x:.4g} is below the N -> inf floor {offset:.4g}; inconsistent with the model"
        )
    return NFit(slope / (var_x - offset), "variance_identity", var_x)


# --- synthetic panels ----------------------------------------------------


def sample_rotated_scaled(rng: np.random.Generator, N: float, size: int) -> np.ndarray:
    """Draw from the rotated-and-scaled law: ``sqrt(z/N) xi`` with ``z ~ chi2(N)``."""
    return np.sqrt(rng.chisquare(N, size) / N) * rng.standard_normal(size)


def factor_correlation(loadings) -> np.ndarray:
    """Factor correlation matrix ``C = B B^T`` with a unit diagonal.

    ``loadings`` has shape ``(K,)`` for one factor or ``(K, m)`` for ``m``
    factors; every row must have norm at most one.
    """
    B = np.asarray(loadings, dtype=float)
    if B.ndim == 1:
        B = B[:, None]
    if np.any(np.einsum("ij,ij->i", B, B) > 1.0 + 1e-12):
        raise ValueError("factor loadings must have row norms <= 1")
    C = B @ B.T
    np.fill_diagonal(C, 1.0)
    return C


def synthetic_ensemble_returns(rng: np.random.Generator, corr: np.ndarray, sigma, mu, N: Optional[float],
                               M: int) -> np.ndarray:
    """Returns ``mu + sigma * sqrt(z_t/N) C^{1/2} xi_t`` with a fresh ``z_t ~ chi2(N)`` each step.

    ``N=None`` gives stationary normal returns. Shape ``(K, M)``.
    """
    corr = np.asarray(corr, dtype=float)
    K = corr.shape[0]
    lam, E = np.linalg.eigh(corr)
    A = E * np.sqrt(np.clip(lam, 0.0, None))[None, :]
    xi = A @ rng.standard_normal((K, M))
    if N is not None:
        xi = xi * np.sqrt(rng.chisquare(N, M) / N)[None, :]
    return np.asarray(mu, dtype=float).reshape(-1, 1) + np.asarray(sigma, dtype=float).reshape(-1, 1) * xi


def prices_from_returns(returns: np.ndarray, start: float = 100.0, first_day: dt_.date = dt_.date(2000, 1, 3),
                        tickers: Optional[list] = None) -> PricePanel:
    """Compound one-day arithmetic returns into a business-day price panel."""
    K, M = returns.shape
    if np.any(returns <= -1.0):
        raise ValueError("returns at or below -100% cannot be compounded")
    S = start * np.concatenate([np.ones((K, 1)), np.cumprod(1.0 + returns, axis=1)], axis=1)
    days, day = [], first_day
    while len(days) < M + 1:
        if day.weekday() < 5:
            days.append(day)
        day += dt_.timedelta(days=1)
    tickers = tickers or [f"A{k:04d}" for k in range(K)]
    return PricePanel(tickers, days, S)

