"""Monte-Carlo portfolio losses with fluctuating (Wishart) correlations.

Every realization draws a ``K x N`` standard-normal matrix ``G`` and an
``N``-vector ``n``; the standardized log-return shock is
``A G n / sqrt(N)`` with ``A = E Lambda^{1/2}`` built from the eigenvectors
``E`` and eigenvalues ``Lambda`` of the correlation matrix. Given ``n`` this
is normal with covariance ``(|n|^2 / N) C``, which averages to ``C``.

Streams are keyed by chunk index, so results do not depend on the number of
worker threads.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .ensemble import CorrelationModel, homogeneous_correlation_spectrum
from .kernels import merton_losses
from .loss import PortfolioSpec, trapezoid_weights, write_density_csv

STATIONARY = math.inf


@dataclass(frozen=True, eq=False)
class SimConfig:
    """Simulation settings.

    ``N = math.inf`` (``STATIONARY``) switches the correlation fluctuations
    off. ``literal_paper_transform`` scales the normal draws with the
    eigenvalues themselves instead of their square roots; it is provided only
    to reproduce that variant and does not preserve the average covariance.
    """

    portfolio: PortfolioSpec
    correlation: Union[CorrelationModel, np.ndarray]
    N: float = STATIONARY
    realizations: int = 1_000_000
    seed: int = 0
    chunk_size: int = 2000
    bins: int = 10_000
    literal_paper_transform: bool = False
    max_stored: int = 50_000_000
    tail_fraction: float = 0.01
    threads: int = 1

    def __post_init__(self):
        if self.realizations < 1:
            raise ValueError("realizations must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        if not math.isinf(self.N):
            if self.N < 1 or int(self.N) != self.N:
                raise ValueError(f"finite N must be a positive integer in the simulation, got {self.N!r}")
            object.__setattr__(self, "N", int(self.N))
        corr = self.correlation
        K = corr.K if isinstance(corr, CorrelationModel) else np.shape(corr)[0]
        if K != self.portfolio.K:
            raise ValueError(f"correlation has K={K}, portfolio has K={self.portfolio.K}")
        if self.chunk_size < 1 or self.bins < 1 or self.threads < 1:
            raise ValueError("chunk_size, bins and threads must be positive")

    @property
    def stationary(self) -> bool:
        return math.isinf(self.N)

    def describe(self) -> dict:
        corr = self.correlation
        out = {
            "K": self.portfolio.K,
            "N": "inf" if self.stationary else self.N,
            "realizations": self.realizations,
            "seed": self.seed,
            "chunk_size": self.chunk_size,
            "literal_paper_transform": self.literal_paper_transform,
            "T": self.portfolio.T,
        }
        ratio = self.portfolio.F / self.portfolio.V0
        if np.all(ratio == ratio[0]):
            out["leverage"] = float(ratio[0])
        if isinstance(corr, CorrelationModel):
            out["c"] = corr.c
        else:
            out["correlation"] = "explicit"
        return out


@dataclass(eq=False)
class LossSample:
    """Monte-Carlo portfolio losses.

    ``losses`` is ``None`` in streaming mode, where only the histogram and
    the largest ``tail_fraction`` of the losses are retained.
    """

    losses: Optional[np.ndarray]
    config: SimConfig
    edges: np.ndarray
    counts: np.ndarray
    tail: np.ndarray = field(default_factory=lambda: np.empty(0))

    @property
    def realizations(self) -> int:
        return int(self.counts.sum())

    def to_csv(self, path) -> None:
        """Histogram on bin centres, same layout as a loss density.

        Values are bin frequencies over the trapezoid cell widths of the
        centre grid, so the file reads back as a :class:`LossDensity` whose
        cell masses are exactly the bin frequencies.
        """
        centres = 0.5 * (self.edges[1:] + self.edges[:-1])
        dens = self.counts / (self.counts.sum() * trapezoid_weights(centres))
        head = {"kind": "monte_carlo"}
        head.update(self.config.describe())
        write_density_csv(path, centres, dens, head)


def sampling_factor(correlation, literal_paper_transform: bool = False) -> np.ndarray:
    """``A`` with ``A A^T = C`` (or ``E Lambda`` in the literal variant)."""
    if isinstance(correlation, CorrelationModel):
        lam, E = homogeneous_correlation_spectrum(correlation)
    else:
        C = np.asarray(correlation, dtype=float)
        if C.ndim != 2 or C.shape[0] != C.shape[1] or np.max(np.abs(C - C.T)) > 1e-12:
            raise ValueError("correlation matrix must be square and symmetric")
        lam, E = np.linalg.eigh(C)
        if lam.min() < -1e-10 * max(1.0, lam.max()):
            raise ValueError(f"correlation matrix is not positive semidefinite (min eigenvalue {lam.min():.3e})")
        lam = np.clip(lam, 0.0, None)
    scale = lam if literal_paper_transform else np.sqrt(lam)
    return E * scale[None, :]


def _stream(seed: int, chunk: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(chunk,))))


def draw_shocks(rng: np.random.Generator, A: np.ndarray, N: float, size: int) -> np.ndarray:
    """Standardized log-return shocks, shape ``(size, K)``.

    Finite ``N``: ``A G n / sqrt(N)``. Stationary: ``A xi``.
    """
    K = A.shape[0]
    if math.isinf(N):
        xi = rng.standard_normal((size, K))
        return xi @ A.T
    G = rng.standard_normal((size, K, N))
    n = rng.standard_normal((size, N))
    y = np.einsum("bkn,bn->bk", G, n) / math.sqrt(N)
    return y @ A.T


def draw_asset_values(rng: np.random.Generator, cfg: SimConfig, size: int = 1, A: Optional[np.ndarray] = None) -> np.ndarray:
    """Asset values at maturity, shape ``(size, K)``."""
    p = cfg.portfolio
    if A is None:
        A = sampling_factor(cfg.correlation, cfg.literal_paper_transform)
    x = draw_shocks(rng, A, cfg.N, size)
    drift = (p.mu - 0.5 * p.rho**2) * p.T
    return p.V0 * np.exp(p.rho * math.sqrt(p.T) * x + drift)


def portfolio_loss(V, p: PortfolioSpec) -> np.ndarray:
    """Face-value weighted Merton loss of asset values ``V`` (``(..., K)``)."""
    V = np.asarray(V, dtype=float)
    frac = np.clip((p.F - V) / p.F, 0.0, None)
    return frac @ p.weights


def _chunk_losses(cfg: SimConfig, A: np.ndarray, chunk: int, size: int) -> np.ndarray:
    p = cfg.portfolio
    rng = _stream(cfg.seed, chunk)
    x = draw_shocks(rng, A, cfg.N, size)
    scale = p.rho * math.sqrt(p.T)
    offset = np.log(p.V0 / p.F) + (p.mu - 0.5 * p.rho**2) * p.T
    return np.clip(merton_losses(x, scale, offset, p.weights), 0.0, 1.0)


def run_simulation(cfg: SimConfig) -> LossSample:
    """Simulate ``cfg.realizations`` portfolio losses.

    Above ``cfg.max_stored`` realizations the individual losses are not
    kept; a histogram plus a reservoir of the largest losses is retained.
    """
    A = sampling_factor(cfg.correlation, cfg.literal_paper_transform)
    n_chunks = -(-cfg.realizations // cfg.chunk_size)
    sizes = [min(cfg.chunk_size, cfg.realizations - i * cfg.chunk_size) for i in range(n_chunks)]
    edges = np.linspace(0.0, 1.0, cfg.bins + 1)
    counts = np.zeros(cfg.bins, dtype=np.int64)
    streaming = cfg.realizations > cfg.max_stored
    # one extra slot so the quantile at exactly 1 - tail_fraction stays inside
    keep = int(math.ceil(cfg.tail_fraction * cfg.realizations)) + 1
    stored = [] if not streaming else None
    tail = np.empty(0)

    def consume(losses):
        nonlocal tail
        counts[:] += np.histogram(losses, bins=edges)[0]
        if stored is not None:
            stored.append(losses)
        else:
            tail = np.concatenate([tail, losses])
            if tail.size > keep:
                tail = np.partition(tail, tail.size - keep)[-keep:]

    work = lambda i: _chunk_losses(cfg, A, i, sizes[i])
    if cfg.threads == 1:
        for i in range(n_chunks):
            consume(work(i))
    else:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            # map preserves chunk order, so the merge is deterministic
            for losses in pool.map(work, range(n_chunks)):
                consume(losses)
    losses = np.concatenate(stored) if stored is not None else None
    reservoir = np.sort(tail)[::-1] if streaming else np.empty(0)
    return LossSample(losses, cfg, edges, counts, reservoir)


def sample_var_etl(s: LossSample, alpha: float) -> tuple[float, float]:
    """Empirical VaR (lower order statistic) and ETL (mean of losses >= VaR)."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    n = s.realizations
    if (1.0 - alpha) * n < 100:
        warnings.warn(f"only {(1 - alpha) * n:.0f} samples beyond the {alpha} quantile", RuntimeWarning, stacklevel=2)
    if s.losses is not None:
        return var_etl_from_losses(s.losses, alpha)
    rank_from_top = n - 1 - int(math.floor(alpha * (n - 1)))
    if rank_from_top >= s.tail.size:
        raise ValueError(
            f"alpha={alpha} lies outside the retained tail reservoir ({s.tail.size} of {n} samples)"
        )
    var = float(s.tail[rank_from_top])
    return var, float(s.tail[s.tail >= var].mean())


def var_etl_from_losses(losses, alpha: float) -> tuple[float, float]:
    losses = np.asarray(losses, dtype=float)
    var = float(np.quantile(losses, alpha, method="lower"))
    return var, float(losses[losses >= var].mean())


def round_half_point(x: float) -> float:
    """Round to the nearest 0.5, halves away from zero."""
    return math.copysign(math.floor(abs(x) * 2.0 + 0.5) / 2.0, x)


def relative_deviation_report(base: dict, variant: dict) -> dict:
    """Percentage deviation of ``variant`` risk numbers from ``base``.

    Both arguments map ``(leverage, alpha)`` to ``(VaR, ETL)``. The result
    maps ``(leverage, measure, alpha)`` to the deviation rounded to 0.5, or
    NaN where the base value is zero.
    """
    if set(base) != set(variant):
        missing = sorted(set(base) ^ set(variant))
        raise ValueError(f"risk grids differ at {missing}")
    out = {}
    for key in sorted(base):
        lev, alpha = key
        for i, measure in enumerate(("VaR", "ETL")):
            b, v = base[key][i], variant[key][i]
            out[(lev, measure, alpha)] = math.nan if b == 0 else round_half_point((v - b) / b * 100.0)
    return out
