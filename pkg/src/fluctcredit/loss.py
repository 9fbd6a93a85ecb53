"""Average portfolio loss distribution under fluctuating asset correlations.

Conditional on the ensemble variables ``z ~ chi2(N)`` and the collective
shock ``u ~ Normal(0, 1/N)`` the obligors are independent, so for large
``K`` the loss is approximately ``Normal(M1(z, u), M2(z, u))``. Averaging
over ``(z, u)`` gives the loss density; for ``K -> inf`` the conditional law
collapses to a point mass at ``m1(z, u)``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import integrate, linalg, special

from .ensemble import CorrelationModel
from .kernels import gaussian_cell_masses

DEFAULT_GRID_POINTS = 2000
RISK_LEVELS = (0.99, 0.995, 0.999)


class QuadratureError(RuntimeError):
    """A quadrature did not reach its tolerance."""


class QuadratureWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class HomogeneousTerms:
    """Contract terms shared by every obligor of a homogeneous portfolio."""

    F: float
    V0: float
    mu: float
    rho: float
    T: float

    def __post_init__(self):
        for name in ("F", "V0", "rho", "T"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    @property
    def leverage(self) -> float:
        return self.F / self.V0


@dataclass(frozen=True, eq=False)
class PortfolioSpec:
    """Per-obligor face values, initial asset values, drifts and volatilities.

    ``mu`` is per unit time and ``rho`` per square-root time, in the same time
    unit as the maturity ``T``.
    """

    F: np.ndarray
    V0: np.ndarray
    mu: np.ndarray
    rho: np.ndarray
    T: float

    def __post_init__(self):
        arrays = [np.atleast_1d(np.asarray(getattr(self, n), dtype=float)) for n in ("F", "V0", "mu", "rho")]
        K = max(a.size for a in arrays)
        arrays = [np.broadcast_to(a, (K,)).copy() for a in arrays]
        for name, a in zip(("F", "V0", "mu", "rho"), arrays):
            if not np.all(np.isfinite(a)):
                raise ValueError(f"{name} must be finite")
            object.__setattr__(self, name, a)
        if np.any(self.F <= 0) or np.any(self.V0 <= 0) or np.any(self.rho <= 0):
            raise ValueError("face values, initial asset values and volatilities must be positive")
        if not self.T > 0:
            raise ValueError("maturity T must be positive")
        object.__setattr__(self, "T", float(self.T))

    @classmethod
    def homogeneous(cls, K: int, F: float, V0: float, mu: float, rho: float, T: float) -> "PortfolioSpec":
        return cls(np.full(K, F), np.full(K, V0), np.full(K, mu), np.full(K, rho), T)

    @property
    def K(self) -> int:
        return self.F.size

    @property
    def weights(self) -> np.ndarray:
        f = self.F / self.F.sum()
        return f / f.sum()

    @property
    def sigma(self) -> np.ndarray:
        """Dimensionless standard deviation over the horizon, ``rho sqrt(T)``."""
        return self.rho * math.sqrt(self.T)

    def terms(self, k: int) -> HomogeneousTerms:
        return HomogeneousTerms(self.F[k], self.V0[k], self.mu[k], self.rho[k], self.T)

    def homogeneous_terms(self) -> Optional[HomogeneousTerms]:
        """Shared terms if every obligor is identical, else ``None``."""
        for a in (self.F, self.V0, self.mu, self.rho):
            if np.any(a != a[0]):
                return None
        return self.terms(0)

    def groups(self):
        """Distinct obligor types with their summed weights and squared weights."""
        table = np.column_stack([self.F, self.V0, self.mu, self.rho])
        uniq, inverse = np.unique(table, axis=0, return_inverse=True)
        f = self.weights
        w1 = np.bincount(inverse.reshape(-1), weights=f, minlength=len(uniq))
        w2 = np.bincount(inverse.reshape(-1), weights=f * f, minlength=len(uniq))
        return uniq, w1, w2


@dataclass(frozen=True)
class QuadratureConfig:
    """Node counts and truncation for the ``(z, u)`` integrals.

    ``gauss_laguerre_hermite`` uses generalized Gauss-Laguerre nodes in ``z``
    and Gauss-Hermite nodes in ``u``. ``adaptive`` keeps Gauss-Laguerre in
    ``z`` but integrates ``u`` with a uniform trapezoid rule on
    ``[-u_cutoff, u_cutoff] / sqrt(N)`` and doubles ``u_nodes`` until the
    density stops moving. Nodes whose weight falls below ``10**-z_cutoff``
    are skipped.
    """

    z_nodes: int = 64
    u_nodes: int = 64
    z_cutoff: float = 30.0
    u_cutoff: float = 9.0
    scheme: str = "adaptive"
    max_u_nodes: int = 16384
    rtol: float = 1e-3

    def __post_init__(self):
        if self.z_nodes < 8 or self.u_nodes < 8:
            raise ValueError("node counts must be at least 8")
        if not (self.z_cutoff > 0 and self.u_cutoff > 0):
            raise ValueError("cutoffs must be positive")
        if self.scheme not in ("gauss_laguerre_hermite", "adaptive"):
            raise ValueError(f"unknown quadrature scheme {self.scheme!r}")

    def as_dict(self) -> dict:
        return {
            "z_nodes": self.z_nodes,
            "u_nodes": self.u_nodes,
            "z_cutoff": self.z_cutoff,
            "u_cutoff": self.u_cutoff,
            "scheme": self.scheme,
        }


@dataclass(eq=False)
class LossDensity:
    """Tabulated loss density on an ascending grid in ``[0, 1]``.

    ``values[i]`` is the probability mass of the grid cell around ``grid[i]``
    divided by its width, where the cell widths are the trapezoid weights of
    the grid. ``underflow`` is the approximate mass that fell below zero and
    was folded into the first cell; ``overflow`` is mass above the grid that
    was dropped.
    """

    grid: np.ndarray
    values: np.ndarray
    params: dict = field(default_factory=dict)
    underflow: float = 0.0
    overflow: float = 0.0

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.grid.ndim != 1 or self.grid.size < 2 or np.any(np.diff(self.grid) <= 0):
            raise ValueError("grid must be strictly ascending with at least two points")
        if self.grid[0] < 0 or self.grid[-1] > 1:
            raise ValueError("grid must lie in [0, 1]")
        if self.values.shape != self.grid.shape:
            raise ValueError("values and grid differ in shape")
        if np.any(self.values < 0) or not np.all(np.isfinite(self.values)):
            raise ValueError("density values must be finite and nonnegative")

    @property
    def cell_widths(self) -> np.ndarray:
        return trapezoid_weights(self.grid)

    def cell_masses(self) -> np.ndarray:
        return self.values * self.cell_widths

    def mass(self) -> float:
        return float(np.sum(self.cell_masses()))

    def cdf(self) -> np.ndarray:
        """Cumulative mass up to and including each grid cell."""
        return np.cumsum(self.cell_masses())

    def to_csv(self, path) -> None:
        write_density_csv(path, self.grid, self.values, self._header())

    def _header(self) -> dict:
        head = dict(self.params)
        head["underflow"] = repr(float(self.underflow))
        head["overflow"] = repr(float(self.overflow))
        return head

    @classmethod
    def from_csv(cls, path) -> "LossDensity":
        grid, values, meta = read_density_csv(path)
        under = float(meta.pop("underflow", 0.0))
        over = float(meta.pop("overflow", 0.0))
        return cls(grid, values, meta, under, over)


def trapezoid_weights(grid: np.ndarray) -> np.ndarray:
    h = np.diff(grid)
    w = np.zeros(grid.size)
    w[:-1] += 0.5 * h
    w[1:] += 0.5 * h
    return w


def cell_edges(grid: np.ndarray) -> np.ndarray:
    mid = 0.5 * (grid[1:] + grid[:-1])
    return np.concatenate([[grid[0]], mid, [grid[-1]]])


def default_grid(points: int = DEFAULT_GRID_POINTS) -> np.ndarray:
    return np.linspace(0.0, 1.0, points)


def write_density_csv(path, grid, values, header: dict) -> None:
    lines = [f"# {k}={v}" for k, v in header.items()]
    lines.append("L,density")
    lines.extend(f"{x:.17g},{y:.17g}" for x, y in zip(grid, values))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_density_csv(path):
    meta = {}
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("=")
                meta[key.strip()] = value.strip()
            elif line.startswith("L,"):
                continue
            else:
                a, b = line.split(",")
                rows.append((float(a), float(b)))
    if not rows:
        raise ValueError(f"{path}: no density rows")
    arr = np.array(rows)
    return arr[:, 0], arr[:, 1], meta


# --- per-obligor moments -------------------------------------------------


def hat_F(z, F, V0, mu, rho, T):
    """Default threshold in the rescaled log-asset variable."""
    z = np.asarray(z, dtype=float)
    if np.any(z <= 0):
        raise ValueError("z must be positive")
    return (np.log(F / V0) - (mu - 0.5 * rho**2) * T) / np.sqrt(z)


def hat_F_portfolio(k: int, z, p: PortfolioSpec):
    return hat_F(z, p.F[k], p.V0[k], p.mu[k], p.rho[k], p.T)


def _check_c(c: float) -> None:
    if not (0.0 <= c < 1.0):
        raise ValueError(f"moments need c in [0, 1), got {c!r}")


def moments(z, u, F, V0, mu, rho, T, c, N):
    """Closed-form ``(m0, m1, m2)`` for one obligor type, broadcasting.

    ``m_j = E[(1 - V/F)^j ; V < F | z, u]``, the j-th conditional moment of
    the obligor's loss fraction (times the default indicator).
    """
    _check_c(c)
    z = np.asarray(z, dtype=float)
    u = np.asarray(u, dtype=float)
    sz = np.sqrt(z)
    drift = (mu - 0.5 * rho**2) * T
    Fh = (np.log(F / V0) - drift) / sz
    b = math.sqrt(c * T) * rho
    s = rho * np.sqrt(T * (1.0 - c) / N)
    d0 = (Fh + b * u) / s
    m0 = special.ndtr(d0)
    log_lev = np.log(V0 / F)
    with np.errstate(over="ignore", under="ignore"):
        e1 = np.exp(log_lev + drift - sz * b * u + 0.5 * z * s * s + special.log_ndtr(d0 - sz * s))
        e2 = np.exp(2.0 * (log_lev + drift) - 2.0 * sz * b * u + 2.0 * z * s * s + special.log_ndtr(d0 - 2.0 * sz * s))
    m1 = m0 - e1
    m2 = m0 - 2.0 * e1 + e2
    return m0, np.maximum(m1, 0.0), np.maximum(m2, 0.0)


def moment_closed_form(j: int, z, u, homog: HomogeneousTerms, model: CorrelationModel):
    """The ``j``-th conditional loss moment, ``j`` in ``{0, 1, 2}``."""
    if j not in (0, 1, 2):
        raise ValueError("j must be 0, 1 or 2")
    if model.c >= 1.0:
        raise ValueError("c = 1 is degenerate")
    return moments(z, u, homog.F, homog.V0, homog.mu, homog.rho, homog.T, model.c, model.N)[j]


def moment_numeric(j: int, z: float, u: float, homog: HomogeneousTerms, model: CorrelationModel,
                   epsrel: float = 1e-13) -> float:
    """The same moment by adaptive quadrature of its defining integral."""
    if j not in (0, 1, 2):
        raise ValueError("j must be 0, 1 or 2")
    c, N = model.c, model.N
    _check_c(c)
    if not z > 0:
        raise ValueError("z must be positive")
    F, V0, mu, rho, T = homog.F, homog.V0, homog.mu, homog.rho, homog.T
    drift = (mu - 0.5 * rho**2) * T
    sz = math.sqrt(z)
    Fh = float(hat_F(z, F, V0, mu, rho, T))
    center = -math.sqrt(c * T) * u * rho
    var = T * (1.0 - c) * rho**2 / N
    s = math.sqrt(var)
    norm = 1.0 / math.sqrt(2.0 * math.pi * var)
    lead = V0 / F

    def integrand(v):
        loss = 1.0 - lead * math.exp(sz * v + drift)
        return loss**j * norm * math.exp(-0.5 * (v - center) ** 2 / var)

    # the kernel is shifted by up to j*sqrt(z)*var by the exponential factor
    lo = min(Fh, center) - 40.0 * s - 2.0 * sz * var
    hi = Fh
    if hi <= lo:
        return 0.0
    pts = [p for p in (center, center - j * sz * var) if lo < p < hi]
    total, err = 0.0, 0.0
    knots = [lo] + sorted(pts) + [hi]
    for a, b in zip(knots[:-1], knots[1:]):
        val, e, *info = integrate.quad(integrand, a, b, epsabs=0.0, epsrel=epsrel, limit=500, full_output=1)
        total += val
        err += e
        if len(info) > 1 and info[0].get("ier", 0) not in (0,):
            raise QuadratureError(f"moment quadrature did not converge (error estimate {err:.3e})")
    if err > max(1e-10 * abs(total), 1e-300):
        raise QuadratureError(f"moment quadrature error estimate {err:.3e} for value {total:.3e}")
    return total


def big_M(z, u, p: PortfolioSpec, model: CorrelationModel):
    """Conditional mean ``M1`` and variance ``M2`` of the portfolio loss.

    Identical obligors are grouped, so a homogeneous portfolio costs one
    moment evaluation per node regardless of ``K``.
    """
    z = np.asarray(z, dtype=float)
    u = np.asarray(u, dtype=float)
    types, w1, w2 = p.groups()
    M1 = np.zeros(np.broadcast(z, u).shape)
    M2 = np.zeros_like(M1)
    for (F, V0, mu, rho), a, b in zip(types, w1, w2):
        _, m1, m2 = moments(z, u, F, V0, mu, rho, p.T, model.c, model.N)
        M1 += a * m1
        M2 += b * (m2 - m1 * m1)
    return M1, np.maximum(M2, 0.0)


# --- quadrature nodes ----------------------------------------------------


def chi2_nodes(N: float, n: int, prune: float = 30.0):
    """Gauss nodes and weights for ``E[h(z)]`` with ``z ~ chi2(N)``."""
    alpha = 0.5 * N - 1.0
    if special.gammaln(0.5 * N) < 600.0:
        t, w = special.roots_genlaguerre(n, alpha)
        w = w / math.exp(special.gammaln(0.5 * N))
    else:
        # Golub-Welsch on the normalized measure; avoids Gamma(N/2) overflow
        k = np.arange(n, dtype=float)
        diag = 2.0 * k + alpha + 1.0
        off = np.sqrt(k[1:] * (k[1:] + alpha))
        t, vec = linalg.eigh_tridiagonal(diag, off)
        w = vec[0] ** 2
    keep = w > 10.0 ** (-prune)
    return 2.0 * t[keep], w[keep]


def gaussian_nodes(N: float, n: int, scheme: str, cutoff: float, prune: float = 30.0):
    """Nodes and weights for ``E[h(u)]`` with ``u ~ Normal(0, 1/N)``."""
    if scheme == "gauss_laguerre_hermite":
        x, w = special.roots_hermite(n)
        u = x * math.sqrt(2.0 / N)
        w = w / math.sqrt(math.pi)
        keep = (w > 10.0 ** (-prune)) & (np.abs(u) * math.sqrt(N) <= cutoff)
        return u[keep], w[keep]
    y = np.linspace(-cutoff, cutoff, n)
    w = np.exp(-0.5 * y * y) / math.sqrt(2.0 * math.pi) * (y[1] - y[0])
    w[[0, -1]] *= 0.5
    return y / math.sqrt(N), w


def _finite_density_once(grid, p, model, q, u_nodes):
    z, wz = chi2_nodes(model.N, q.z_nodes, q.z_cutoff)
    if model.c == 0.0:
        u, wu = np.zeros(1), np.ones(1)
    else:
        u, wu = gaussian_nodes(model.N, u_nodes, q.scheme, q.u_cutoff, q.z_cutoff)
    Z, U = np.meshgrid(z, u, indexing="ij")
    W = (wz[:, None] * wu[None, :]).reshape(-1)
    M1, M2 = big_M(Z.reshape(-1), U.reshape(-1), p, model)
    masses, below, above = gaussian_cell_masses(W, M1, np.sqrt(M2), cell_edges(grid))
    return masses, below, above


def _assemble(grid, masses, below, above, params) -> LossDensity:
    widths = trapezoid_weights(grid)
    masses = masses.copy()
    underflow = 0.0
    if grid[0] == 0.0:
        masses[0] += below
        underflow = below
    values = masses / widths
    return LossDensity(grid, values, params, underflow=underflow, overflow=above + (below if grid[0] > 0 else 0.0))


def _density_params(kind, p, model, q, **extra):
    params = {"kind": kind, "K": p.K if p is not None else "inf", "c": repr(model.c), "N": repr(float(model.N))}
    homog = p.homogeneous_terms() if p is not None else None
    if homog is not None:
        params.update({k: repr(float(getattr(homog, k))) for k in ("F", "V0", "mu", "rho")})
    if p is not None:
        params["T"] = repr(float(p.T))
        ratio = p.F / p.V0
        if np.all(ratio == ratio[0]):
            params["leverage"] = repr(float(ratio[0]))
    params.update(q.as_dict())
    params.update(extra)
    return params


def avg_loss_density(L_grid, p: PortfolioSpec, model: CorrelationModel,
                     q: QuadratureConfig = QuadratureConfig()) -> LossDensity:
    """Average loss density for a finite portfolio.

    The conditional normal law of the loss is integrated over each grid cell
    rather than sampled at the grid point, so nodes with vanishing ``M2``
    contribute their point mass instead of dividing by zero.
    """
    grid = _check_grid(L_grid)
    _check_c(model.c)
    if model.stationary:
        raise ValueError("the analytic density needs finite N")
    u_nodes = q.u_nodes
    masses, below, above = _finite_density_once(grid, p, model, q, u_nodes)
    converged = q.scheme != "adaptive" or model.c == 0.0
    steps = 0
    while not converged:
        if 2 * u_nodes > q.max_u_nodes:
            warnings.warn(
                f"loss density not converged at {u_nodes} u-nodes; last change exceeded rtol={q.rtol}",
                QuadratureWarning,
                stacklevel=2,
            )
            break
        u_nodes *= 2
        steps += 1
        new = _finite_density_once(grid, p, model, q, u_nodes)
        l1 = float(np.sum(np.abs(new[0] - masses)))
        var_old = _var_index(masses, below, 0.999)
        var_new = _var_index(new[0], new[1], 0.999)
        masses, below, above = new
        moved = abs(grid[var_new] - grid[var_old]) > q.rtol * max(grid[var_old], grid[1])
        converged = l1 < q.rtol and not moved
    params = _density_params("finite", p, model, q, u_nodes_used=u_nodes)
    return _assemble(grid, masses, below, above, params)


def _var_index(masses, below, alpha):
    cdf = below + np.cumsum(masses)
    idx = int(np.searchsorted(cdf, alpha - 1e-12))
    return min(idx, masses.size - 1)


def _check_grid(L_grid) -> np.ndarray:
    grid = np.asarray(L_grid, dtype=float)
    if grid.ndim != 1 or grid.size < 2 or np.any(np.diff(grid) <= 0):
        raise ValueError("loss grid must be strictly ascending")
    if grid[0] < 0 or grid[-1] > 1:
        raise ValueError("loss grid must lie in [0, 1]")
    return grid


# --- K -> infinity -------------------------------------------------------


def dm1_du(z, u, homog: HomogeneousTerms, model: CorrelationModel):
    """Analytic ``d m1 / d u``; equals ``sqrt(c T z) rho (m0 - m1)``."""
    z = np.asarray(z, dtype=float)
    return np.sqrt(model.c * homog.T * z) * homog.rho * _m0_minus_m1(z, u, homog, model)


def _m1(z, u, homog, model):
    return moments(z, u, homog.F, homog.V0, homog.mu, homog.rho, homog.T, model.c, model.N)[1]


def solve_u0(L, z, homog: HomogeneousTerms, model: CorrelationModel, tol: float = 1e-12, max_expand: int = 60):
    """Solve ``m1(z, u0) = L`` elementwise over broadcast ``(L, z)``.

    Returns ``(u0, found)``; ``found`` is False where no sign change exists
    within the expanded bracket.
    """
    L, z = np.broadcast_arrays(np.asarray(L, dtype=float), np.asarray(z, dtype=float))
    L = L.reshape(-1)
    z = z.reshape(-1)
    B = np.full(L.shape, 10.0 / math.sqrt(model.N))
    lo, hi = -B.copy(), B.copy()
    f_lo = _m1(z, lo, homog, model) - L
    f_hi = _m1(z, hi, homog, model) - L
    for _ in range(max_expand):
        need_lo = f_lo > 0
        need_hi = f_hi < 0
        if not (need_lo.any() or need_hi.any()):
            break
        lo[need_lo] *= 2.0
        hi[need_hi] *= 2.0
        f_lo[need_lo] = _m1(z[need_lo], lo[need_lo], homog, model) - L[need_lo]
        f_hi[need_hi] = _m1(z[need_hi], hi[need_hi], homog, model) - L[need_hi]
    found = (f_lo <= 0) & (f_hi >= 0)
    for _ in range(200):
        width = hi - lo
        if np.all(width[found] <= tol * np.maximum(1.0, np.abs(lo[found]))):
            break
        mid = 0.5 * (lo + hi)
        f_mid = _m1(z, mid, homog, model) - L
        up = f_mid < 0
        lo = np.where(up, mid, lo)
        f_lo = np.where(up, f_mid, f_lo)
        hi = np.where(up, hi, mid)
        f_hi = np.where(up, f_hi, f_mid)
    # one secant step inside the final bracket
    denom = f_hi - f_lo
    with np.errstate(invalid="ignore", divide="ignore"):
        sec = lo - f_lo * (hi - lo) / denom
    u0 = np.where((denom > 0) & (sec >= lo) & (sec <= hi), sec, 0.5 * (lo + hi))
    return u0, found


def _check_monotone(z_nodes, homog, model, n: int = 257):
    B = 10.0 / math.sqrt(model.N)
    u = np.linspace(-B, B, n)
    vals = _m1(z_nodes[:, None], u[None, :], homog, model)
    if np.any(np.diff(vals, axis=1) < -1e-14):
        raise QuadratureError("m1 is not monotone in u; the root u0 is not unique")


def avg_loss_density_limit(L_grid, homog: HomogeneousTerms, model: CorrelationModel,
                           q: QuadratureConfig = QuadratureConfig(), cell_average: bool = False) -> LossDensity:
    """Average loss density of an infinitely granular homogeneous portfolio.

    By default the density is evaluated pointwise as the ``z`` average of
    ``phi_N(u0) / |dm1/du(u0)|``. With ``cell_average=True`` it is the
    difference of the exact limit CDF across grid cells instead, the same
    cell convention :func:`avg_loss_density` uses.
    """
    grid = _check_grid(L_grid)
    _check_c(model.c)
    if model.c == 0.0:
        raise ValueError("the K -> inf limit needs c > 0 (m1 is flat in u at c = 0)")
    if model.stationary:
        raise ValueError("the analytic density needs finite N")
    z, wz = chi2_nodes(model.N, q.z_nodes, q.z_cutoff)
    _check_monotone(z, homog, model)
    if cell_average:
        cdf = avg_loss_cdf_limit(cell_edges(grid), homog, model, q)
        masses = np.diff(cdf)
        params = _density_params("limit", None, model, q, cell_average=True)
        params.update({k: repr(float(getattr(homog, k))) for k in ("F", "V0", "mu", "rho", "T")})
        return _assemble(grid, masses, cdf[0], 1.0 - cdf[-1], params)
    Lg, Zg = np.meshgrid(grid, z, indexing="ij")
    u0, found = solve_u0(Lg, Zg, homog, model)
    deriv = dm1_du(Zg.reshape(-1), u0, homog, model)
    flat = found & (deriv < 1e-300)
    ok = found & ~flat
    phi = math.sqrt(model.N / (2.0 * math.pi)) * np.exp(-0.5 * model.N * u0**2)
    contrib = np.zeros_like(u0)
    contrib[ok] = phi[ok] / deriv[ok]
    values = (contrib.reshape(Lg.shape) * wz[None, :]).sum(axis=1)
    if grid[0] == 0.0:
        # integrable singularity at zero loss: use the exact first-cell mass
        first = avg_loss_cdf_limit(cell_edges(grid)[1], homog, model, q)[0]
        values[0] = first / trapezoid_weights(grid)[0]
    params = _density_params("limit", None, model, q, flagged_point_masses=int(flat.sum()))
    params.update({k: repr(float(getattr(homog, k))) for k in ("F", "V0", "mu", "rho", "T")})
    return LossDensity(grid, values, params)


def _m0_minus_m1(z, u, homog, model):
    m0, m1, _ = moments(z, u, homog.F, homog.V0, homog.mu, homog.rho, homog.T, model.c, model.N)
    return m0 - m1


def avg_loss_cdf_limit(L, homog: HomogeneousTerms, model: CorrelationModel,
                       q: QuadratureConfig = QuadratureConfig()) -> np.ndarray:
    """``P(loss <= L)`` for the infinite homogeneous portfolio.

    Since ``m1`` increases in ``u``, the event is ``u <= u0(L, z)``.
    """
    L = np.atleast_1d(np.asarray(L, dtype=float))
    z, wz = chi2_nodes(model.N, q.z_nodes, q.z_cutoff)
    Lg, Zg = np.meshgrid(L, z, indexing="ij")
    u0, found = solve_u0(Lg, Zg, homog, model)
    inner = np.where(found, special.ndtr(math.sqrt(model.N) * u0), np.where(Lg.reshape(-1) <= 0, 0.0, 1.0))
    return (inner.reshape(Lg.shape) * wz[None, :]).sum(axis=1)


# --- risk numbers --------------------------------------------------------


def var_etl_from_density(d: LossDensity, alpha: float) -> tuple[float, float]:
    """Value at Risk and Expected Tail Loss at level ``alpha``.

    VaR is the smallest grid loss whose cumulative cell mass reaches
    ``alpha``; ETL is the trapezoid conditional mean of the loss above VaR.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    cdf = d.cdf()
    if cdf[-1] < alpha - 1e-12:
        raise ValueError(f"alpha={alpha} exceeds the resolvable mass; maximum resolvable alpha is {cdf[-1]:.6g}")
    idx = int(np.searchsorted(cdf, alpha - 1e-12))
    var = float(d.grid[idx])
    g = d.grid[idx:]
    v = d.values[idx:]
    if g.size == 1:
        return var, var
    num = integrate.trapezoid(g * v, g)
    den = integrate.trapezoid(v, g)
    etl = float(num / den) if den > 0 else var
    return var, max(etl, var)


def risk_table(d: LossDensity, levels=RISK_LEVELS) -> dict:
    return {a: var_etl_from_density(d, a) for a in levels}
