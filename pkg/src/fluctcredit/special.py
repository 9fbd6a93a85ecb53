"""Log-space modified Bessel function of the second kind.

``scipy.special.kve`` covers the ordinary range. Two regimes overflow there
and are patched: large orders (uniform Debye expansion) and tiny arguments
(leading small-x term).
"""

import math

import numpy as np
from scipy import special

_EULER_GAMMA = 0.5772156649015329

# Debye polynomials u_k(t), coefficients in ascending powers of t.
_DEBYE_U = (
    (1.0,),
    (0.0, 3.0 / 24.0, 0.0, -5.0 / 24.0),
    (0.0, 0.0, 81.0 / 1152.0, 0.0, -462.0 / 1152.0, 0.0, 385.0 / 1152.0),
    (0.0, 0.0, 0.0, 30375.0 / 414720.0, 0.0, -369603.0 / 414720.0, 0.0,
     765765.0 / 414720.0, 0.0, -425425.0 / 414720.0),
    (0.0, 0.0, 0.0, 0.0, 4465125.0 / 39813120.0, 0.0, -94121676.0 / 39813120.0, 0.0,
     349922430.0 / 39813120.0, 0.0, -446185740.0 / 39813120.0, 0.0, 185910725.0 / 39813120.0),
)

DEBYE_MIN_ORDER = 30.0


def _log_kv_debye(nu: float, x: float) -> float:
    z = x / nu
    root = math.sqrt(1.0 + z * z)
    eta = root + math.log(z / (1.0 + root))
    t = 1.0 / root
    series = 0.0
    for k, coeffs in enumerate(_DEBYE_U):
        uk = sum(c * t**p for p, c in enumerate(coeffs))
        series += (-1.0) ** k * uk / nu**k
    return 0.5 * math.log(math.pi / (2.0 * nu)) - nu * eta - 0.5 * math.log(root) + math.log(series)


def _log_kv_small(nu: float, x: float) -> float:
    if nu == 0.0:
        return math.log(-math.log(x / 2.0) - _EULER_GAMMA)
    return special.gammaln(nu) + (nu - 1.0) * math.log(2.0) - nu * math.log(x)


def log_kv(nu: float, x: float) -> float:
    """Return ``log K_nu(x)`` for real order and ``x > 0``.

    Stays finite where ``K_nu(x)`` itself over- or underflows a double.
    """
    nu = abs(float(nu))
    x = float(x)
    if not x > 0.0:
        raise ValueError(f"log_kv needs x > 0, got {x!r}")
    val = special.kve(nu, x)
    if np.isfinite(val) and val > 0.0:
        return math.log(val) - x
    if nu >= DEBYE_MIN_ORDER:
        return _log_kv_debye(nu, x)
    return _log_kv_small(nu, x)


def log_kv_array(nu: float, x) -> np.ndarray:
    """Vectorized :func:`log_kv` over ``x`` (fast path via ``kve``)."""
    x = np.asarray(x, dtype=float)
    nu = abs(float(nu))
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        val = special.kve(nu, x)
        out = np.log(val) - x
    bad = ~np.isfinite(out)
    if np.any(bad):
        flat = out.reshape(-1)
        for i in np.flatnonzero(bad.reshape(-1)):
            flat[i] = log_kv(nu, x.reshape(-1)[i])
    return out
