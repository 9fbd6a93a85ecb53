"""Hot inner loops, each with a numba and a pure-numpy implementation.

Public entry points dispatch on :func:`fluctcredit._accel.use_numba`. The two
paths agree to rounding; ``tests/test_kernels.py`` checks that.
"""

import math

import numpy as np
from scipy import special

from ._accel import njit, use_numba

_SQRT1_2 = 1.0 / math.sqrt(2.0)
# Gaussian mass beyond this many standard deviations is below 1e-19.
_WINDOW = 9.0


@njit(cache=True)
def _cells_numba(weights, means, sds, edges):
    n_edges = edges.shape[0]
    masses = np.zeros(n_edges - 1)
    below = 0.0
    above = 0.0
    for i in range(weights.shape[0]):
        w = weights[i]
        m = means[i]
        s = sds[i]
        if w == 0.0:
            continue
        if s <= 0.0 or not s > 1e-300:
            j = np.searchsorted(edges, m, side="right") - 1
            if j < 0:
                below += w
            elif j >= n_edges - 1:
                if m == edges[n_edges - 1]:
                    masses[n_edges - 2] += w
                else:
                    above += w
            else:
                masses[j] += w
            continue
        lo = np.searchsorted(edges, m - _WINDOW * s)
        hi = np.searchsorted(edges, m + _WINDOW * s)
        if lo > 0:
            prev = 0.0
        else:
            prev = 0.5 * math.erfc(-(edges[0] - m) / s * _SQRT1_2)
            below += w * prev
        stop = min(hi + 1, n_edges)
        for j in range(max(lo, 1), stop):
            cur = 0.5 * math.erfc(-(edges[j] - m) / s * _SQRT1_2)
            masses[j - 1] += w * (cur - prev)
            prev = cur
        if stop < n_edges:
            # remaining cells lie beyond the window; the rest sits in the next one
            masses[stop - 1] += w * (1.0 - prev)
        else:
            above += w * (1.0 - prev)
    return masses, below, above


def _cells_numpy(weights, means, sds, edges, chunk=512):
    masses = np.zeros(edges.size - 1)
    below = 0.0
    above = 0.0
    point = ~(sds > 1e-300)
    if np.any(point):
        w, m = weights[point], means[point]
        j = np.searchsorted(edges, m, side="right") - 1
        at_top = m == edges[-1]
        j[at_top] = edges.size - 2
        below += float(w[j < 0].sum())
        above += float(w[j >= edges.size - 1].sum())
        ok = (j >= 0) & (j < edges.size - 1)
        np.add.at(masses, j[ok], w[ok])
    idx = np.flatnonzero(~point & (weights != 0.0))
    for start in range(0, idx.size, chunk):
        sel = idx[start:start + chunk]
        cdf = special.ndtr((edges[None, :] - means[sel, None]) / sds[sel, None])
        w = weights[sel]
        masses += w @ np.diff(cdf, axis=1)
        below += float(w @ cdf[:, 0])
        above += float(w @ (1.0 - cdf[:, -1]))
    return masses, below, above


def gaussian_cell_masses(weights, means, sds, edges):
    """Mix weighted normals and integrate the mixture over grid cells.

    Parameters
    ----------
    weights, means, sds : ndarray, shape (n,)
        Mixture components. ``sds == 0`` marks a point mass.
    edges : ndarray, shape (m + 1,)
        Ascending cell boundaries.

    Returns
    -------
    masses : ndarray, shape (m,)
    below, above : float
        Mixture mass left of ``edges[0]`` and right of ``edges[-1]``.
    """
    weights = np.ascontiguousarray(weights, dtype=np.float64)
    means = np.ascontiguousarray(means, dtype=np.float64)
    sds = np.ascontiguousarray(sds, dtype=np.float64)
    edges = np.ascontiguousarray(edges, dtype=np.float64)
    if use_numba():
        masses, below, above = _cells_numba(weights, means, sds, edges)
        return masses, float(below), float(above)
    return _cells_numpy(weights, means, sds, edges)


@njit(cache=True)
def _losses_numba(x, scale, offset, f):
    n, K = x.shape
    out = np.empty(n)
    for i in range(n):
        acc = 0.0
        for k in range(K):
            ratio = math.exp(offset[k] + scale[k] * x[i, k])
            if ratio < 1.0:
                acc += f[k] * (1.0 - ratio)
        out[i] = acc
    return out


def _losses_numpy(x, scale, offset, f):
    ratio = np.exp(offset + scale * x)
    return np.maximum(1.0 - ratio, 0.0) @ f


def merton_losses(x, scale, offset, f):
    """Portfolio loss for each row of standardized log-return shocks ``x``.

    ``V_k / F_k = exp(offset_k + scale_k * x_k)`` and the loss is
    ``sum_k f_k (1 - V_k/F_k)^+``.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    args = [np.ascontiguousarray(a, dtype=np.float64) for a in (scale, offset, f)]
    if use_numba():
        return _losses_numba(x, *args)
    return _losses_numpy(x, *args)
