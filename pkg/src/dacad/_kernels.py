"""Hot loops of the sliced-Wasserstein estimator.

Two interchangeable implementations live here: numba-compiled kernels and a
pure numpy path. The numba path is used when numba imports and the
``DACAD_DISABLE_NUMBA`` environment variable is unset (or "0"). Both return
identical permutations (stable sorts are unique); costs agree to rounding,
since the compiled loop sums sequentially and numpy sums pairwise.

Inputs are projection matrices of shape (L, n): row l holds the samples
projected on direction l.
"""

from __future__ import annotations

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is optional
    numba = None

_DISABLED = os.environ.get("DACAD_DISABLE_NUMBA", "0").lower() not in ("", "0", "false", "no")
HAVE_NUMBA = numba is not None
USE_NUMBA = HAVE_NUMBA and not _DISABLED


def _pair_power(diff, p):
    if p == 2.0:
        return diff * diff
    return np.abs(diff) ** p


def _pair_power_grad(diff, p):
    # d/d diff |diff|^p; taken as 0 at diff == 0
    if p == 2.0:
        return 2.0 * diff
    g = np.zeros_like(diff)
    nz = diff != 0.0
    g[nz] = p * np.sign(diff[nz]) * np.abs(diff[nz]) ** (p - 1.0)
    return g


def sorted_costs_numpy(ps: np.ndarray, pt: np.ndarray, p: float):
    """Per-row matched cost ``sum_i |ps[s[i]] - pt[t[i]]|^p`` and the sort orders."""
    s = np.argsort(ps, axis=1, kind="stable")
    t = np.argsort(pt, axis=1, kind="stable")
    diff = np.take_along_axis(ps, s, axis=1) - np.take_along_axis(pt, t, axis=1)
    return _pair_power(diff, p).sum(axis=1), s, t


def scatter_coeffs_numpy(ps, pt, s, t, p: float, scale: float):
    """Per-sample derivative of ``scale * sum_l cost_l`` w.r.t. each projection."""
    diff = np.take_along_axis(ps, s, axis=1) - np.take_along_axis(pt, t, axis=1)
    g = scale * _pair_power_grad(diff, p)
    cs = np.empty_like(ps)
    ct = np.empty_like(pt)
    np.put_along_axis(cs, s, g, axis=1)
    np.put_along_axis(ct, t, -g, axis=1)
    return cs, ct


if HAVE_NUMBA:

    @numba.njit(cache=True)
    def _sorted_costs_jit(ps, pt, p):
        L, n = ps.shape
        s = np.empty((L, n), dtype=np.int64)
        t = np.empty((L, n), dtype=np.int64)
        costs = np.empty(L)
        for l in range(L):
            s[l] = np.argsort(ps[l], kind="mergesort")
            t[l] = np.argsort(pt[l], kind="mergesort")
            acc = 0.0
            for i in range(n):
                d = ps[l, s[l, i]] - pt[l, t[l, i]]
                if p == 2.0:
                    acc += d * d
                else:
                    acc += abs(d) ** p
            costs[l] = acc
        return costs, s, t

    @numba.njit(cache=True)
    def _scatter_coeffs_jit(ps, pt, s, t, p, scale):
        L, n = ps.shape
        cs = np.empty((L, n))
        ct = np.empty((L, n))
        for l in range(L):
            for i in range(n):
                d = ps[l, s[l, i]] - pt[l, t[l, i]]
                if p == 2.0:
                    g = 2.0 * d
                elif d == 0.0:
                    g = 0.0
                else:
                    g = p * abs(d) ** (p - 1.0) * (1.0 if d > 0.0 else -1.0)
                g *= scale
                cs[l, s[l, i]] = g
                ct[l, t[l, i]] = -g
        return cs, ct

    def sorted_costs_numba(ps, pt, p: float):
        return _sorted_costs_jit(ps, pt, float(p))

    def scatter_coeffs_numba(ps, pt, s, t, p: float, scale: float):
        return _scatter_coeffs_jit(ps, pt, s, t, float(p), float(scale))

else:  # pragma: no cover
    sorted_costs_numba = sorted_costs_numpy
    scatter_coeffs_numba = scatter_coeffs_numpy


if USE_NUMBA:
    sorted_costs = sorted_costs_numba
    scatter_coeffs = scatter_coeffs_numba
else:
    sorted_costs = sorted_costs_numpy
    scatter_coeffs = scatter_coeffs_numpy


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
