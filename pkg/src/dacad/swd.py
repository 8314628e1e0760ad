"""Sliced-Wasserstein distance between equal-size empirical samples.

Each direction on the unit sphere projects both sample sets to the line;
the 1D optimal matching pairs the i-th smallest source projection with the
i-th smallest target projection. The estimate averages the matched costs
over directions, and the gradient treats the sort orders as constants.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

from . import _kernels
from .numerics import DimensionError, as_tensor

Normalization = Literal["mean", "sum"]


class SampleSizeError(ValueError):
    """Sample sets have different (or zero) sizes."""


class StaleEstimateError(ValueError):
    """Backward called with inputs the estimate was not computed from."""


@dataclass(frozen=True)
class SwdConfig:
    num_projections: int = 128
    p: float = 2.0
    normalization: Normalization = "mean"
    seed: int = 0

    def __post_init__(self):
        if self.num_projections < 1:
            raise ValueError(f"num_projections must be >= 1, got {self.num_projections}")
        if not self.p > 0:
            raise ValueError(f"p must be positive, got {self.p}")
        if self.normalization not in ("mean", "sum"):
            raise ValueError(f"normalization must be 'mean' or 'sum', got {self.normalization!r}")


@dataclass(frozen=True)
class ProjectionSet:
    directions: np.ndarray  # (L, f), unit rows

    @property
    def num_projections(self) -> int:
        return self.directions.shape[0]

    @property
    def dim(self) -> int:
        return self.directions.shape[1]


@dataclass(frozen=True)
class SwdEstimate:
    value: float
    costs: np.ndarray           # (L,) normalized cost per direction
    source_order: np.ndarray    # (L, n) sort permutation of source projections
    target_order: np.ndarray    # (L, n)
    projections: ProjectionSet


def subseed(master: int, *counters: int) -> int:
    """Deterministic 64-bit seed derived from a master seed and loop counters."""
    seq = np.random.SeedSequence([int(master) & 0xFFFFFFFFFFFFFFFF, *map(int, counters)])
    return int(seq.generate_state(1, np.uint64)[0])


def sample_unit_directions(L: int, f: int, seed: int) -> ProjectionSet:
    """L i.i.d. directions uniform on the sphere S^{f-1}."""
    if f < 1:
        raise DimensionError(f"direction dimension must be >= 1, got {f}")
    if L < 1:
        raise ValueError(f"need at least one direction, got L={L}")
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((L, f))
    norms = np.linalg.norm(g, axis=1)
    # a zero draw has probability 0; redraw to keep the contract exact
    while np.any(norms == 0.0):
        bad = norms == 0.0
        g[bad] = rng.standard_normal((int(bad.sum()), f))
        norms = np.linalg.norm(g, axis=1)
    return ProjectionSet(g / norms[:, None])


def wasserstein_1d(a, b, p: float = 2.0, normalization: Normalization = "mean") -> float:
    """Matched cost between sorted samples: ``(1/n) sum_i |a_(i) - b_(i)|^p``.

    With ``normalization="sum"`` the 1/n factor is dropped.
    """
    a = as_tensor(a).reshape(-1)
    b = as_tensor(b).reshape(-1)
    if a.size != b.size:
        raise SampleSizeError(f"sample counts differ: {a.size} vs {b.size}")
    if a.size == 0:
        raise SampleSizeError("empty samples")
    costs, _, _ = _kernels.sorted_costs(a[None, :], b[None, :], float(p))
    cost = float(costs[0])
    return cost / a.size if normalization == "mean" else cost


def _check_pair(xs, xt):
    xs = as_tensor(xs)
    xt = as_tensor(xt)
    if xs.ndim != 2 or xt.ndim != 2:
        raise DimensionError(f"expected 2D sample matrices, got {xs.shape} and {xt.shape}")
    if xs.shape[0] != xt.shape[0]:
        raise SampleSizeError(f"row counts differ: {xs.shape[0]} vs {xt.shape[0]}")
    if xs.shape[0] == 0:
        raise SampleSizeError("empty input")
    if xs.shape[1] != xt.shape[1]:
        raise DimensionError(f"feature dimensions differ: {xs.shape[1]} vs {xt.shape[1]}")
    return xs, xt


def swd_estimate(xs, xt, cfg: SwdConfig, projections: ProjectionSet | None = None) -> SwdEstimate:
    """Monte-Carlo sliced-Wasserstein estimate between row samples ``xs`` and ``xt``.

    Directions come from ``projections`` when given, otherwise they are drawn
    from ``cfg.seed``.
    """
    xs, xt = _check_pair(xs, xt)
    n, f = xs.shape
    if projections is None:
        projections = sample_unit_directions(cfg.num_projections, f, cfg.seed)
    elif projections.dim != f:
        raise DimensionError(f"directions live in R^{projections.dim}, samples in R^{f}")
    dirs = projections.directions
    ps = np.ascontiguousarray(dirs @ xs.T)
    pt = np.ascontiguousarray(dirs @ xt.T)
    costs, s, t = _kernels.sorted_costs(ps, pt, float(cfg.p))
    if cfg.normalization == "mean":
        costs = costs / n
    return SwdEstimate(float(np.mean(costs)), costs, s, t, projections)


def swd_backward(est: SwdEstimate, xs, xt, cfg: SwdConfig) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of ``est.value`` w.r.t. ``xs`` and ``xt`` with sort orders held fixed."""
    xs, xt = _check_pair(xs, xt)
    n, f = xs.shape
    dirs = est.projections.directions
    L = dirs.shape[0]
    if est.source_order.shape != (L, n) or est.target_order.shape != (L, n) or dirs.shape[1] != f:
        raise StaleEstimateError(
            f"estimate has orders {est.source_order.shape} over R^{dirs.shape[1]}, "
            f"inputs are {xs.shape}")
    ps = np.ascontiguousarray(dirs @ xs.T)
    pt = np.ascontiguousarray(dirs @ xt.T)
    scale = 1.0 / (L * n) if cfg.normalization == "mean" else 1.0 / L
    cs, ct = _kernels.scatter_coeffs(ps, pt, est.source_order, est.target_order,
                                     float(cfg.p), scale)
    return cs.T @ dirs, ct.T @ dirs


def sliced_wasserstein(xs, xt, cfg: SwdConfig, projections: ProjectionSet | None = None):
    """Convenience wrapper returning ``(value, grad_xs, grad_xt)``."""
    est = swd_estimate(xs, xt, cfg, projections)
    gs, gt = swd_backward(est, xs, xt, cfg)
    return est.value, gs, gt


def mc_convergence_probe(xs, xt, L_list: Sequence[int], n_seeds: int = 50,
                         cfg: SwdConfig | None = None, seed: int = 0) -> np.ndarray:
    """Spread of the estimate across independent direction draws, per L.

    Returns one standard deviation (ddof=1) per entry of ``L_list``.
    """
    if n_seeds < 10:
        raise ValueError(f"n_seeds must be >= 10, got {n_seeds}")
    if list(L_list) != sorted(L_list):
        raise ValueError("L_list must be ascending")
    cfg = cfg or SwdConfig()
    xs, xt = _check_pair(xs, xt)
    stds = []
    for L in L_list:
        vals = [swd_estimate(xs, xt, cfg,
                             sample_unit_directions(L, xs.shape[1], subseed(seed, L, s))).value
                for s in range(n_seeds)]
        stds.append(np.std(vals, ddof=1))
    return np.asarray(stds)
