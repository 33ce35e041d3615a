"""
Geographically weighted trace-variogram estimation and parametric fitting.

Each tile of a partition gets its own empirical variogram: every pair of
sites contributes its squared tangent-space distance, weighted by the kernel
weights of both sites with respect to the tile's nucleus. A spherical or
exponential model with nugget is then fitted by weighted least squares.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from scipy.optimize import minimize_scalar, nnls
from scipy.spatial.distance import pdist

from errors import FitFailedError, NoPairsError

logger = logging.getLogger(__name__)

KERNELS = ("gaussian", "tile_indicator")
FAMILIES = ("spherical", "exponential", "nugget_only")

N_BINS = 15
WEIGHT_CUTOFF = 1e-6
RANGE_GRID_SIZE = 64
MIN_POPULATED_BINS = 3


@dataclass(frozen=True)
class KernelConfig:
    kind: str = "gaussian"
    bandwidth: float = 1.5

    def __post_init__(self):
        if self.kind not in KERNELS:
            raise ValueError(f"Unknown kernel '{self.kind}', expected one of {KERNELS}")
        if self.kind == "gaussian" and not self.bandwidth > 0.0:
            raise ValueError(f"Gaussian kernel bandwidth must be positive, got {self.bandwidth}")


@dataclass(frozen=True)
class LagBins:
    """Equal-width bins on (0, h_max]; ``h_max=None`` means half the largest weighted pair distance."""

    n_bins: int = N_BINS
    h_max: Optional[float] = None
    weight_cutoff: float = WEIGHT_CUTOFF


@dataclass
class EmpiricalVariogram:
    lag_centers: np.ndarray
    semivariances: np.ndarray
    pair_weights: np.ndarray
    bin_counts: np.ndarray
    bin_edges: np.ndarray

    @property
    def populated(self) -> np.ndarray:
        return self.bin_counts > 0


@dataclass(frozen=True)
class VariogramModel:
    family: str
    nugget: float = 0.0
    partial_sill: float = 0.0
    range: float = 1.0
    fit_loss: float = field(default=float("nan"), compare=False)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"Unknown variogram family '{self.family}', expected one of {FAMILIES}")
        if self.nugget < 0.0 or self.partial_sill < 0.0:
            raise ValueError("Nugget and partial sill must be nonnegative")
        if not self.range > 0.0:
            raise ValueError("Variogram range must be positive")

    def __call__(self, h) -> np.ndarray:
        return model_eval(self, h)


def kernel_weight(cfg: KernelConfig, d, same_tile=True) -> np.ndarray:
    d = np.asarray(d, dtype=float)
    if cfg.kind == "gaussian":
        return np.exp(-(d ** 2) / (2.0 * cfg.bandwidth ** 2))
    return np.broadcast_to(np.asarray(same_tile, dtype=float), d.shape).copy()


def _shape(family: str, scaled):
    """Unit-sill correlogram complement at ``h / range``."""
    if family == "spherical":
        r = np.minimum(scaled, 1.0)
        return 1.5 * r - 0.5 * r ** 3
    if family == "exponential":
        return 1.0 - np.exp(-3.0 * scaled)
    raise ValueError(f"No shape function for family '{family}'")


def model_eval(model: VariogramModel, h) -> np.ndarray:
    h = np.asarray(h, dtype=float)
    if model.family == "nugget_only":
        value = np.full(h.shape, model.nugget)
    else:
        value = model.nugget + model.partial_sill * _shape(model.family, h / model.range)
    return np.where(h > 0.0, value, 0.0)


def weighted_variogram(coords, dist, site_weights, bins: LagBins = LagBins()) -> EmpiricalVariogram:
    """
    Empirical variogram from tangent coordinates ``coords`` ``(n, m)``, the
    site metric ``dist`` ``(n, n)`` and per-site kernel weights. Each pair is
    weighted by the product of its two site weights; pairs below
    ``bins.weight_cutoff`` are skipped.
    """
    coords = np.asarray(coords, dtype=float)
    dist = np.asarray(dist, dtype=float)
    w = np.asarray(site_weights, dtype=float)
    n = len(w)

    i, j = np.triu_indices(n, k=1)
    pair_w = w[i] * w[j]
    keep = pair_w >= bins.weight_cutoff
    i, j, pair_w = i[keep], j[keep], pair_w[keep]
    if len(i) == 0:
        raise NoPairsError("No site pair carries kernel weight", {"n": n})

    lag = dist[i, j]
    h_max = bins.h_max
    if h_max is None:
        h_max = 0.5 * float(lag.max())
    if not h_max > 0.0:
        raise NoPairsError("Maximum lag is zero", {"n": n})

    edges = np.linspace(0.0, h_max, bins.n_bins + 1)
    idx = np.digitize(lag, edges, right=True) - 1
    inside = (lag > 0.0) & (idx >= 0) & (idx < bins.n_bins)
    idx, pair_w = idx[inside], pair_w[inside]
    sq = np.sum((coords[i[inside]] - coords[j[inside]]) ** 2, axis=1)

    weight_sum = np.bincount(idx, weights=pair_w, minlength=bins.n_bins)
    weighted_sq = np.bincount(idx, weights=pair_w * sq, minlength=bins.n_bins)
    counts = np.bincount(idx, minlength=bins.n_bins)

    populated = counts > 0
    if not np.any(populated):
        raise NoPairsError("Every lag bin is empty", {"n": n, "h_max": h_max})
    gamma = np.full(bins.n_bins, np.nan)
    gamma[populated] = weighted_sq[populated] / (2.0 * weight_sum[populated])

    return EmpiricalVariogram(
        lag_centers=0.5 * (edges[:-1] + edges[1:]),
        semivariances=gamma,
        pair_weights=weight_sum,
        bin_counts=counts,
        bin_edges=edges,
    )


def empirical_variogram(coords, dist, center: int, tile_membership, cfg: KernelConfig, bins: LagBins = LagBins()) -> EmpiricalVariogram:
    """Variogram of tile ``center`` using every site, weighted by the kernel around the nucleus."""
    dist = np.asarray(dist, dtype=float)
    site_weights = kernel_weight(cfg, dist[center], tile_membership)
    return weighted_variogram(coords, dist, site_weights, bins)


def _nnls_at_range(family: str, rho: float, h, g, sw) -> Tuple[np.ndarray, float]:
    design = np.column_stack([np.ones_like(h), _shape(family, h / rho)])
    coef, residual = nnls(design * sw[:, None], g * sw)
    return coef, float(residual ** 2)


def fit_variogram(emp: EmpiricalVariogram, family: str, n_grid: int = RANGE_GRID_SIZE) -> VariogramModel:
    """
    Weighted least-squares fit with bin weights equal to summed pair weights.

    The range is searched on a log-spaced grid over [min lag, 2 * max lag];
    nugget and sill come from nonnegative least squares at each candidate,
    and the best candidate is refined by bounded scalar minimization. A fit
    whose sill vanishes, or that explains the data no better than a constant,
    is returned as ``nugget_only``.
    """
    populated = emp.populated & np.isfinite(emp.semivariances)
    h = emp.lag_centers[populated]
    g = emp.semivariances[populated]
    w = emp.pair_weights[populated]
    if len(h) == 0:
        raise FitFailedError("Empirical variogram has no populated bins")
    w = w / w.sum()
    flat_nugget = float(np.sum(w * g))
    flat_loss = float(np.sum(w * (g - flat_nugget) ** 2))

    if family == "nugget_only":
        return VariogramModel("nugget_only", nugget=flat_nugget, fit_loss=flat_loss)
    if len(h) < MIN_POPULATED_BINS:
        raise FitFailedError(
            f"Need at least {MIN_POPULATED_BINS} populated bins to fit {family}",
            {"populated_bins": int(len(h))},
        )

    sw = np.sqrt(w)
    grid = np.geomspace(h.min(), 2.0 * h.max(), n_grid)
    losses = np.array([_nnls_at_range(family, rho, h, g, sw)[1] for rho in grid])
    if not np.all(np.isfinite(losses)):
        raise FitFailedError("Non-finite loss during range search", {"family": family})
    best = int(np.argmin(losses))
    rho = float(grid[best])
    loss = float(losses[best])

    lower = grid[max(best - 1, 0)]
    upper = grid[min(best + 1, n_grid - 1)]
    refined = minimize_scalar(
        lambda r: _nnls_at_range(family, r, h, g, sw)[1],
        bounds=(lower, upper),
        method="bounded",
        options={"xatol": 1e-10},
    )
    if refined.success and refined.fun < loss:
        rho, loss = float(refined.x), float(refined.fun)

    coef, loss = _nnls_at_range(family, rho, h, g, sw)
    nugget, sill = float(coef[0]), float(coef[1])
    scale = max(float(np.sum(w * g ** 2)), np.finfo(float).tiny)
    if sill <= 1e-10 * max(float(g.max()), 0.0) or flat_loss <= loss + 1e-12 * scale:
        return VariogramModel("nugget_only", nugget=flat_nugget, fit_loss=flat_loss)
    return VariogramModel(family, nugget=nugget, partial_sill=sill, range=rho, fit_loss=loss)


def mean_semivariance(coords) -> float:
    """Half the mean squared distance over all pairs of tangent coordinates ``(n, m)``."""
    coords = np.asarray(coords, dtype=float)
    if len(coords) < 2:
        return 0.0
    return 0.5 * float(np.mean(pdist(coords.reshape(len(coords), -1), "sqeuclidean")))


def fit_with_fallback(
    emp: Optional[EmpiricalVariogram], family: str, coords=None
) -> Tuple[VariogramModel, Optional[str]]:
    """
    Fit ``family``; on failure fall back to a nugget-only model so kriging
    still has a solvable system. Returns the model and the fallback reason
    (None when the requested fit succeeded).

    The fallback level is the pair-weighted mean of the populated bins, or
    when no bin is populated the mean semivariance of the tile's tangent
    coordinates ``coords``.
    """
    if emp is None:
        return VariogramModel("nugget_only", nugget=mean_semivariance(coords) if coords is not None else 0.0), "no_pairs"
    try:
        return fit_variogram(emp, family), None
    except FitFailedError as e:
        populated = emp.populated & np.isfinite(emp.semivariances)
        if np.any(populated):
            w = emp.pair_weights[populated]
            nugget = float(np.sum(w * emp.semivariances[populated]) / np.sum(w))
        else:
            nugget = mean_semivariance(coords) if coords is not None else 0.0
        logger.debug(f"Variogram fit fell back to nugget-only: {e.message}")
        return VariogramModel("nugget_only", nugget=nugget), e.code
