"""
Synthetic manifold-valued fields on a C-shaped domain, and the Monte Carlo
harness that scores RDD-MK against them.

The domain is parametrized by ``(phi, r)``: ``phi`` runs along a centerline
made of an upper straight arm, a left semicircular bend and a lower straight
arm; ``r`` is the signed offset along the outward normal. Gaussian random
fields are simulated on the flat ``(phi, r)`` rectangle and carried to the C.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.spatial.distance import cdist
from tqdm import tqdm

from domain_graph import SiteSet, build_delaunay
from errors import FactorizationFailureError
from manifolds import CholeskyManifold, Manifold, SPDManifold, corr_to_chol, spd_exp
from rdd_service import RunConfig, SpatialDataset, TargetSet, error_metrics, progress_enabled, run_rdd_mk

logger = logging.getLogger(__name__)

JITTER = 1e-10
JITTER_ATTEMPTS = 3
FIELD_KINDS = ("spd", "corr")


@dataclass(frozen=True)
class CDomainSpec:
    phi_max: float = 8.88
    r_min: float = -0.5
    r_max: float = 0.5
    centerline_radius: float = 0.6
    arm_length: float = 3.5
    n_phi: int = 113
    n_r: int = 14

    def violations(self) -> List[str]:
        problems = []
        if self.n_phi < 2 or self.n_r < 2:
            problems.append("grid resolution must be at least 2 x 2")
        if not self.phi_max > 0.0:
            problems.append("phi_max must be positive")
        if not self.r_min < self.r_max:
            problems.append("r_min must be below r_max")
        if not self.centerline_radius > max(abs(self.r_min), abs(self.r_max)):
            problems.append("centerline_radius must exceed |r| so the bend does not fold")
        if not self.arm_length > 0.0:
            problems.append("arm_length must be positive")
        return problems


@dataclass(frozen=True)
class FieldSpec:
    sigma: tuple = ((2.0, 1.0), (1.0, 2.0))
    drift_phi: tuple = ((0.5, 0.4), (0.4, 0.5))
    drift_remaining: tuple = ((0.2, -0.1), (-0.1, 0.2))
    drift_r: tuple = ((-0.2, 0.1), (0.1, 0.4))
    grf_range: float = 10.0
    grf_sill: float = 3.75 ** 2
    kind: str = "spd"

    def violations(self) -> List[str]:
        problems = []
        if not self.grf_range > 0.0:
            problems.append("grf_range must be positive")
        if not self.grf_sill > 0.0:
            problems.append("grf_sill must be positive")
        if self.kind not in FIELD_KINDS:
            problems.append(f"field_kind must be one of {FIELD_KINDS}")
        return problems


@dataclass
class CDomainGrid:
    spec: CDomainSpec
    phi: np.ndarray
    r: np.ndarray
    x: np.ndarray
    y: np.ndarray
    ids: List[str] = field(default_factory=list)

    @property
    def coords(self) -> np.ndarray:
        return np.column_stack([self.x, self.y])

    @property
    def phi_r(self) -> np.ndarray:
        return np.column_stack([self.phi, self.r])

    def __len__(self) -> int:
        return len(self.phi)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"id": self.ids, "phi": self.phi, "r": self.r, "x": self.x, "y": self.y})


def centerline(phi, spec: CDomainSpec):
    """Centerline point and outward unit normal at arc length ``phi``."""
    phi = np.asarray(phi, dtype=float)
    arm, radius = spec.arm_length, spec.centerline_radius
    bend_end = arm + np.pi * radius

    upper = phi <= arm
    lower = phi >= bend_end
    bend = ~upper & ~lower

    theta = 0.5 * np.pi + (phi - arm) / radius
    cx = np.where(upper, arm - phi, np.where(lower, phi - bend_end, radius * np.cos(theta)))
    cy = np.where(upper, radius, np.where(lower, -radius, radius * np.sin(theta)))
    # tangent points in the direction of increasing phi; normal is its clockwise rotation
    tx = np.where(upper, -1.0, np.where(lower, 1.0, -np.sin(theta)))
    ty = np.where(bend, np.cos(theta), 0.0)
    return np.column_stack([cx, cy]), np.column_stack([ty, -tx])


def map_to_domain(phi, r, spec: CDomainSpec) -> np.ndarray:
    center, normal = centerline(phi, spec)
    return center + np.asarray(r, dtype=float)[:, None] * normal


def c_domain_grid(spec: CDomainSpec = CDomainSpec()) -> CDomainGrid:
    phi_values = np.linspace(0.0, spec.phi_max, spec.n_phi)
    r_values = np.linspace(spec.r_min, spec.r_max, spec.n_r)
    phi, r = (a.ravel() for a in np.meshgrid(phi_values, r_values, indexing="ij"))
    xy = map_to_domain(phi, r, spec)
    ids = [f"g{i}" for i in range(len(phi))]
    logger.info(f"🧩 C-domain grid: {spec.n_phi} x {spec.n_r} = {len(phi)} points")
    return CDomainGrid(spec=spec, phi=phi, r=r, x=xy[:, 0], y=xy[:, 1], ids=ids)


def c_domain_boundary(spec: CDomainSpec = CDomainSpec(), n_points: int = 400) -> np.ndarray:
    """Closed boundary polygon: outer edge along increasing phi, inner edge back."""
    phi = np.linspace(0.0, spec.phi_max, max(n_points, spec.n_phi))
    outer = map_to_domain(phi, np.full_like(phi, spec.r_max), spec)
    inner = map_to_domain(phi[::-1], np.full_like(phi, spec.r_min), spec)
    return np.vstack([outer, inner])


def spherical_covariance(h, range_: float, sill: float) -> np.ndarray:
    s = np.minimum(np.asarray(h, dtype=float) / range_, 1.0)
    return sill * (1.0 - 1.5 * s + 0.5 * s ** 3)


class GaussianFieldSampler:
    """
    Zero-mean stationary Gaussian field with spherical covariance, sampled by
    a lower Cholesky factor of the dense covariance matrix. The factor is
    computed once and reused for every draw.
    """

    def __init__(self, points, range_: float, sill: float, jitter: float = JITTER, attempts: int = JITTER_ATTEMPTS):
        self.points = np.asarray(points, dtype=float)
        self.range = range_
        self.sill = sill
        self.logger = logging.getLogger(__name__)
        covariance = spherical_covariance(cdist(self.points, self.points), range_, sill)
        self.factor = self._factorize(covariance, jitter, attempts)

    def _factorize(self, covariance: np.ndarray, jitter: float, attempts: int) -> np.ndarray:
        scale = float(np.max(np.diag(covariance)))
        eps = jitter * scale
        for attempt in range(attempts):
            try:
                return np.linalg.cholesky(covariance + eps * np.eye(len(covariance)))
            except np.linalg.LinAlgError:
                self.logger.debug(f"Cholesky failed with jitter {eps:.3g}, escalating")
                eps *= 10.0
        raise FactorizationFailureError(
            "Covariance matrix could not be factorized",
            {"points": len(covariance), "final_jitter": eps / 10.0, "attempts": attempts},
        )

    def sample(self, rng: np.random.Generator, size: int = 1) -> np.ndarray:
        """``size`` independent realizations, shape ``(size, n_points)``."""
        white = rng.standard_normal((size, len(self.points)))
        return white @ self.factor.T


def simulate_grf(points, range_: float, sill: float, seed, size: int = 1) -> np.ndarray:
    sampler = GaussianFieldSampler(points, range_, sill)
    values = sampler.sample(np.random.default_rng(seed), size)
    return values[0] if size == 1 else values


def amplitude(phi, phi_max: float) -> np.ndarray:
    return np.sqrt(0.1 + (phi_max - np.asarray(phi, dtype=float)) / phi_max)


def drift(phi, r, field_spec: FieldSpec, phi_max: float) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)[:, None, None]
    r = np.asarray(r, dtype=float)[:, None, None]
    return (
        np.asarray(field_spec.drift_phi) * phi
        + np.asarray(field_spec.drift_remaining) * (phi_max - phi)
        + np.asarray(field_spec.drift_r) * r
    )


def generate_spd_field(
    grid: CDomainGrid,
    field_spec: FieldSpec = FieldSpec(),
    seed=None,
    sampler: Optional[GaussianFieldSampler] = None,
) -> np.ndarray:
    """One realization of the 2x2 SPD field at every grid point, shape ``(N, 2, 2)``."""
    phi_max = grid.spec.phi_max
    sampler = sampler or GaussianFieldSampler(grid.phi_r, field_spec.grf_range, field_spec.grf_sill)
    residual = sampler.sample(np.random.default_rng(seed), 3)

    alpha = amplitude(grid.phi, phi_max)
    a = drift(grid.phi, grid.r, field_spec, phi_max)
    tangent_point = 0.5 * alpha[:, None, None] * spd_exp(np.asarray(field_spec.sigma), a)

    delta = np.empty((len(grid), 2, 2))
    delta[:, 0, 0] = residual[0]
    delta[:, 0, 1] = residual[1]
    delta[:, 1, 0] = residual[1]
    delta[:, 1, 1] = residual[2]
    delta *= (alpha ** 2)[:, None, None]
    return spd_exp(tangent_point, a + delta)


def covariance_to_correlation(c) -> np.ndarray:
    c = np.asarray(c, dtype=float)
    scale = 1.0 / np.sqrt(np.diagonal(c, axis1=-2, axis2=-1))
    r = c * scale[..., :, None] * scale[..., None, :]
    p = r.shape[-1]
    r[..., np.arange(p), np.arange(p)] = 1.0
    return r


def generate_corr_field(
    grid: CDomainGrid,
    field_spec: FieldSpec = FieldSpec(),
    seed=None,
    sampler: Optional[GaussianFieldSampler] = None,
) -> np.ndarray:
    """Cholesky factors of the correlation matrices of an SPD realization."""
    return corr_to_chol(covariance_to_correlation(generate_spd_field(grid, field_spec, seed, sampler)))


def generate_field(grid: CDomainGrid, field_spec: FieldSpec, seed, sampler=None) -> np.ndarray:
    if field_spec.kind == "corr":
        return generate_corr_field(grid, field_spec, seed, sampler)
    return generate_spd_field(grid, field_spec, seed, sampler)


def field_manifold(field_spec: FieldSpec) -> Manifold:
    return CholeskyManifold(2) if field_spec.kind == "corr" else SPDManifold(2)


def subsample_seed(seed: int, replicate: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), 1, int(replicate)])


def field_seed(seed: int, replicate: Optional[int] = None) -> np.random.SeedSequence:
    if replicate is None:
        return np.random.SeedSequence([int(seed), 0])
    return np.random.SeedSequence([int(seed), 2, int(replicate)])


def replicate_master_seed(seed: int, replicate: int) -> int:
    return int(np.random.SeedSequence([int(seed), 3, int(replicate)]).generate_state(1, dtype=np.uint32)[0])


def draw_subsample(n_grid: int, n_sites: int, seed: int, replicate: int) -> np.ndarray:
    rng = np.random.default_rng(subsample_seed(seed, replicate))
    return np.sort(rng.choice(n_grid, size=n_sites, replace=False))


def summary_table(replicates: pd.DataFrame, metric: str) -> pd.DataFrame:
    """Mean, median and standard deviation of ``metric`` across replicates, one column per K."""
    grouped = replicates.groupby("k")[metric]
    table = pd.DataFrame({"Mean": grouped.mean(), "Median": grouped.median(), "SD": grouped.std()}).T
    table.columns = [int(k) for k in table.columns]
    return table


@dataclass
class MonteCarloResult:
    replicates: pd.DataFrame
    metrics: List[str]
    spe: Dict = field(default_factory=dict)

    def table(self, metric: Optional[str] = None) -> pd.DataFrame:
        return summary_table(self.replicates, metric or self.metrics[0])

    def long_table(self) -> pd.DataFrame:
        frames = []
        for metric in self.metrics:
            t = self.table(metric)
            t.insert(0, "statistic", t.index)
            t.insert(0, "metric", metric)
            frames.append(t)
        return pd.concat(frames, ignore_index=True)


def monte_carlo_study(
    template: RunConfig,
    n_replicates: int = 30,
    n_sites: int = 100,
    k_values: Sequence[int] = (1, 2, 4, 6, 8, 10),
    seed: int = 0,
    domain: CDomainSpec = CDomainSpec(),
    field_spec: FieldSpec = FieldSpec(),
    resimulate_field: bool = False,
    exclude_observed: bool = False,
    keep_spe: bool = False,
    workers: Optional[int] = None,
) -> MonteCarloResult:
    """
    Score RDD-MK for each K over repeated random site subsamples of the
    C-domain grid. Every grid point is a prediction target and a
    triangulation vertex, so target graph distances are exact.
    """
    grid = c_domain_grid(domain)
    if n_sites > len(grid):
        raise ValueError(f"n_sites={n_sites} exceeds the grid size {len(grid)}")
    boundary = c_domain_boundary(domain)
    manifold = field_manifold(field_spec)
    template = replace(template, manifold=manifold.kind)
    sampler = GaussianFieldSampler(grid.phi_r, field_spec.grf_range, field_spec.grf_sill)
    targets = TargetSet(grid.ids, grid.coords)

    truth = None if resimulate_field else generate_field(grid, field_spec, field_seed(seed), sampler)
    metrics = ["mspe", "mean_squared_distance"] + (["mean_rho_sq_diff"] if isinstance(manifold, CholeskyManifold) else [])

    rows = []
    spe = {}
    logger.info(
        f"🎲 Monte Carlo study: {n_replicates} replicates, n={n_sites}, K={list(k_values)}, "
        f"B={template.b}, field={field_spec.kind}, resimulate={resimulate_field}"
    )
    for j in tqdm(range(n_replicates), desc="Replicates", disable=not progress_enabled()):
        field_j = generate_field(grid, field_spec, field_seed(seed, j), sampler) if resimulate_field else truth
        sites = draw_subsample(len(grid), n_sites, seed, j)
        site_set = SiteSet([grid.ids[i] for i in sites], grid.coords[sites])
        graph = build_delaunay(site_set, boundary=boundary, extra_vertices=grid.coords)
        data = SpatialDataset(graph, field_j[sites], manifold)
        mask = None
        if exclude_observed:
            mask = np.ones(len(grid), dtype=bool)
            mask[sites] = False

        for k in k_values:
            config = replace(template, k=int(k), master_seed=replicate_master_seed(seed, j))
            result = run_rdd_mk(config, data, targets, workers=workers, progress=False)
            scores = error_metrics(result.predictions, field_j, manifold, mask)
            row = {"replicate": j, "k": int(k)}
            row.update({m: scores[m] for m in metrics})
            rows.append(row)
            if keep_spe:
                spe[(j, int(k))] = scores["spe"]
            logger.debug(f"Replicate {j}, K={k}: MSPE={scores['mspe']:.4f}")

    replicates = pd.DataFrame(rows)
    result = MonteCarloResult(replicates=replicates, metrics=metrics, spe=spe)
    logger.info(f"📊 Mean {metrics[0]} by K: {result.table().loc['Mean'].round(4).to_dict()}")
    return result
