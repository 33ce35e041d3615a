"""
Ordinary kriging of tangent vectors inside one tile.

Observations of a tile are mapped to the tangent space at the tile's
tangent point, kriged there with the tile's variogram, and the prediction is
mapped back to the manifold with the exponential map.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

from domain_graph import DomainGraph
from manifolds import Manifold
from matrix_utils import solve_saddle
from variography import VariogramModel

logger = logging.getLogger(__name__)

COINCIDENCE_TOL = 1e-12


@dataclass
class TileModel:
    tile: int
    manifold: Manifold
    tangent_point: np.ndarray
    site_indices: np.ndarray
    logs: np.ndarray
    variogram: VariogramModel
    fallbacks: List[str] = field(default_factory=list)

    @property
    def size(self) -> int:
        return len(self.site_indices)


@dataclass
class KrigingWeights:
    """Weights for one target, or one column per target when solved in batch."""

    weights: np.ndarray
    lagrange_multiplier: np.ndarray
    kriging_variance: np.ndarray


def solve_kriging(variogram: VariogramModel, site_dist, target_dist) -> KrigingWeights:
    """
    Solve the ordinary-kriging system for every column of ``target_dist``
    ``(n_tile, m)`` against the tile's own distances ``site_dist``.
    """
    site_dist = np.asarray(site_dist, dtype=float)
    target_dist = np.asarray(target_dist, dtype=float)
    n, m = target_dist.shape

    weights = np.zeros((n, m))
    multiplier = np.zeros(m)
    variance = np.zeros(m)

    if variogram.nugget + variogram.partial_sill <= np.finfo(float).tiny:
        # a flat-zero variogram means every site is interchangeable
        weights[:] = 1.0 / n
        return KrigingWeights(weights, multiplier, variance)

    unresolved = np.ones(m, dtype=bool)
    if variogram.nugget == 0.0:
        closest = np.argmin(target_dist, axis=0)
        exact = target_dist[closest, np.arange(m)] < COINCIDENCE_TOL
        weights[closest[exact], np.flatnonzero(exact)] = 1.0
        unresolved &= ~exact

    if np.any(unresolved):
        gamma = variogram(site_dist)
        gamma0 = variogram(target_dist[:, unresolved])
        lam, mu = solve_saddle(gamma, gamma0)
        weights[:, unresolved] = lam
        multiplier[unresolved] = mu
        variance[unresolved] = np.maximum(np.sum(lam * gamma0, axis=0) + mu, 0.0)

    return KrigingWeights(weights, multiplier, variance)


def kriging_weights(model: TileModel, graph: DomainGraph, target) -> KrigingWeights:
    """Kriging weights for a single target location."""
    idx = model.site_indices
    target_dist = graph.target_distances(target)[:, idx].T
    batch = solve_kriging(model.variogram, graph.dist[np.ix_(idx, idx)], target_dist)
    return KrigingWeights(
        weights=batch.weights[:, 0],
        lagrange_multiplier=float(batch.lagrange_multiplier[0]),
        kriging_variance=float(batch.kriging_variance[0]),
    )


def krige_tangent(model: TileModel, weights) -> np.ndarray:
    """Weighted sum of the tile's log vectors; ``weights`` is ``(n_tile,)`` or ``(n_tile, m)``."""
    w = weights.weights if isinstance(weights, KrigingWeights) else np.asarray(weights, dtype=float)
    return np.tensordot(w, model.logs, axes=([0], [0]))


def krige_predict(model: TileModel, graph: DomainGraph, target) -> np.ndarray:
    weights = kriging_weights(model, graph, target)
    return model.manifold.exp(model.tangent_point, krige_tangent(model, weights))


def predict_tile(model: TileModel, graph: DomainGraph, target_dist) -> Tuple[np.ndarray, KrigingWeights]:
    """
    Predict every target of a tile at once. ``target_dist`` is ``(m, n)``
    (targets by all sites); the tile's columns are picked out here.
    Returns predictions ``(m, *point_shape)`` and the batched weights.
    """
    idx = model.site_indices
    tile_target_dist = np.asarray(target_dist, dtype=float)[:, idx].T
    batch = solve_kriging(model.variogram, graph.dist[np.ix_(idx, idx)], tile_target_dist)
    tangents = krige_tangent(model, batch)
    predictions = model.manifold.exp(model.tangent_point, tangents)
    return predictions, batch
