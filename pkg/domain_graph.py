"""
Spatial domain: observation sites, the metric used between them, and random
Voronoi partitions of the sites.

Three metrics are supported:

- ``euclidean``   straight-line distances (convex domains)
- ``delaunay``    shortest paths on a Delaunay triangulation of the sites plus
                  optional extra vertices, with triangles outside an optional
                  boundary polygon removed so paths cannot cross land/gaps
- ``precomputed`` a user-supplied site distance matrix

Tiles of a ``Partition`` are numbered from 0.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence

import networkx as nx
import numpy as np
import shapely
from scipy.spatial import Delaunay, QhullError, cKDTree
from scipy.spatial.distance import cdist, pdist, squareform
from shapely.geometry import Polygon

from errors import (
    DegenerateInputError,
    DimensionMismatchError,
    DisconnectedGraphError,
    PartitionInfeasibleError,
    PreconditionViolation,
)

logger = logging.getLogger(__name__)

DUP_TOL = 1e-9
MIN_TILE_SIZE = 3
MAX_PARTITION_ATTEMPTS = 100


@dataclass(frozen=True)
class Site:
    id: str
    x: float
    y: float


class SiteSet:
    """Ordered, validated collection of observation locations."""

    def __init__(self, ids: Sequence[str], coords, dup_tol: float = DUP_TOL):
        self.ids: List[str] = [str(i) for i in ids]
        self.coords = np.asarray(coords, dtype=float).reshape(-1, 2)
        self.dup_tol = dup_tol

        if len(self.ids) != len(self.coords):
            raise DimensionMismatchError(
                "Site ids and coordinates differ in length",
                {"ids": len(self.ids), "coords": len(self.coords)},
            )
        if len(set(self.ids)) != len(self.ids):
            seen, dupes = set(), []
            for site_id in self.ids:
                if site_id in seen:
                    dupes.append(site_id)
                seen.add(site_id)
            raise DegenerateInputError("Duplicate site ids", {"ids": dupes[:10]})
        if not np.all(np.isfinite(self.coords)):
            raise DegenerateInputError("Site coordinates must be finite")
        if len(self.coords) > 1:
            gaps = pdist(self.coords)
            closest = float(gaps.min())
            if closest <= dup_tol:
                square = squareform(gaps)
                np.fill_diagonal(square, np.inf)
                i, j = np.argwhere(square <= dup_tol)[0]
                raise DegenerateInputError(
                    "Two sites closer than the duplicate tolerance",
                    {"site_a": self.ids[i], "site_b": self.ids[j], "distance": closest},
                )

    @classmethod
    def from_sites(cls, sites: Sequence[Site], dup_tol: float = DUP_TOL) -> "SiteSet":
        return cls([s.id for s in sites], [(s.x, s.y) for s in sites], dup_tol)

    @property
    def n(self) -> int:
        return len(self.ids)

    def __len__(self) -> int:
        return self.n

    def __getitem__(self, i: int) -> Site:
        return Site(self.ids[i], float(self.coords[i, 0]), float(self.coords[i, 1]))

    def subset(self, indices) -> "SiteSet":
        indices = np.asarray(indices, dtype=int)
        return SiteSet([self.ids[i] for i in indices], self.coords[indices], self.dup_tol)


@dataclass
class DomainGraph:
    """
    Site metric plus what is needed to measure distances from arbitrary
    targets: every graph vertex's coordinates and its graph distance to each
    site. Targets are snapped to the nearest reachable vertex and pay the
    Euclidean hop.
    """

    sites: SiteSet
    dist: np.ndarray
    mode: str
    vertices: np.ndarray
    vertex_dist: np.ndarray
    graph: Optional[nx.Graph] = None

    def __post_init__(self):
        reachable = np.all(np.isfinite(self.vertex_dist), axis=0)
        self._reachable = np.flatnonzero(reachable)
        self._tree = cKDTree(self.vertices[self._reachable])

    @property
    def n(self) -> int:
        return self.sites.n

    def target_distances(self, targets) -> np.ndarray:
        """Distances ``(m, n)`` from each target location to every site."""
        targets = np.asarray(targets, dtype=float).reshape(-1, 2)
        if self.mode == "euclidean":
            return cdist(targets, self.sites.coords)
        if len(self._reachable) == 0:
            raise DisconnectedGraphError("No graph vertex is reachable from the sites")
        hop, nearest = self._tree.query(targets)
        vertex = self._reachable[nearest]
        return hop[:, None] + self.vertex_dist[:, vertex].T

    def subset(self, indices) -> "DomainGraph":
        """Keep only the given sites as data; every vertex stays in the graph."""
        indices = np.asarray(indices, dtype=int)
        return DomainGraph(
            sites=self.sites.subset(indices),
            dist=self.dist[np.ix_(indices, indices)],
            mode=self.mode,
            vertices=self.vertices,
            vertex_dist=self.vertex_dist[indices],
            graph=self.graph,
        )

    def without_site(self, i: int) -> "DomainGraph":
        keep = np.delete(np.arange(self.n), i)
        return self.subset(keep)


def euclidean_graph(sites: SiteSet) -> DomainGraph:
    dist = squareform(pdist(sites.coords)) if sites.n > 1 else np.zeros((sites.n, sites.n))
    return DomainGraph(sites=sites, dist=dist, mode="euclidean", vertices=sites.coords.copy(), vertex_dist=dist)


def precomputed_graph(sites: SiteSet, dist, tol: float = 1e-9) -> DomainGraph:
    dist = np.asarray(dist, dtype=float)
    if dist.shape != (sites.n, sites.n):
        raise DimensionMismatchError(
            "Distance matrix must be n x n in site order",
            {"n": sites.n, "shape": list(dist.shape)},
        )
    problems = []
    if not np.all(np.isfinite(dist)):
        problems.append("non-finite entries")
    if np.any(dist < 0.0):
        problems.append("negative entries")
    if np.any(np.abs(np.diag(dist)) > tol):
        problems.append("nonzero diagonal")
    if np.any(np.abs(dist - dist.T) > tol * max(1.0, float(np.nanmax(np.abs(dist))))):
        problems.append("asymmetric")
    if problems:
        raise DegenerateInputError("Invalid precomputed distance matrix", {"problems": problems})
    dist = 0.5 * (dist + dist.T)
    np.fill_diagonal(dist, 0.0)
    return DomainGraph(sites=sites, dist=dist, mode="precomputed", vertices=sites.coords.copy(), vertex_dist=dist)


def _merge_extra_vertices(sites: SiteSet, extra_vertices, dup_tol: float) -> np.ndarray:
    if extra_vertices is None:
        return np.empty((0, 2))
    extra = np.asarray(extra_vertices, dtype=float).reshape(-1, 2)
    if len(extra) == 0:
        return extra
    # extra points that coincide with a site are the site itself
    gap, _ = cKDTree(sites.coords).query(extra)
    extra = extra[gap > dup_tol]
    if len(extra) > 1:
        drop = {j for _, j in cKDTree(extra).query_pairs(dup_tol)}
        if drop:
            extra = extra[[i for i in range(len(extra)) if i not in drop]]
    return extra


def build_delaunay(
    sites: SiteSet,
    boundary=None,
    extra_vertices=None,
    dup_tol: float = DUP_TOL,
) -> DomainGraph:
    """
    Graph distances on the Delaunay triangulation of ``sites`` plus
    ``extra_vertices``. When a ``boundary`` polygon is given, triangles whose
    centroid falls outside it are dropped before the graph is built.
    """
    extra = _merge_extra_vertices(sites, extra_vertices, dup_tol)
    vertices = np.vstack([sites.coords, extra])
    n_vertices = len(vertices)
    if n_vertices < 3:
        raise DegenerateInputError("Need at least 3 points to triangulate", {"points": n_vertices})
    centered = vertices - vertices.mean(axis=0)
    if np.linalg.matrix_rank(centered, tol=dup_tol) < 2:
        raise DegenerateInputError("All points are collinear", {"points": n_vertices})

    try:
        triangulation = Delaunay(vertices)
    except QhullError as e:
        raise DegenerateInputError(f"Delaunay triangulation failed: {e}", {"points": n_vertices})
    triangles = triangulation.simplices

    if boundary is not None:
        polygon = Polygon(np.asarray(boundary, dtype=float))
        if not polygon.is_valid or polygon.area <= 0.0:
            raise DegenerateInputError("Boundary polygon is not a valid simple polygon")
        centroids = vertices[triangles].mean(axis=1)
        inside = shapely.contains_xy(polygon, centroids[:, 0], centroids[:, 1])
        logger.debug(f"Boundary trimming kept {int(inside.sum())}/{len(triangles)} triangles")
        triangles = triangles[inside]

    graph = nx.Graph()
    graph.add_nodes_from(range(n_vertices))
    for a, b in ((0, 1), (1, 2), (0, 2)):
        u, v = triangles[:, a], triangles[:, b]
        lengths = np.linalg.norm(vertices[u] - vertices[v], axis=1)
        graph.add_weighted_edges_from(zip(u.tolist(), v.tolist(), lengths.tolist()))

    vertex_dist = np.full((sites.n, n_vertices), np.inf)
    for i in range(sites.n):
        lengths = nx.single_source_dijkstra_path_length(graph, i, weight="weight")
        vertex_dist[i, list(lengths.keys())] = list(lengths.values())

    dist = vertex_dist[:, : sites.n]
    if not np.all(np.isfinite(dist)):
        unreachable = np.argwhere(~np.isfinite(dist))
        i, j = unreachable[0]
        raise DisconnectedGraphError(
            "Boundary trimming disconnected the triangulation",
            {"site_a": sites.ids[i], "site_b": sites.ids[j], "disconnected_pairs": int(len(unreachable) // 2)},
        )
    dist = 0.5 * (dist + dist.T)
    np.fill_diagonal(dist, 0.0)
    vertex_dist[:, : sites.n] = dist

    logger.info(
        f"🔺 Delaunay graph: {n_vertices} vertices ({len(extra)} extra), "
        f"{graph.number_of_edges()} edges, {len(triangles)} triangles"
    )
    return DomainGraph(
        sites=sites, dist=dist, mode="delaunay", vertices=vertices, vertex_dist=vertex_dist, graph=graph
    )


@dataclass
class Partition:
    """One random Voronoi tessellation of the sites; ``assignment[i]`` is site i's tile."""

    nuclei: np.ndarray
    assignment: np.ndarray

    @property
    def k(self) -> int:
        return len(self.nuclei)

    def members(self, tile: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == tile)

    def tile_sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.k)


def draw_partition(
    graph: DomainGraph,
    k: int,
    rng: np.random.Generator,
    min_tile_size: int = MIN_TILE_SIZE,
    max_attempts: int = MAX_PARTITION_ATTEMPTS,
) -> Partition:
    """
    Draw K nuclei uniformly without replacement and assign every site to its
    nearest nucleus (lowest nucleus index wins ties). Redraws until every tile
    holds at least ``min_tile_size`` sites.
    """
    n = graph.n
    if not 1 <= k <= n:
        raise PreconditionViolation("Tile count must satisfy 1 <= K <= n", {"k": k, "n": n})
    if k * min_tile_size > n:
        raise PartitionInfeasibleError(
            "Not enough sites for K tiles of the minimum size",
            {"k": k, "n": n, "min_tile_size": min_tile_size},
        )

    for attempt in range(1, max_attempts + 1):
        nuclei = rng.choice(n, size=k, replace=False)
        assignment = np.argmin(graph.dist[:, nuclei], axis=1)
        sizes = np.bincount(assignment, minlength=k)
        if sizes.min() >= min_tile_size:
            if attempt > 1:
                logger.debug(f"Partition accepted after {attempt} draws")
            return Partition(nuclei=nuclei, assignment=assignment)

    raise PartitionInfeasibleError(
        "Could not draw a partition with every tile at the minimum size",
        {"k": k, "n": n, "min_tile_size": min_tile_size, "attempts": max_attempts},
    )


def assign_target(graph: DomainGraph, partition: Partition, targets) -> np.ndarray:
    """Tile index of the nucleus nearest to each target (lowest index on ties)."""
    distances = graph.target_distances(targets)
    return np.argmin(distances[:, partition.nuclei], axis=1)
