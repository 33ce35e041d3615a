"""
Riemannian geometry of the manifolds used for kriging: SPD matrices with the
affine-invariant metric, unit hyperspheres, and the Cholesky manifold of
correlation matrices (a product of spheres, one per column).

Free functions operate on numpy arrays with arbitrary leading batch
dimensions. ``Manifold`` subclasses wrap them behind one interface so the
engine never needs to know which geometry it is running on.
"""

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from errors import (
    AntipodalPointError,
    DegenerateMeanError,
    DimensionMismatchError,
    InvalidMatrixError,
    NoConvergenceError,
    NotCorrelationError,
)
from matrix_utils import (
    EIG_FLOOR,
    check_spd,
    cholesky_upper,
    matrix_exp_sym,
    matrix_log_spd,
    spd_eigvals,
    spd_sqrt,
    symmetrize,
)

logger = logging.getLogger(__name__)

ANTIPODAL_TOL = 1e-8
UNIT_TOL = 1e-12
CORR_DIAG_TOL = 1e-10
DEGENERATE_MEAN_TOL = 1e-12
MEAN_TOL = 1e-9
MEAN_MAX_ITER = 200


def _transpose(m: np.ndarray) -> np.ndarray:
    return np.swapaxes(m, -1, -2)


# ---------------------------------------------------------------------------
# SPD(p), affine-invariant metric


def spd_exp(base, tangent) -> np.ndarray:
    """exp_base(Y) = base^{1/2} exp(base^{-1/2} Y base^{-1/2}) base^{1/2}"""
    root, inv_root = spd_sqrt(base)
    inner = inv_root @ symmetrize(tangent) @ inv_root
    return symmetrize(root @ matrix_exp_sym(inner) @ root)


def spd_log(base, point) -> np.ndarray:
    """log_base(X) = base^{1/2} log(base^{-1/2} X base^{-1/2}) base^{1/2}"""
    root, inv_root = spd_sqrt(base)
    inner = inv_root @ symmetrize(point) @ inv_root
    return symmetrize(root @ matrix_log_spd(inner) @ root)


def spd_dist(a, b) -> np.ndarray:
    """Affine-invariant geodesic distance ``||log(a^{-1/2} b a^{-1/2})||_F``."""
    a = symmetrize(a)
    b = symmetrize(b)
    _, inv_root = spd_sqrt(a)
    check_spd(b)
    eigenvalues = spd_eigvals(inv_root @ b @ inv_root)
    d = np.sqrt(np.sum(np.log(eigenvalues) ** 2, axis=-1))
    same = np.all(a == b, axis=(-2, -1))
    return np.where(same, 0.0, d)


def spd_inner(base, u, v) -> np.ndarray:
    """trace(base^{-1} u base^{-1} v)"""
    base_inv = np.linalg.inv(check_spd(base))
    return np.einsum("...ij,...ji->...", base_inv @ symmetrize(u), base_inv @ symmetrize(v))


# ---------------------------------------------------------------------------
# Unit hypersphere


def sphere_dist(a, b) -> np.ndarray:
    # chord form: exact zero for identical points and well conditioned near 0 and pi
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    chord = np.linalg.norm(a - b, axis=-1)
    return 2.0 * np.arcsin(np.clip(0.5 * chord, 0.0, 1.0))


def sphere_exp(base, tangent) -> np.ndarray:
    base = np.asarray(base, dtype=float)
    tangent = np.asarray(tangent, dtype=float)
    length = np.linalg.norm(tangent, axis=-1, keepdims=True)
    safe = np.where(length > 0.0, length, 1.0)
    moved = np.cos(length) * base + np.sin(length) * tangent / safe
    moved = moved / np.linalg.norm(moved, axis=-1, keepdims=True)
    return np.where(length > 0.0, moved, np.broadcast_to(base, moved.shape))


def sphere_log(base, point, antipodal_tol: float = ANTIPODAL_TOL) -> np.ndarray:
    base = np.asarray(base, dtype=float)
    point = np.asarray(point, dtype=float)
    cosine = np.sum(base * point, axis=-1, keepdims=True)
    if np.any(cosine <= -1.0 + antipodal_tol):
        raise AntipodalPointError(
            "Point is antipodal to the base point; the log map is undefined",
            {"min_inner_product": float(np.min(cosine))},
        )
    # projection of (point - base) onto the tangent space at base
    direction = point - cosine * base
    direction_norm = np.linalg.norm(direction, axis=-1, keepdims=True)
    length = sphere_dist(base, point)[..., None]
    scale = np.where(direction_norm > 0.0, length / np.where(direction_norm > 0.0, direction_norm, 1.0), 0.0)
    return scale * direction


# ---------------------------------------------------------------------------
# Cholesky manifold: column j of an upper-triangular factor lives on S^{j+1}


def _chol_columns(p: int) -> range:
    return range(1, p)


def chol_exp(base, tangent) -> np.ndarray:
    base = np.asarray(base, dtype=float)
    tangent = np.asarray(tangent, dtype=float)
    p = base.shape[-1]
    out = np.zeros(np.broadcast_shapes(base.shape, tangent.shape))
    out[..., 0, 0] = 1.0
    for j in _chol_columns(p):
        out[..., : j + 1, j] = sphere_exp(base[..., : j + 1, j], tangent[..., : j + 1, j])
    return out


def chol_log(base, point, antipodal_tol: float = ANTIPODAL_TOL) -> np.ndarray:
    base = np.asarray(base, dtype=float)
    point = np.asarray(point, dtype=float)
    p = base.shape[-1]
    out = np.zeros(np.broadcast_shapes(base.shape, point.shape))
    for j in _chol_columns(p):
        try:
            out[..., : j + 1, j] = sphere_log(base[..., : j + 1, j], point[..., : j + 1, j], antipodal_tol)
        except AntipodalPointError as e:
            context = dict(e.context)
            context["column"] = j + 1
            raise AntipodalPointError(f"Antipodal Cholesky column {j + 1}", context)
    return out


def chol_dist(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    p = a.shape[-1]
    total = np.zeros(np.broadcast_shapes(a.shape, b.shape)[:-2])
    for j in _chol_columns(p):
        total = total + sphere_dist(a[..., : j + 1, j], b[..., : j + 1, j]) ** 2
    return np.sqrt(total)


def corr_to_chol(r) -> np.ndarray:
    """Map a correlation matrix R to its upper Cholesky factor H (R = H^T H)."""
    r = symmetrize(r)
    diagonal = np.diagonal(r, axis1=-2, axis2=-1)
    deviation = float(np.max(np.abs(diagonal - 1.0)))
    if deviation > CORR_DIAG_TOL:
        raise NotCorrelationError(
            "Correlation matrix diagonal must be 1",
            {"max_diagonal_deviation": deviation},
        )
    check_spd(r)
    h = cholesky_upper(r)
    # columns of H^T H with unit diagonal are unit vectors; remove round-off
    norms = np.linalg.norm(h, axis=-2, keepdims=True)
    return h / norms


def chol_to_corr(h) -> np.ndarray:
    h = np.asarray(h, dtype=float)
    r = symmetrize(_transpose(h) @ h)
    p = r.shape[-1]
    r[..., np.arange(p), np.arange(p)] = 1.0
    return r


def extrinsic_mean_chol(points, weights=None) -> np.ndarray:
    """
    Column-wise extrinsic mean on Chol(p): average each column in the ambient
    space and project it back onto its sphere. ``points`` is ``(..., N, p, p)``.
    """
    points = np.asarray(points, dtype=float)
    w = _normalized_weights(points.shape[-3], weights)
    ambient = np.tensordot(w, np.moveaxis(points, -3, 0), axes=1)
    norms = np.linalg.norm(ambient, axis=-2, keepdims=True)
    norms[..., 0] = 1.0
    if np.any(norms < DEGENERATE_MEAN_TOL):
        raise DegenerateMeanError(
            "A column-wise arithmetic mean vanished; cannot project to the sphere",
            {"min_column_norm": float(np.min(norms))},
        )
    out = ambient / norms
    out[..., 0, 0] = 1.0
    return np.triu(out)


# ---------------------------------------------------------------------------
# Means


def _normalized_weights(n: int, weights) -> np.ndarray:
    if n == 0:
        raise ValueError("Cannot average an empty set of points")
    if weights is None:
        return np.full(n, 1.0 / n)
    w = np.asarray(weights, dtype=float)
    if w.shape != (n,):
        raise DimensionMismatchError(
            "Weights must have one entry per point", {"points": n, "weights": list(w.shape)}
        )
    if np.any(w < 0.0) or not np.sum(w) > 0.0:
        raise ValueError("Weights must be nonnegative with a positive sum")
    return w / np.sum(w)


def intrinsic_mean(
    manifold: "Manifold",
    points,
    weights=None,
    tol: float = MEAN_TOL,
    max_iter: int = MEAN_MAX_ITER,
) -> np.ndarray:
    """
    Weighted Frechet (Karcher) mean by the fixed-point iteration
    ``mean <- exp_mean(sum_i w_i log_mean(x_i))`` started at the first point.

    ``points`` has shape ``(..., N, *point_shape)``; every leading batch entry
    gets its own mean and stops updating once its gradient norm is below
    ``tol``. Raises NoConvergenceError if any entry is still moving after
    ``max_iter`` updates.
    """
    points = np.asarray(points, dtype=float)
    axis = points.ndim - manifold.point_ndim - 1
    if axis < 0:
        raise DimensionMismatchError(
            "Expected a stack of points", {"shape": list(points.shape), "point_ndim": manifold.point_ndim}
        )
    w = _normalized_weights(points.shape[axis], weights)
    stack = np.moveaxis(points, axis, 0)
    mean = stack[0].copy()

    for iteration in range(max_iter + 1):
        step = np.tensordot(w, manifold.log(mean[None], stack), axes=1)
        gradient_norm = manifold.norm(mean, step)
        done = np.asarray(gradient_norm <= tol)
        if np.all(done):
            logger.debug(f"Karcher mean converged after {iteration} updates")
            return mean
        if iteration == max_iter:
            break
        moved = manifold.exp(mean, step)
        mask = done.reshape(done.shape + (1,) * manifold.point_ndim)
        mean = np.where(mask, mean, moved)

    raise NoConvergenceError(
        "Karcher mean iteration did not converge",
        {"max_iter": max_iter, "tol": tol, "gradient_norm": float(np.max(gradient_norm))},
    )


# ---------------------------------------------------------------------------
# Common interface


@dataclass(frozen=True)
class ManifoldKind:
    """Tag plus dimension: ``spd``/``cholesky`` use p (matrix size), ``sphere`` uses q."""

    tag: str
    dim: int

    TAGS = ("spd", "sphere", "cholesky")

    def __post_init__(self):
        if self.tag not in self.TAGS:
            raise ValueError(f"Unknown manifold '{self.tag}', expected one of {self.TAGS}")
        minimum = 1 if self.tag == "sphere" else 2
        if int(self.dim) != self.dim or self.dim < minimum:
            raise ValueError(f"Manifold {self.tag} needs dimension >= {minimum}, got {self.dim}")

    def build(self) -> "Manifold":
        if self.tag == "spd":
            return SPDManifold(self.dim)
        if self.tag == "sphere":
            return SphereManifold(self.dim)
        return CholeskyManifold(self.dim)

    def __str__(self) -> str:
        labels = {"spd": "SPD", "sphere": "Sphere", "cholesky": "Cholesky"}
        return f"{labels[self.tag]}({self.dim})"


class Manifold(ABC):
    point_ndim: int = 2

    def __init__(self, kind: ManifoldKind):
        self.kind = kind
        self.dim = kind.dim

    @property
    def point_shape(self) -> Tuple[int, ...]:
        return (self.dim,) * self.point_ndim

    def _check_shape(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        if points.shape[points.ndim - self.point_ndim:] != self.point_shape or points.ndim < self.point_ndim:
            raise DimensionMismatchError(
                f"Points do not belong to {self.kind}",
                {"expected": list(self.point_shape), "got": list(points.shape)},
            )
        return points

    @abstractmethod
    def validate_point(self, points) -> np.ndarray:
        """Return ``points`` as a float array or raise if any violates the manifold's invariants."""

    @abstractmethod
    def exp(self, base, tangent) -> np.ndarray: ...

    @abstractmethod
    def log(self, base, point) -> np.ndarray: ...

    @abstractmethod
    def dist(self, a, b) -> np.ndarray: ...

    @abstractmethod
    def inner(self, base, u, v) -> np.ndarray: ...

    @abstractmethod
    def tangent_coordinates(self, base, tangents) -> np.ndarray:
        """Isometric coordinates of tangent vectors at ``base`` in a flat Euclidean space."""

    @abstractmethod
    def extrinsic_mean(self, points, weights=None) -> np.ndarray: ...

    @abstractmethod
    def to_rows(self, points) -> np.ndarray: ...

    @abstractmethod
    def from_rows(self, rows) -> np.ndarray: ...

    @abstractmethod
    def column_names(self) -> List[str]: ...

    def norm(self, base, tangent) -> np.ndarray:
        return np.sqrt(np.maximum(self.inner(base, tangent, tangent), 0.0))

    def mean(self, points, weights=None, tol: float = MEAN_TOL, max_iter: int = MEAN_MAX_ITER) -> np.ndarray:
        return intrinsic_mean(self, points, weights=weights, tol=tol, max_iter=max_iter)

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.dim})"


def _upper_names(p: int) -> List[str]:
    sep = "" if p < 10 else "_"
    return [f"m{i + 1}{sep}{j + 1}" for i in range(p) for j in range(i, p)]


def _upper_to_rows(m: np.ndarray) -> np.ndarray:
    p = m.shape[-1]
    rows, cols = np.triu_indices(p)
    return m[..., rows, cols]


def _rows_to_symmetric(rows: np.ndarray, p: int) -> np.ndarray:
    rows = np.asarray(rows, dtype=float)
    expected = p * (p + 1) // 2
    if rows.shape[-1] != expected:
        raise DimensionMismatchError(
            f"Expected {expected} upper-triangle entries per row", {"got": rows.shape[-1]}
        )
    out = np.zeros(rows.shape[:-1] + (p, p))
    i, j = np.triu_indices(p)
    out[..., i, j] = rows
    out[..., j, i] = rows
    return out


class SPDManifold(Manifold):
    point_ndim = 2

    def __init__(self, p: int, eig_floor: float = EIG_FLOOR):
        super().__init__(ManifoldKind("spd", p))
        self.eig_floor = eig_floor

    def validate_point(self, points) -> np.ndarray:
        points = self._check_shape(points)
        return check_spd(points, self.eig_floor)

    def exp(self, base, tangent):
        return spd_exp(base, tangent)

    def log(self, base, point):
        return spd_log(base, point)

    def dist(self, a, b):
        return spd_dist(a, b)

    def inner(self, base, u, v):
        return spd_inner(base, u, v)

    def tangent_coordinates(self, base, tangents):
        _, inv_root = spd_sqrt(base)
        whitened = inv_root @ np.asarray(tangents, dtype=float) @ inv_root
        return whitened.reshape(whitened.shape[:-2] + (self.dim * self.dim,))

    def extrinsic_mean(self, points, weights=None):
        # the SPD cone is convex, so the ambient average stays inside it
        points = np.asarray(points, dtype=float)
        w = _normalized_weights(points.shape[-3], weights)
        return symmetrize(np.tensordot(w, np.moveaxis(points, -3, 0), axes=1))

    def to_rows(self, points):
        return _upper_to_rows(self._check_shape(points))

    def from_rows(self, rows):
        return _rows_to_symmetric(rows, self.dim)

    def column_names(self):
        return _upper_names(self.dim)


class SphereManifold(Manifold):
    point_ndim = 1

    def __init__(self, q: int, antipodal_tol: float = ANTIPODAL_TOL):
        super().__init__(ManifoldKind("sphere", q))
        self.antipodal_tol = antipodal_tol

    def validate_point(self, points) -> np.ndarray:
        points = self._check_shape(points)
        deviation = np.abs(np.linalg.norm(points, axis=-1) - 1.0)
        if np.any(deviation > UNIT_TOL):
            raise InvalidMatrixError(
                "Sphere point does not have unit norm",
                {"invariant": "unit_norm", "max_deviation": float(np.max(deviation))},
            )
        return points

    def exp(self, base, tangent):
        return sphere_exp(base, tangent)

    def log(self, base, point):
        return sphere_log(base, point, self.antipodal_tol)

    def dist(self, a, b):
        return sphere_dist(a, b)

    def inner(self, base, u, v):
        return np.sum(np.asarray(u, dtype=float) * np.asarray(v, dtype=float), axis=-1)

    def tangent_coordinates(self, base, tangents):
        return np.asarray(tangents, dtype=float)

    def extrinsic_mean(self, points, weights=None):
        points = np.asarray(points, dtype=float)
        w = _normalized_weights(points.shape[-2], weights)
        ambient = np.tensordot(w, np.moveaxis(points, -2, 0), axes=1)
        norms = np.linalg.norm(ambient, axis=-1, keepdims=True)
        if np.any(norms < DEGENERATE_MEAN_TOL):
            raise DegenerateMeanError(
                "Arithmetic mean of sphere points vanished",
                {"min_norm": float(np.min(norms))},
            )
        return ambient / norms

    def to_rows(self, points):
        return self._check_shape(points)

    def from_rows(self, rows):
        return np.asarray(rows, dtype=float)

    def column_names(self):
        return [f"z{i + 1}" for i in range(self.dim)]


class CholeskyManifold(Manifold):
    """Correlation matrices represented by their upper Cholesky factor.

    Rows in files hold the correlation matrix (upper triangle, unit diagonal
    included) rather than the factor, so datasets stay readable.
    """

    point_ndim = 2

    def __init__(self, p: int, antipodal_tol: float = ANTIPODAL_TOL):
        super().__init__(ManifoldKind("cholesky", p))
        self.antipodal_tol = antipodal_tol

    def validate_point(self, points) -> np.ndarray:
        points = self._check_shape(points)
        lower = np.tril(points, k=-1)
        if np.any(lower != 0.0):
            raise InvalidMatrixError("Cholesky factor must be upper triangular", {"invariant": "upper_triangular"})
        if np.any(np.abs(points[..., 0, 0] - 1.0) > UNIT_TOL):
            raise InvalidMatrixError("Cholesky factor must have H[0][0] = 1", {"invariant": "first_column"})
        deviation = np.abs(np.linalg.norm(points, axis=-2) - 1.0)
        if np.any(deviation > UNIT_TOL):
            raise InvalidMatrixError(
                "Cholesky factor columns must have unit norm",
                {"invariant": "unit_columns", "max_deviation": float(np.max(deviation))},
            )
        return points

    def exp(self, base, tangent):
        return chol_exp(base, tangent)

    def log(self, base, point):
        return chol_log(base, point, self.antipodal_tol)

    def dist(self, a, b):
        return chol_dist(a, b)

    def inner(self, base, u, v):
        return np.sum(np.asarray(u, dtype=float) * np.asarray(v, dtype=float), axis=(-2, -1))

    def tangent_coordinates(self, base, tangents):
        tangents = np.asarray(tangents, dtype=float)
        return tangents.reshape(tangents.shape[:-2] + (self.dim * self.dim,))

    def extrinsic_mean(self, points, weights=None):
        return extrinsic_mean_chol(points, weights)

    def to_rows(self, points):
        return _upper_to_rows(chol_to_corr(self._check_shape(points)))

    def from_rows(self, rows):
        return corr_to_chol(_rows_to_symmetric(rows, self.dim))

    def column_names(self):
        return _upper_names(self.dim)
