"""
Dense linear-algebra helpers for small symmetric matrices.

Every function accepts a single ``(p, p)`` matrix or a stack ``(..., p, p)``
and works on the trailing two axes, so whole prediction grids can be pushed
through one call.
"""

import logging
import warnings
from typing import Tuple

import numpy as np
from scipy import linalg

from errors import NoConvergenceError, NotPDError, OverflowGuardError, SingularSystemError

logger = logging.getLogger(__name__)

EIG_FLOOR = 1e-10
EXP_OVERFLOW_GUARD = 300.0
PIVOT_TOL = 1e-12


def _transpose(m: np.ndarray) -> np.ndarray:
    return np.swapaxes(m, -1, -2)


def symmetrize(m) -> np.ndarray:
    """Return a symmetric copy of a square matrix (or stack of them)."""
    m = np.asarray(m, dtype=float)
    if m.ndim < 2 or m.shape[-1] != m.shape[-2]:
        raise ValueError(f"Expected square matrices, got shape {m.shape}")
    if m.shape[-1] < 1:
        raise ValueError("Matrix dimension must be at least 1")
    return 0.5 * (m + _transpose(m))


def _eigh(m: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    try:
        return np.linalg.eigh(m)
    except np.linalg.LinAlgError as e:
        raise NoConvergenceError(f"Symmetric eigendecomposition did not converge: {e}")


def _check_floor(eigenvalues: np.ndarray, eig_floor: float) -> None:
    # eigenvalues ascending along the last axis
    largest = np.maximum(eigenvalues[..., -1], 0.0)
    smallest = eigenvalues[..., 0]
    bad = smallest <= eig_floor * np.maximum(largest, 1.0)
    if np.any(bad):
        raise NotPDError(
            "Matrix is not positive definite",
            {"min_eigenvalue": float(np.min(smallest)), "eig_floor": eig_floor},
        )


def check_spd(m, eig_floor: float = EIG_FLOOR) -> np.ndarray:
    """Symmetrize ``m`` and verify its smallest eigenvalue clears ``eig_floor``."""
    m = symmetrize(m)
    spd_eigvals(m, eig_floor)
    return m


def spd_eigvals(m, eig_floor: float = EIG_FLOOR) -> np.ndarray:
    """Ascending eigenvalues of an SPD matrix, after the positive-definiteness check."""
    try:
        eigenvalues = np.linalg.eigvalsh(symmetrize(m))
    except np.linalg.LinAlgError as e:
        raise NoConvergenceError(f"Symmetric eigenvalue solver did not converge: {e}")
    _check_floor(eigenvalues, eig_floor)
    return eigenvalues


def sym_eigen(m) -> Tuple[np.ndarray, np.ndarray]:
    """Eigenvalues in descending order and the matching orthonormal eigenvectors (as columns)."""
    w, v = _eigh(symmetrize(m))
    return w[..., ::-1], v[..., ::-1]


def _apply_spectral(v: np.ndarray, values: np.ndarray) -> np.ndarray:
    return (v * values[..., None, :]) @ _transpose(v)


def matrix_exp_sym(y, overflow_guard: float = EXP_OVERFLOW_GUARD) -> np.ndarray:
    w, v = _eigh(symmetrize(y))
    if np.any(w[..., -1] > overflow_guard):
        raise OverflowGuardError(
            "Matrix exponential would overflow",
            {"max_eigenvalue": float(np.max(w[..., -1])), "guard": overflow_guard},
        )
    return symmetrize(_apply_spectral(v, np.exp(w)))


def matrix_log_spd(m, eig_floor: float = EIG_FLOOR) -> np.ndarray:
    w, v = _eigh(symmetrize(m))
    _check_floor(w, eig_floor)
    return symmetrize(_apply_spectral(v, np.log(w)))


def spd_sqrt(m, eig_floor: float = EIG_FLOOR) -> Tuple[np.ndarray, np.ndarray]:
    """Return ``(m^{1/2}, m^{-1/2})``."""
    w, v = _eigh(symmetrize(m))
    _check_floor(w, eig_floor)
    root = np.sqrt(w)
    return symmetrize(_apply_spectral(v, root)), symmetrize(_apply_spectral(v, 1.0 / root))


def cholesky_upper(m) -> np.ndarray:
    """Upper-triangular ``H`` with positive diagonal such that ``H^T H = m``."""
    try:
        lower = np.linalg.cholesky(symmetrize(m))
    except np.linalg.LinAlgError as e:
        raise NotPDError(f"Cholesky factorization failed: {e}")
    return _transpose(lower).copy()


def solve_saddle(a, b, pivot_tol: float = PIVOT_TOL) -> Tuple[np.ndarray, np.ndarray]:
    """
    Solve the ordinary-kriging saddle system

        a @ w + mu * 1 = b,    sum(w) = 1

    ``b`` may be a vector ``(n,)`` or a matrix ``(n, m)`` holding one right-hand
    side per column; the factorization is shared across columns.
    Returns ``(weights, multiplier)`` shaped like ``b`` and ``b.shape[1:]``.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    n = a.shape[0]
    if a.shape != (n, n) or b.shape[0] != n:
        raise ValueError(f"Incompatible saddle system shapes {a.shape} and {b.shape}")

    augmented = np.zeros((n + 1, n + 1))
    augmented[:n, :n] = a
    augmented[:n, n] = 1.0
    augmented[n, :n] = 1.0

    with warnings.catch_warnings():
        # exact singularity is reported below via the pivot check
        warnings.simplefilter("ignore", linalg.LinAlgWarning)
        lu, piv = linalg.lu_factor(augmented, check_finite=True)
    smallest_pivot = float(np.min(np.abs(np.diag(lu))))
    if smallest_pivot < pivot_tol:
        raise SingularSystemError(
            "Kriging saddle system is singular",
            {"n": n, "smallest_pivot": smallest_pivot},
        )

    rhs = np.concatenate([b, np.ones((1,) + b.shape[1:])], axis=0)
    solution = linalg.lu_solve((lu, piv), rhs)
    return solution[:n], solution[n]
