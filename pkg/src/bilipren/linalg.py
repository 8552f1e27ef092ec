"""Dense double-precision matrix primitives used throughout the library.

Everything operates on plain ``numpy`` arrays in float64.  The accuracy
contracts (orthogonality residuals, eigenvalue shifts) are what matter;
the underlying LAPACK routines are interchangeable.
"""

from __future__ import annotations

import numpy as np

#: absolute tolerance on the max element mismatch |S - S^T| for symmetry checks
SYMMETRY_TOL = 1e-10


def _as_matrix(M) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    if M.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got array of shape {M.shape}")
    return M


def cayley(J) -> np.ndarray:
    """Orthogonal matrix from an arbitrary square matrix.

    Computes ``Q = (I + Z)(I - Z)^{-1}`` with ``Z = J^T - J``.  Since Z is
    skew-symmetric, ``I - Z`` is always nonsingular and the result satisfies
    ``Q^T Q = I`` up to round-off for any finite input.
    """
    J = _as_matrix(J)
    if J.shape[0] != J.shape[1]:
        raise ValueError(f"cayley needs a square matrix, got shape {J.shape}")
    Z = J.T - J
    eye = np.eye(J.shape[0])
    # Q (I - Z) = I + Z, solved via the transposed system.
    return np.linalg.solve((eye - Z).T, (eye + Z).T).T


def min_eig_sym(S) -> float:
    """Smallest eigenvalue of a symmetric matrix.

    Raises ``ValueError`` if the input deviates from symmetry by more than
    ``SYMMETRY_TOL`` in any element; that always indicates a caller bug.
    The matrix is symmetrized before factorization so the result is exact
    for the symmetric part.
    """
    S = _as_matrix(S)
    if S.shape[0] != S.shape[1]:
        raise ValueError(f"min_eig_sym needs a square matrix, got shape {S.shape}")
    if S.size == 0:
        raise ValueError("min_eig_sym of an empty matrix is undefined")
    skew = np.abs(S - S.T).max()
    if skew > SYMMETRY_TOL:
        raise ValueError(f"matrix is not symmetric: max |S - S^T| = {skew:.3e}")
    return float(np.linalg.eigvalsh(0.5 * (S + S.T))[0])


def sv_extremes(M) -> tuple[float, float]:
    """Extreme singular values ``(sigma_min, sigma_max)`` of a dense matrix."""
    M = _as_matrix(M)
    if M.size == 0:
        return 0.0, 0.0
    s = np.linalg.svd(M, compute_uv=False)
    return float(s[-1]), float(s[0])


def is_posdef(S, tol: float = 0.0) -> bool:
    """True iff the symmetric matrix S has smallest eigenvalue above ``tol``."""
    return min_eig_sym(S) > tol
