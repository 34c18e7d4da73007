"""Dense linear-algebra kernels used by the merging engine.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64. Every
function here is pure: inputs are never modified in place.
"""
from __future__ import annotations

from dataclasses import dataclass
import math

import numpy as np

from .errors import InvalidShape, NotPSD, NotSymmetric

DEFAULT_LAMBDA_REL = 1e-4
DEFAULT_RANK_EPS = 1e-10
SYMMETRY_TOL = 1e-12
PSD_TOL = 1e-9

JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 100

#: Returned by :func:`condition_number` for rank-deficient matrices.
UNBOUNDED = math.inf


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Coerce ``x`` to a finite float64 2-D array."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise InvalidShape(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidShape(f"{name} contains NaN or Inf")
    return a


def _require_square(a: np.ndarray, name: str = "matrix") -> None:
    if a.shape[0] != a.shape[1]:
        raise InvalidShape(f"{name} must be square, got shape {a.shape}")


def _require_symmetric(a: np.ndarray, name: str = "matrix") -> None:
    _require_square(a, name)
    scale = max(1.0, float(np.max(np.abs(a)))) if a.size else 1.0
    if a.size and np.max(np.abs(a - a.T)) > SYMMETRY_TOL * scale:
        raise NotSymmetric(f"{name} is not symmetric")


@dataclass(frozen=True)
class GramStats:
    """Gram matrix of one task's layer inputs plus the matching cross term.

    ``cross`` holds ``W @ gram`` for the task's own weight ``W``.
    """

    gram: np.ndarray
    cross: np.ndarray
    sample_count: int
    normalized: bool


def normalize_columns(x: np.ndarray) -> np.ndarray:
    """Scale every column to unit L2 norm; all-zero columns stay zero."""
    norms = np.sqrt(np.sum(x * x, axis=0))
    safe = np.where(norms > 0.0, norms, 1.0)
    return x / safe


def gram(x, normalize: bool = False) -> np.ndarray:
    """Return ``X X^T`` for a ``d x n`` sample matrix (samples are columns).

    With ``normalize`` set, each sample is first rescaled to unit length so the
    entries become cosine similarities between feature rows.
    """
    x = as_matrix(x, "X")
    if x.shape[0] == 0 or x.shape[1] == 0:
        raise InvalidShape(f"gram needs a non-empty matrix, got shape {x.shape}")
    if normalize:
        x = normalize_columns(x)
    g = x @ x.T
    # exact symmetry regardless of BLAS blocking
    return 0.5 * (g + g.T)


def gram_stats(weight, x, normalize: bool = False) -> GramStats:
    g = gram(x, normalize)
    w = as_matrix(weight, "W")
    if w.shape[1] != g.shape[0]:
        raise InvalidShape(f"weight has {w.shape[1]} columns, inputs have {g.shape[0]} rows")
    return GramStats(gram=g, cross=w @ g, sample_count=x.shape[1], normalized=normalize)


def eigh_jacobi(a, tol: float = JACOBI_TOL, max_sweeps: int = JACOBI_MAX_SWEEPS):
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Parameters
    ----------
    a : array_like
        Symmetric ``d x d`` matrix. Only its symmetric part is used.
    tol : float
        Sweeps stop once the off-diagonal Frobenius norm is at most
        ``tol * ||a||_F``.
    max_sweeps : int
        Hard cap on the number of full sweeps.

    Returns
    -------
    (eigenvalues, eigenvectors)
        Eigenvalues in ascending order and the orthogonal matrix whose columns
        are the matching eigenvectors.
    """
    a = as_matrix(a, "A")
    _require_square(a, "A")
    n = a.shape[0]
    a = 0.5 * (a + a.T)
    v = np.eye(n)
    if n < 2:
        return np.diag(a).copy(), v

    total = math.sqrt(float(np.sum(a * a)))
    if total == 0.0:
        return np.zeros(n), v
    threshold = tol * total
    iu = np.triu_indices(n, 1)

    for _ in range(max_sweeps):
        off = math.sqrt(2.0 * float(np.sum(a[iu] ** 2)))
        if off <= threshold:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 0.5 / theta
                else:
                    t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c

                col_p = a[:, p].copy()
                col_q = a[:, q]
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                row_p = a[p, :].copy()
                row_q = a[q, :]
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
                a[p, q] = a[q, p] = 0.0

                vp = v[:, p].copy()
                vq = v[:, q]
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq

    w = np.diag(a).copy()
    order = np.argsort(w, kind="stable")
    return w[order], v[:, order]


def pinv_tikhonov(
    g,
    lambda_rel: float = DEFAULT_LAMBDA_REL,
    rank_eps: float = DEFAULT_RANK_EPS,
) -> np.ndarray:
    """Regularized Moore-Penrose inverse of a symmetric PSD matrix.

    The ridge added to every eigenvalue is ``lambda_rel * trace(G) / d``, i.e.
    relative to the mean eigenvalue. Eigenvalues whose regularized value does
    not exceed ``rank_eps * lambda_max`` are treated as zero.
    """
    g = as_matrix(g, "G")
    _require_symmetric(g, "G")
    if lambda_rel < 0 or rank_eps < 0:
        raise ValueError("lambda_rel and rank_eps must be non-negative")
    d = g.shape[0]
    if d == 0:
        return np.zeros((0, 0))
    lam, q = eigh_jacobi(g)
    ridge = lambda_rel * float(np.trace(g)) / d
    shifted = lam + ridge
    cutoff = rank_eps * float(lam[-1])
    keep = shifted > cutoff
    inv = np.zeros_like(lam)
    inv[keep] = 1.0 / shifted[keep]
    out = (q * inv) @ q.T
    return 0.5 * (out + out.T)


def sqrtm_psd(a) -> np.ndarray:
    """Symmetric PSD square root.

    Slightly negative eigenvalues (within ``1e-9`` of the largest) are clipped
    to zero; anything more negative raises :class:`NotPSD`.
    """
    a = as_matrix(a, "A")
    _require_symmetric(a, "A")
    if a.shape[0] == 0:
        return np.zeros((0, 0))
    lam, q = eigh_jacobi(a)
    scale = max(float(lam[-1]), 0.0)
    if lam[0] < -PSD_TOL * scale:
        raise NotPSD(f"matrix has eigenvalue {lam[0]:.3e} (largest {scale:.3e})")
    root = np.sqrt(np.clip(lam, 0.0, None))
    s = (q * root) @ q.T
    return 0.5 * (s + s.T)


def condition_number(g, rank_eps: float = DEFAULT_RANK_EPS) -> float:
    """``lambda_max / lambda_min``, or :data:`UNBOUNDED` when rank-deficient."""
    g = as_matrix(g, "G")
    _require_symmetric(g, "G")
    lam, _ = eigh_jacobi(g)
    lmax, lmin = float(lam[-1]), float(lam[0])
    if lmax <= 0.0 or lmin <= rank_eps * lmax:
        return UNBOUNDED
    return lmax / lmin


def offdiag_norm(g) -> float:
    """Sum of absolute values of the strictly upper-triangular entries."""
    g = as_matrix(g, "G")
    _require_square(g, "G")
    return float(np.sum(np.abs(np.triu(g, 1))))
