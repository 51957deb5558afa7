"""Dense float64 linear algebra used throughout the package.

Everything here accepts plain numpy arrays. ``sym_eigen`` and ``pinv`` are
written out (cyclic Jacobi) so the log-determinant paths in :mod:`les.scores`
share one eigensolver; Cholesky goes through LAPACK ``dpotrf`` because it
reports the failing pivot.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import lapack

__all__ = [
    "NotSpdError",
    "NumericalError",
    "SpdFactor",
    "cholesky",
    "logdet_spd",
    "matmul",
    "pinv",
    "sym_eigen",
]


class NotSpdError(np.linalg.LinAlgError):
    """Raised when a matrix stays indefinite after the full jitter schedule."""

    def __init__(self, pivot: int, max_jitter: float):
        super().__init__(f"matrix is not positive definite (pivot {pivot}, max jitter {max_jitter:g})")
        self.pivot = pivot
        self.max_jitter = max_jitter


class NumericalError(ArithmeticError):
    pass


@dataclass(frozen=True)
class SpdFactor:
    lower: np.ndarray
    jitter_used: float = 0.0


def _as_matrix(m) -> np.ndarray:
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {a.shape}")
    return a


def matmul(a, b) -> np.ndarray:
    a = _as_matrix(a)
    b = _as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"dimension mismatch: {a.shape} x {b.shape}")
    return a @ b


def cholesky(m, max_jitter: float = 1e-6) -> SpdFactor:
    """Lower Cholesky factor, adding diagonal jitter 1e-12, 1e-11, ... if needed.

    Raises :class:`NotSpdError` carrying the (0-based) failing pivot when the
    matrix is still not positive definite at ``max_jitter``.
    """
    a = _as_matrix(m)
    n, k = a.shape
    if n != k:
        raise ValueError(f"cholesky needs a square matrix, got {a.shape}")
    scale = np.max(np.abs(a)) if a.size else 0.0
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    if np.max(np.abs(a - a.T), initial=0.0) > 1e-10 * max(scale, 1.0):
        raise ValueError("matrix is not symmetric")

    jitter = 0.0
    pivot = 0
    while True:
        shifted = a + jitter * np.eye(n) if jitter else a
        lower, info = lapack.dpotrf(shifted, lower=1, clean=1)
        if info == 0:
            return SpdFactor(lower=lower, jitter_used=jitter)
        if info < 0:
            raise NumericalError(f"dpotrf rejected argument {-info}")
        pivot = info - 1
        jitter = 1e-12 if jitter == 0.0 else jitter * 10.0
        if jitter > max_jitter * (1 + 1e-9):
            raise NotSpdError(pivot, max_jitter)


def logdet_spd(f: SpdFactor) -> float:
    return 2.0 * float(np.sum(np.log(np.diag(f.lower))))


def sym_eigen(m, max_sweeps: int = 50, tol: float = 1e-15) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of symmetric matrices by cyclic Jacobi rotations.

    Accepts a single ``(n, n)`` matrix or a stack ``(batch, n, n)``; a stack is
    rotated in lock-step, each matrix with its own angles. Returns eigenvalues in
    descending order and the matching orthonormal eigenvectors as columns.
    """
    a = np.array(m, dtype=np.float64, copy=True)
    single = a.ndim == 2
    if single:
        a = a[None]
    if a.ndim != 3 or a.shape[1] != a.shape[2]:
        raise ValueError(f"sym_eigen needs square matrices, got {np.shape(m)}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    batch, n, _ = a.shape
    a = 0.5 * (a + np.swapaxes(a, 1, 2))
    v = np.broadcast_to(np.eye(n), (batch, n, n)).copy()

    with np.errstate(over="ignore"):
        _jacobi_sweeps(a, v, tol, max_sweeps)
    w = np.diagonal(a, axis1=1, axis2=2)
    order = np.argsort(-w, axis=1, kind="stable")
    w = np.take_along_axis(w, order, axis=1)
    v = np.take_along_axis(v, order[:, None, :], axis=2)
    if single:
        return w[0], v[0]
    return w, v


def _jacobi_sweeps(a: np.ndarray, v: np.ndarray, tol: float, max_sweeps: int) -> None:
    # Rotate while |a_pq| > tol * sqrt(|a_pp a_qq|): the relative criterion
    # keeps small eigenvalues of (scaled) positive definite matrices accurate.
    n = a.shape[1]
    for _ in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[:, p, q]
                app = a[:, p, p]
                aqq = a[:, q, q]
                active = np.abs(apq) > np.maximum(tol * np.sqrt(np.abs(app * aqq)), 1e-300)
                if not active.any():
                    continue
                rotated = True
                safe = np.where(active, apq, 1.0)
                tau = (aqq - app) / (2.0 * safe)
                t = np.where(tau >= 0, 1.0, -1.0) / (np.abs(tau) + np.sqrt(1.0 + tau * tau))
                t = np.where(active, t, 0.0)
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                cc = c[:, None]
                ss = s[:, None]

                col_p = a[:, :, p].copy()
                col_q = a[:, :, q]
                a[:, :, p] = cc * col_p - ss * col_q
                a[:, :, q] = ss * col_p + cc * col_q
                row_p = a[:, p, :].copy()
                row_q = a[:, q, :]
                a[:, p, :] = cc * row_p - ss * row_q
                a[:, q, :] = ss * row_p + cc * row_q
                a[:, p, q] = np.where(active, 0.0, a[:, p, q])
                a[:, q, p] = a[:, p, q]

                vp = v[:, :, p].copy()
                vq = v[:, :, q]
                v[:, :, p] = cc * vp - ss * vq
                v[:, :, q] = ss * vp + cc * vq
        if not rotated:
            return
    raise NumericalError(f"Jacobi eigensolver did not converge in {max_sweeps} sweeps")


def pinv(m, rcond: float = 1e-12) -> tuple[np.ndarray, int]:
    """Moore-Penrose pseudo-inverse and effective rank.

    Works from the eigen-decomposition of the smaller Gram matrix; singular
    values at or below ``rcond * sigma_max`` are dropped.
    """
    a = _as_matrix(m)
    rows, cols = a.shape
    if a.size == 0:
        return np.zeros((cols, rows)), 0
    tall = cols <= rows
    gram = a.T @ a if tall else a @ a.T
    w, v = sym_eigen(gram)
    sigma = np.sqrt(np.clip(w, 0.0, None))
    keep = sigma > rcond * sigma[0] if sigma[0] > 0 else np.zeros_like(sigma, dtype=bool)
    rank = int(np.count_nonzero(keep))
    vk = v[:, keep]
    inv_w = 1.0 / (sigma[keep] ** 2)
    if tall:
        # A+ = V S^-2 V^T A^T
        return (vk * inv_w) @ vk.T @ a.T, rank
    # A+ = A^T U S^-2 U^T
    return a.T @ (vk * inv_w) @ vk.T, rank
