"""Dense symmetric linear algebra for synthesis and certification.

Dimensions in this package are tiny (a handful of states), so the routines
here favour robustness and exact contracts over speed.
"""

from __future__ import annotations

import numpy as np

SYMMETRY_TOL = 1e-12
PSD_SLACK = 1e-10


class NotPositiveDefiniteError(ValueError):
    """Raised by :func:`cholesky` when a pivot is not strictly positive."""

    def __init__(self, pivot: int, value: float):
        super().__init__(f"not positive definite: pivot {pivot} equals {value:.3e}")
        self.pivot = pivot
        self.value = value


class NotPsdError(ValueError):
    pass


class UnstableMatrixError(ValueError):
    pass


class DareDivergenceError(RuntimeError):
    pass


def as_matrix(M, name: str = "matrix") -> np.ndarray:
    """Return ``M`` as a finite 2-D float array."""
    arr = np.array(M, dtype=float, ndmin=2)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be two-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} has non-finite entries")
    return arr


def as_symmetric(S, name: str = "matrix") -> np.ndarray:
    arr = as_matrix(S, name)
    if arr.shape[0] != arr.shape[1]:
        raise ValueError(f"{name} must be square, got shape {arr.shape}")
    gap = np.abs(arr - arr.T)
    if np.any(gap > SYMMETRY_TOL * (1.0 + np.abs(arr))):
        raise ValueError(f"{name} is not symmetric (max asymmetry {gap.max():.3e})")
    return 0.5 * (arr + arr.T)


def sym_eig(S, max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns
    -------
    eigenvalues : ndarray, shape (n,)
        Sorted ascending.
    eigenvectors : ndarray, shape (n, n)
        Orthonormal columns, ``S @ V = V @ diag(eigenvalues)``.
    """
    a = as_symmetric(S).copy()
    n = a.shape[0]
    v = np.eye(n)
    scale = max(np.abs(a).max(), np.finfo(float).tiny)
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.tril(a, -1) ** 2))
        if off <= 1e-15 * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0)) if theta != 0 else 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                # a <- J^T a J with the rotation acting on rows/columns p, q
                ap = a[:, p].copy()
                aq = a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                ap = a[p, :].copy()
                aq = a[q, :].copy()
                a[p, :] = c * ap - s * aq
                a[q, :] = s * ap + c * aq
                a[p, q] = a[q, p] = 0.0
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    w = np.diag(a).copy()
    order = np.argsort(w, kind="stable")
    return w[order], v[:, order]


def cholesky(S) -> np.ndarray:
    """Lower-triangular ``L`` with ``L @ L.T == S``.

    Raises :class:`NotPositiveDefiniteError` naming the first pivot that is
    not strictly positive.
    """
    a = as_symmetric(S)
    n = a.shape[0]
    L = np.zeros_like(a)
    tiny = np.finfo(float).eps * max(1.0, np.abs(np.diag(a)).max(initial=0.0))
    for j in range(n):
        d = a[j, j] - L[j, :j] @ L[j, :j]
        if not d > tiny:
            raise NotPositiveDefiniteError(j, float(d))
        L[j, j] = np.sqrt(d)
        if j + 1 < n:
            L[j + 1:, j] = (a[j + 1:, j] - L[j + 1:, :j] @ L[j, :j]) / L[j, j]
    return L


def sqrt_psd(S) -> np.ndarray:
    """Symmetric PSD square root; eigenvalues in [-1e-10, 0) clamp to zero."""
    w, v = sym_eig(S)
    if w.size and w[0] < -PSD_SLACK:
        raise NotPsdError(f"not PSD: minimum eigenvalue {w[0]:.3e}")
    root = (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T
    return 0.5 * (root + root.T)


def spectral_radius(A) -> float:
    A = as_matrix(A, "A")
    if A.shape[0] != A.shape[1]:
        raise ValueError(f"spectral radius needs a square matrix, got shape {A.shape}")
    return float(np.max(np.abs(np.linalg.eigvals(A))))


def solve_dlyap(A, Q, tol: float = 1e-12, max_iter: int = 100_000) -> np.ndarray:
    """Solve ``A.T @ P @ A - P + Q = 0`` for stable ``A``.

    Uses the doubling form of the fixed-point iteration
    ``P <- Q + A.T @ P @ A``: after ``k`` passes the partial sum covers
    ``2**k`` terms of ``sum_i (A.T)**i Q A**i``.
    The stationary covariance of ``x+ = A x + w`` is ``solve_dlyap(A.T, Sigma_w)``.
    """
    A = as_matrix(A, "A")
    Q = as_symmetric(Q, "Q")
    if A.shape != Q.shape:
        raise ValueError(f"shape mismatch: A {A.shape}, Q {Q.shape}")
    if spectral_radius(A) >= 1.0:
        raise UnstableMatrixError(f"unstable A: spectral radius {spectral_radius(A):.6f} >= 1")
    P = Q.copy()
    Ak = A.copy()
    for _ in range(max_iter):
        step = Ak.T @ P @ Ak
        P = P + step
        Ak = Ak @ Ak
        if np.abs(step).max() <= tol * max(1.0, np.abs(P).max()):
            break
    else:
        raise UnstableMatrixError("Lyapunov iteration did not converge")
    # one plain fixed-point pass removes the doubling round-off
    P = Q + A.T @ P @ A
    return 0.5 * (P + P.T)


def solve_dare(A, B, Q, R, tol: float = 1e-12, max_iter: int = 100_000) -> tuple[np.ndarray, np.ndarray]:
    """Stabilizing solution of the discrete algebraic Riccati equation.

    Iterates ``P <- Q + A'PA - A'PB (R + B'PB)^-1 B'PA`` from ``P = Q`` until
    the relative change drops below ``tol``.

    Returns
    -------
    P_f : ndarray
        Riccati fixed point (infinite-horizon LQR cost matrix).
    K_f : ndarray
        Gain of ``u = -K_f x``, ``K_f = (R + B'P_fB)^-1 B'P_fA``.
    """
    A = as_matrix(A, "A")
    B = as_matrix(B, "B")
    Q = as_symmetric(Q, "Q")
    R = as_symmetric(R, "R")
    n, m = B.shape
    if A.shape != (n, n) or Q.shape != (n, n) or R.shape != (m, m):
        raise ValueError("inconsistent DARE dimensions")
    cholesky(R)
    P = Q.copy()
    for _ in range(max_iter):
        BtP = B.T @ P
        K = np.linalg.solve(R + BtP @ B, BtP @ A)
        P_next = Q + A.T @ P @ (A - B @ K)
        P_next = 0.5 * (P_next + P_next.T)
        if not np.all(np.isfinite(P_next)):
            raise DareDivergenceError("DARE divergence: iterate became non-finite")
        change = np.abs(P_next - P).max()
        P = P_next
        if change <= tol * max(1.0, np.abs(P).max()):
            break
    else:
        raise DareDivergenceError(f"DARE divergence: no convergence within {max_iter} iterations")
    BtP = B.T @ P
    K = np.linalg.solve(R + BtP @ B, BtP @ A)
    if spectral_radius(A - B @ K) >= 1.0:
        raise DareDivergenceError("DARE divergence: fixed point is not stabilizing")
    return P, K


def dare_residual(A, B, Q, R, P) -> float:
    """Max-abs residual of the Riccati identity at ``P``."""
    A, B, P = as_matrix(A), as_matrix(B), as_matrix(P)
    BtP = B.T @ P
    rhs = Q + A.T @ P @ A - A.T @ P @ B @ np.linalg.solve(R + BtP @ B, BtP @ A)
    return float(np.abs(rhs - P).max())
