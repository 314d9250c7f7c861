"""System, noise and constraint definitions with exact stepping."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

from smpc.linalg import NotPositiveDefiniteError, as_matrix, as_symmetric, cholesky, sqrt_psd, sym_eig

NoiseMode = Literal["exact_gaussian", "moment_ambiguity"]
NOISE_MODES = ("exact_gaussian", "moment_ambiguity")


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=float)
    arr.setflags(write=False)
    return arr


def _vec(v, size: int, name: str) -> np.ndarray:
    arr = np.asarray(v, dtype=float).reshape(-1)
    if arr.size != size:
        raise ValueError(f"dimension mismatch: {name} has size {arr.size}, expected {size}")
    return arr


@dataclass(frozen=True)
class LtiSystem:
    """``x+ = A x + B u + w``; ``Ts`` is the sampling period in seconds (metadata)."""

    A: np.ndarray
    B: np.ndarray
    Ts: float = 1.0

    def __post_init__(self):
        A = as_matrix(self.A, "A")
        B = as_matrix(self.B, "B")
        if A.shape[0] != A.shape[1]:
            raise ValueError(f"A must be square, got {A.shape}")
        if B.shape[0] != A.shape[0]:
            raise ValueError(f"B has {B.shape[0]} rows, A has {A.shape[0]}")
        object.__setattr__(self, "A", _frozen(A))
        object.__setattr__(self, "B", _frozen(B))
        object.__setattr__(self, "Ts", float(self.Ts))

    @property
    def nx(self) -> int:
        return self.A.shape[0]

    @property
    def nu(self) -> int:
        return self.B.shape[1]


@dataclass(frozen=True)
class NoiseModel:
    """Zero-mean additive noise with covariance ``sigma_w``.

    ``mode`` states what is known about the distribution: the exact Gaussian
    law, or only its first two moments.
    """

    sigma_w: np.ndarray
    mode: NoiseMode = "exact_gaussian"

    def __post_init__(self):
        S = as_symmetric(self.sigma_w, "sigma_w")
        if self.mode not in NOISE_MODES:
            raise ValueError(f"unknown noise mode {self.mode!r}; expected one of {NOISE_MODES}")
        if S.size and sym_eig(S)[0][0] < -1e-10:
            raise ValueError("sigma_w is not positive semidefinite")
        object.__setattr__(self, "sigma_w", _frozen(S))

    @property
    def dim(self) -> int:
        return self.sigma_w.shape[0]


@dataclass(frozen=True)
class Polytope:
    """Half-space description ``{x | H x <= h}``."""

    H: np.ndarray
    h: np.ndarray

    def __post_init__(self):
        H = as_matrix(self.H, "H")
        h = np.asarray(self.h, dtype=float).reshape(-1)
        if h.size != H.shape[0]:
            raise ValueError(f"H has {H.shape[0]} rows but h has {h.size} entries")
        if not np.all(np.isfinite(h)):
            raise ValueError("h has non-finite entries")
        if np.any(np.all(H == 0.0, axis=1)):
            raise ValueError("H has an all-zero row")
        object.__setattr__(self, "H", _frozen(H))
        object.__setattr__(self, "h", _frozen(h))

    @classmethod
    def box(cls, lower: Sequence[float], upper: Sequence[float]) -> "Polytope":
        """Axis-aligned box, rows ordered ``x_i <= upper_i`` then ``-x_i <= -lower_i`` per coordinate."""
        lower = np.asarray(lower, dtype=float).reshape(-1)
        upper = np.asarray(upper, dtype=float).reshape(-1)
        if lower.shape != upper.shape:
            raise ValueError("box bounds have different lengths")
        if np.any(lower >= upper):
            raise ValueError("box lower bounds must be strictly below upper bounds")
        n = lower.size
        H = np.zeros((2 * n, n))
        h = np.zeros(2 * n)
        for i in range(n):
            H[2 * i, i], h[2 * i] = 1.0, upper[i]
            H[2 * i + 1, i], h[2 * i + 1] = -1.0, -lower[i]
        return cls(H, h)

    @property
    def dim(self) -> int:
        return self.H.shape[1]

    @property
    def n_constraints(self) -> int:
        return self.H.shape[0]

    def contains(self, x, tol: float = 0.0) -> bool:
        return bool(np.all(self.H @ _vec(x, self.dim, "x") <= self.h + tol))

    def contains_many(self, X: np.ndarray, tol: float = 0.0) -> np.ndarray:
        """Row-wise membership for an array of points with shape (k, n)."""
        return np.all(np.asarray(X) @ self.H.T <= self.h + tol, axis=-1)

    @property
    def origin_in_interior(self) -> bool:
        return bool(np.all(self.h > 0.0))


@dataclass(frozen=True)
class CovarianceSequence:
    """Predicted error covariances ``Sigma_0 = 0, ..., Sigma_N``."""

    sigmas: tuple[np.ndarray, ...]

    def __len__(self) -> int:
        return len(self.sigmas)

    def __getitem__(self, i: int) -> np.ndarray:
        return self.sigmas[i]

    @property
    def horizon(self) -> int:
        return len(self.sigmas) - 1


def step(sys: LtiSystem, x, u, w) -> np.ndarray:
    x = _vec(x, sys.nx, "x")
    u = _vec(u, sys.nu, "u")
    w = _vec(w, sys.nx, "w")
    return sys.A @ x + sys.B @ u + w


def nominal_step(sys: LtiSystem, z, u) -> np.ndarray:
    return sys.A @ _vec(z, sys.nx, "z") + sys.B @ _vec(u, sys.nu, "u")


def error_step(sys: LtiSystem, e, w) -> np.ndarray:
    return sys.A @ _vec(e, sys.nx, "e") + _vec(w, sys.nx, "w")


def propagate_covariance(sys: LtiSystem, noise: NoiseModel, N: int) -> CovarianceSequence:
    """Error covariances under ``Sigma_{i+1} = A Sigma_i A' + Sigma_w`` from zero."""
    if N < 1:
        raise ValueError(f"horizon must be at least 1, got {N}")
    if noise.dim != sys.nx:
        raise ValueError(f"dimension mismatch: sigma_w is {noise.dim}x{noise.dim}, system has {sys.nx} states")
    A = sys.A
    sig = np.zeros((sys.nx, sys.nx))
    out = [_frozen(sig)]
    for _ in range(N):
        sig = A @ sig @ A.T + noise.sigma_w
        sig = 0.5 * (sig + sig.T)
        out.append(_frozen(sig))
    return CovarianceSequence(tuple(out))


def l2_noise_norm(noise: NoiseModel) -> float:
    """``sqrt(E|w|^2)`` for zero-mean noise."""
    return float(np.sqrt(max(np.trace(noise.sigma_w), 0.0)))


def noise_factor(sigma) -> np.ndarray:
    """Matrix ``L`` with ``L L' = sigma``: Cholesky, or the PSD root when singular."""
    try:
        return cholesky(sigma)
    except NotPositiveDefiniteError:
        return sqrt_psd(sigma)
