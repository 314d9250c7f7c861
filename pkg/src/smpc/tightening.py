"""Chance-constraint tightening and terminal ingredients.

A half-space ``H_j x <= h_j`` holds with the required probability for every
state within ``psi * sqrt(H_j Sigma H_j')`` of a nominal point satisfying
the tightened row.  ``psi`` comes either from the Gaussian quantile with a
union bound over rows, or from the one-sided Chebyshev-type bound that only
uses the covariance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from smpc.linalg import as_symmetric, cholesky, solve_dare, sym_eig
from smpc.model import NOISE_MODES, CovarianceSequence, LtiSystem, NoiseModel, Polytope, noise_factor
from smpc.qp import check_feasible


class TighteningError(ValueError):
    """A tightened set no longer contains the origin in its interior."""


class TerminalSetEmptyError(ValueError):
    pass


# ----------------------------------------------------------------------
# inverse normal CDF

# rational approximation coefficients (Acklam), relative error ~1e-9
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425


def normal_cdf(z: float) -> float:
    return 0.5 * math.erfc(-z / math.sqrt(2.0))


def _acklam(p: float) -> float:
    if p < _P_LOW:
        q = math.sqrt(-2.0 * math.log(p))
        return (((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
            ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0)
    if p > 1.0 - _P_LOW:
        return -_acklam(1.0 - p)
    q = p - 0.5
    r = q * q
    return (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q / \
        (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0)


def inverse_normal_cdf(p: float) -> float:
    """Standard normal quantile.

    Rational initial guess followed by Halley steps on ``Phi(z) - p``, with
    ``Phi`` evaluated through ``erfc``.  Odd symmetry is enforced exactly.
    """
    p = float(p)
    if not 0.0 < p < 1.0:
        raise ValueError(f"probability must lie in (0, 1), got {p}")
    if p == 0.5:
        return 0.0
    if p > 0.5:
        # refine in the lower tail, where erfc keeps full relative accuracy
        return -inverse_normal_cdf(1.0 - p) if 1.0 - p != p else 0.0
    z = _acklam(p)
    for _ in range(3):
        err = normal_cdf(z) - p
        dens = math.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)
        if dens == 0.0:
            break
        u = err / dens
        z = z - u / (1.0 + 0.5 * z * u)
    return z


def tightening_factor(mode: str, delta: float, n_c: int) -> float:
    """Scalar back-off ``psi`` shared by all ``n_c`` rows at risk level ``delta``."""
    if mode not in NOISE_MODES:
        raise ValueError(f"unknown noise mode {mode!r}")
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    if n_c < 1:
        raise ValueError(f"need at least one constraint row, got {n_c}")
    if mode == "exact_gaussian":
        if delta / n_c > 0.5:
            raise ValueError(f"delta/n_c = {delta / n_c:.3f} exceeds 1/2; the Gaussian factor would be negative")
        return max(inverse_normal_cdf(1.0 - delta / n_c), 0.0)
    return math.sqrt((n_c - delta) / delta)


# ----------------------------------------------------------------------
# tightened sets

def row_std(H: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """``sqrt(H_j Sigma H_j')`` for every row ``j``."""
    var = np.einsum("ij,jk,ik->i", H, sigma, H)
    return np.sqrt(np.clip(var, 0.0, None))


def tighten(X: Polytope, sigma_i, psi: float) -> Polytope:
    """Back off each row of ``X`` by ``psi`` standard deviations.

    The result may exclude the origin; check ``origin_in_interior``.
    """
    sigma_i = as_symmetric(sigma_i, "sigma_i")
    if sigma_i.shape != (X.dim, X.dim):
        raise ValueError(f"dimension mismatch: covariance {sigma_i.shape}, polytope dimension {X.dim}")
    if psi < 0:
        raise ValueError("psi must be nonnegative")
    return Polytope(X.H, X.h - psi * row_std(X.H, sigma_i))


@dataclass(frozen=True)
class TightenedSequence:
    """Tightened state sets ``Z_0 .. Z_{N-1}`` plus the ``N``-step box used for the terminal set."""

    sets: tuple[Polytope, ...]
    psi: float
    delta: float
    terminal_box: Optional[Polytope] = None

    @property
    def horizon(self) -> int:
        return len(self.sets)

    def offsets(self) -> np.ndarray:
        """Offsets stacked as an (N, n_c) array."""
        return np.array([Z.h for Z in self.sets])


def build_tightened_sequence(
    X: Polytope,
    covseq: CovarianceSequence,
    delta: float,
    mode: str = "exact_gaussian",
    N: Optional[int] = None,
) -> TightenedSequence:
    """Tighten ``X`` with each of ``Sigma_0 .. Sigma_{N-1}``.

    ``N`` defaults to the covariance horizon; when ``Sigma_N`` is available
    the ``N``-step box is attached as ``terminal_box``.  Raises
    :class:`TighteningError` if any set loses the origin.
    """
    N = covseq.horizon if N is None else int(N)
    if N < 1 or len(covseq) < N:
        raise ValueError(f"covariance sequence of length {len(covseq)} cannot serve horizon {N}")
    psi = tightening_factor(mode, delta, X.n_constraints)
    sets = tuple(tighten(X, covseq[i], psi) for i in range(N))
    terminal = tighten(X, covseq[N], psi) if len(covseq) > N else None
    for i, Z in enumerate(sets + ((terminal,) if terminal is not None else ())):
        if not Z.origin_in_interior:
            j = int(np.argmin(Z.h))
            raise TighteningError(f"origin excluded: tightened offset of row {j} at step {i} is {Z.h[j]:.6g}")
    return TightenedSequence(sets, psi, float(delta), terminal)


def first_empty_step(
    X: Polytope,
    covseq: CovarianceSequence,
    delta: float,
    mode: str = "exact_gaussian",
    N: Optional[int] = None,
) -> Optional[int]:
    """First step ``i <= N`` whose tightened set is provably empty, else ``None``.

    Any such step empties the MPC feasible set.  Undecided LP verdicts
    count as nonempty.
    """
    N = covseq.horizon if N is None else int(N)
    psi = tightening_factor(mode, delta, X.n_constraints)
    for i in range(min(N + 1, len(covseq))):
        Z = tighten(X, covseq[i], psi)
        if check_feasible(Z.H, Z.h) is False:
            return i
    return None


# ----------------------------------------------------------------------
# terminal ingredients

@dataclass(frozen=True)
class TerminalIngredients:
    """Terminal cost ``Qf``, controller ``u = -Kf z`` and set ``{z' Qf z <= alpha}``."""

    Qf: np.ndarray
    Kf: np.ndarray
    alpha: float

    def __post_init__(self):
        if not self.alpha > 0:
            raise TerminalSetEmptyError(f"terminal set empty: alpha = {self.alpha}")


def support_ellipsoid(Qf, alpha: float, G) -> np.ndarray:
    """``max g'z`` over ``z' Qf z <= alpha`` for each row ``g`` of ``G``."""
    G = np.atleast_2d(np.asarray(G, dtype=float))
    Qinv = np.linalg.inv(np.asarray(Qf, dtype=float))
    quad = np.einsum("ij,jk,ik->i", G, Qinv, G)
    return np.sqrt(alpha * np.clip(quad, 0.0, None))


def _level_constraints(Kf, Z_terminal_box: Optional[Polytope], U: Optional[Polytope]):
    rows, offs = [], []
    if Z_terminal_box is not None:
        rows.append(Z_terminal_box.H)
        offs.append(Z_terminal_box.h)
    if U is not None:
        rows.append(-U.H @ np.asarray(Kf, dtype=float))
        offs.append(U.h)
    return np.vstack(rows), np.concatenate(offs)


def terminal_level(Qf, Kf, Z_terminal_box: Optional[Polytope], U: Optional[Polytope]) -> float:
    """Largest ``alpha`` whose ellipsoid satisfies every state and mapped input row.

    Each half-space ``g'z <= c`` admits ``alpha <= c^2 / (g' Qf^-1 g)``.
    """
    Qf = as_symmetric(Qf, "Qf")
    cholesky(Qf)
    G, c = _level_constraints(Kf, Z_terminal_box, U)
    if np.any(c <= 0):
        raise TerminalSetEmptyError(f"terminal set empty: constraint offset {c.min():.6g} <= 0")
    Qinv = np.linalg.inv(Qf)
    quad = np.einsum("ij,jk,ik->i", G, Qinv, G)
    keep = quad > 0
    if not np.any(keep):
        return math.inf
    return float(np.min(c[keep] ** 2 / quad[keep]))


def synthesize_terminal(sys: LtiSystem, Q, R, Z_terminal_box: Polytope, U: Polytope) -> TerminalIngredients:
    """LQR terminal cost and gain with the maximal admissible level."""
    Qf, Kf = solve_dare(sys.A, sys.B, Q, R)
    return TerminalIngredients(Qf, Kf, terminal_level(Qf, Kf, Z_terminal_box, U))


def whitening(Qf) -> np.ndarray:
    """Lower-triangular ``L`` with ``Qf = L L'``; ``v = L' z`` maps the ellipsoid to a ball."""
    return cholesky(Qf)


def ellipsoid_boundary(Qf, level: float, n_samples: int, seed: int = 0) -> np.ndarray:
    """Points with ``z' Qf z = level``.

    In 2-D the angles are equally spaced in whitened coordinates; otherwise
    directions are drawn uniformly on the sphere from a seeded stream.
    """
    L = whitening(Qf)
    n = L.shape[0]
    if n == 2:
        th = 2.0 * np.pi * np.arange(n_samples) / n_samples
        V = np.column_stack([np.cos(th), np.sin(th)])
    else:
        V = np.random.default_rng(seed).standard_normal((n_samples, n))
        V /= np.linalg.norm(V, axis=1, keepdims=True)
    return np.linalg.solve(L.T, V.T).T * math.sqrt(level)


def inscribed_polytope(Qf, alpha: float, facets: int = 16) -> tuple[Polytope, np.ndarray]:
    """Polytope inside ``{z' Qf z <= alpha}`` and its vertices.

    In 2-D: the regular ``facets``-gon inscribed in the whitened unit circle
    (tangent lines shrunk by ``cos(pi/facets)``), so every vertex lies on the
    ellipse.  In other dimensions: the whitened cube of half-width
    ``1/sqrt(n)``, whose corners lie on the sphere.
    """
    L = whitening(Qf)
    n = L.shape[0]
    ra = math.sqrt(alpha)
    if n == 2:
        if facets < 3:
            raise ValueError("need at least 3 facets")
        th = 2.0 * np.pi * np.arange(facets) / facets
        normals = np.column_stack([np.cos(th), np.sin(th)])
        offs = np.full(facets, math.cos(math.pi / facets))
        vth = th + math.pi / facets
        Vw = np.column_stack([np.cos(vth), np.sin(vth)])
    else:
        normals = np.vstack([np.eye(n), -np.eye(n)])
        offs = np.full(2 * n, 1.0 / math.sqrt(n))
        corners = np.array(np.meshgrid(*([[-1.0, 1.0]] * n), indexing="ij")).reshape(n, -1).T
        Vw = corners / math.sqrt(n)
    H = normals @ L.T
    verts = np.linalg.solve(L.T, Vw.T).T * ra
    return Polytope(H, offs * ra), verts


@dataclass(frozen=True)
class TerminalReport:
    input_admissible: bool
    invariant: bool
    lyapunov_decrease: bool
    lmi_residual: float
    state_admissible: Optional[bool] = None

    @property
    def ok(self) -> bool:
        return self.input_admissible and self.invariant and self.lyapunov_decrease and self.state_admissible is not False


def validate_terminal(
    ingredients: TerminalIngredients,
    sys: LtiSystem,
    Q,
    R,
    U: Polytope,
    Z_terminal_box: Optional[Polytope] = None,
    n_samples: int = 360,
    tol: float = 1e-8,
) -> TerminalReport:
    """Check admissibility, invariance and the local Lyapunov inequality.

    Admissibility uses the exact support function and is confirmed on
    boundary samples.  Invariance of the sublevel set follows from the matrix
    inequality and is also checked directly on the samples.
    """
    Qf = as_symmetric(ingredients.Qf, "Qf")
    Kf = np.asarray(ingredients.Kf, dtype=float)
    alpha = ingredients.alpha
    Q = as_symmetric(Q, "Q")
    R = as_symmetric(R, "R")
    Acl = sys.A - sys.B @ Kf
    M = Acl.T @ Qf @ Acl - Qf + Q + Kf.T @ R @ Kf
    resid = float(sym_eig(0.5 * (M + M.T))[0][-1])
    lyap = resid <= tol

    pts = ellipsoid_boundary(Qf, alpha, n_samples)
    Gu = -U.H @ Kf
    slack = tol * max(1.0, np.abs(U.h).max())
    inputs_ok = bool(np.all(support_ellipsoid(Qf, alpha, Gu) <= U.h + slack))
    inputs_ok &= bool(np.all(pts @ Gu.T <= U.h + slack))

    nxt = pts @ Acl.T
    decay = sym_eig(Acl.T @ Qf @ Acl - Qf)[0][-1] <= tol
    invariant = bool(decay and np.all(np.einsum("ij,jk,ik->i", nxt, Qf, nxt) <= alpha * (1 + tol)))

    state_ok = None
    if Z_terminal_box is not None:
        sl = tol * max(1.0, np.abs(Z_terminal_box.h).max())
        state_ok = bool(np.all(support_ellipsoid(Qf, alpha, Z_terminal_box.H) <= Z_terminal_box.h + sl))
        state_ok &= bool(np.all(pts @ Z_terminal_box.H.T <= Z_terminal_box.h + sl))
    return TerminalReport(inputs_ok, invariant, lyap, resid, state_ok)


def empirical_prs_check(
    noise: NoiseModel,
    sys: LtiSystem,
    i: int,
    psi: float,
    X: Polytope,
    trials: int = 10_000,
    seed: int = 0,
) -> float:
    """Fraction of simulated errors ``e_i`` (from ``e_0 = 0``) inside every backed-off row.

    Samples are Gaussian with covariance ``sigma_w`` regardless of ``noise.mode``.
    """
    if trials < 10_000:
        raise ValueError(f"need at least 1e4 trials, got {trials}")
    if i < 0:
        raise ValueError("step index must be nonnegative")
    rng = np.random.default_rng(seed)
    L = noise_factor(noise.sigma_w)
    A = sys.A
    e = np.zeros((trials, sys.nx))
    sigma = np.zeros((sys.nx, sys.nx))
    for _ in range(i):
        e = e @ A.T + rng.standard_normal((trials, sys.nx)) @ L.T
        sigma = A @ sigma @ A.T + noise.sigma_w
    bound = psi * row_std(X.H, sigma)
    inside = np.all(e @ X.H.T <= bound, axis=1)
    return float(inside.mean())
