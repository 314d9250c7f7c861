"""Stability-in-probability certificates and their empirical checks.

For the open-loop-stable plant, ``V(x) = x'Px`` with ``A'PA - P < 0`` gives
the exact one-step expectation

    E[V(x+) - V(x) | x] = -x'(P - A'PA)x + Tr(P Sigma_w),

which is bounded by ``-kappa V(x) + rho`` with ``kappa = lmin(P - A'PA) /
lmax(P)`` and ``rho = Tr(P Sigma_w)``.  The sublevel set ``{V <= gamma}``
with ``gamma > rho / kappa`` must lie inside the MPC feasible set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from smpc.linalg import as_matrix, as_symmetric, solve_dlyap, spectral_radius, sym_eig
from smpc.mpc import MpcProblemData, solve_mpc
from smpc.policy import Verdict
from smpc.tightening import ellipsoid_boundary


class CertificationError(ValueError):
    pass


# ----------------------------------------------------------------------
# autonomous Lyapunov quantities

def autonomous_lyapunov(A, Q_lyap) -> np.ndarray:
    """``P`` solving ``A'PA - P = -Q_lyap``, checked to satisfy ``A'PA - P < 0``."""
    A = as_matrix(A, "A")
    P = solve_dlyap(A, Q_lyap)
    if sym_eig(A.T @ P @ A - P)[0][-1] >= 0:
        raise CertificationError("A'PA - P is not negative definite")
    return P


def lyapunov_decrease_matrix(P, A) -> np.ndarray:
    """``P - A'PA``, symmetrized."""
    P = as_symmetric(P, "P")
    A = as_matrix(A, "A")
    M = P - A.T @ P @ A
    return 0.5 * (M + M.T)


def kappa_coefficient(P, A) -> float:
    """``lmin(P - A'PA) / lmax(P)``."""
    P = as_symmetric(P, "P")
    wp = sym_eig(P)[0]
    if wp[0] <= 0:
        raise CertificationError("P is not positive definite")
    wd = sym_eig(lyapunov_decrease_matrix(P, A))[0]
    if wd[0] <= 0:
        raise CertificationError("A'PA - P is not negative definite")
    return float(wd[0] / wp[-1])


def rho_offset(P, sigma_w) -> float:
    return float(np.trace(as_symmetric(P, "P") @ as_symmetric(sigma_w, "sigma_w")))


def expected_decrease_autonomous(P, A, sigma_w, x) -> float:
    """Exact ``E[V(Ax + w) - V(x)]`` for zero-mean ``w`` with covariance ``sigma_w``."""
    x = np.asarray(x, dtype=float).reshape(-1)
    return float(-x @ lyapunov_decrease_matrix(P, A) @ x + rho_offset(P, sigma_w))


def gamma_threshold(P, A, sigma_w) -> float:
    """Smallest admissible sublevel, ``rho / kappa``."""
    return rho_offset(P, sigma_w) / kappa_coefficient(P, A)


@dataclass(frozen=True)
class SublevelCheck:
    inside: bool
    n_samples: int
    witness: Optional[np.ndarray] = None
    witness_verdict: Optional[str] = None


def check_sublevel_in_x0(data: MpcProblemData, P, gamma: float, n_samples: int = 720, seed: int = 0) -> SublevelCheck:
    """Sample the boundary of ``{x'Px <= gamma}`` and test feasibility.

    Both sets are convex, so a boundary pass is a pass up to sampling
    density; a failure comes with an exact witness.
    """
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    pts = ellipsoid_boundary(P, gamma, n_samples, seed)
    warm: Sequence[int] = ()
    for x in pts:
        sol = solve_mpc(data, x, warm)
        if sol.status != "optimal":
            verdict = Verdict.OUTSIDE if sol.status == "infeasible" else Verdict.INDETERMINATE
            return SublevelCheck(False, n_samples, x, verdict.value)
        warm = sol.active_set
    return SublevelCheck(True, n_samples)


def mpc_noise_offset(Q, A, sigma_w, N: int) -> float:
    """``sum_{i<N} Tr(A^i' Q A^i Sigma_w)``."""
    if N < 1:
        raise ValueError("N must be at least 1")
    Q = as_symmetric(Q, "Q")
    A = as_matrix(A, "A")
    S = as_symmetric(sigma_w, "sigma_w")
    total = 0.0
    Ai = np.eye(A.shape[0])
    for _ in range(N):
        total += float(np.trace(Ai.T @ Q @ Ai @ S))
        Ai = A @ Ai
    return total


# ----------------------------------------------------------------------
# recurrence

def _flags_of(traj) -> Sequence:
    flags = getattr(traj, "feasible_flags", traj)
    if flags is None:
        raise ValueError("trajectory carries no feasibility flags")
    return flags


def _is_inside(flag) -> bool:
    if isinstance(flag, (bool, np.bool_)):
        return bool(flag)
    return str(getattr(flag, "value", flag)) == Verdict.INSIDE.value


@dataclass(frozen=True)
class RecurrenceStats:
    """Excursions outside the feasible set.

    An excursion starts at the first step outside; its hitting time is the
    number of steps until the state is back inside.  Indeterminate verdicts
    count as outside.
    """

    excursions: int
    hitting_times: tuple[int, ...]
    unreturned: int
    inside_steps: int
    outside_steps: int
    histogram: dict = field(default_factory=dict)

    @property
    def max_hitting_time(self) -> int:
        return max(self.hitting_times, default=0)

    @property
    def all_returned(self) -> bool:
        return self.unreturned == 0


def recurrence_stats(trajectories: Iterable) -> RecurrenceStats:
    """Excursion statistics over records (or raw flag sequences)."""
    times: list[int] = []
    unreturned = inside = outside = 0
    for traj in trajectories:
        flags = [_is_inside(f) for f in _flags_of(traj)]
        k, n = 0, len(flags)
        while k < n:
            if flags[k]:
                inside += 1
                k += 1
                continue
            j = k
            while j < n and not flags[j]:
                j += 1
            outside += j - k
            if j == n:
                unreturned += 1
            else:
                times.append(j - k)
            k = j
    hist: dict[int, int] = {}
    for t in sorted(times):
        hist[t] = hist.get(t, 0) + 1
    return RecurrenceStats(len(times) + unreturned, tuple(times), unreturned, inside, outside, hist)


# ----------------------------------------------------------------------
# empirical stability in probability

@dataclass(frozen=True)
class IsspBound:
    """``|x_i| <= C |x_0| lam^i + rho`` for ``i <= M``."""

    C: float
    lam: float
    rho: float

    def beta(self, s, i) -> np.ndarray:
        return self.C * np.asarray(s) * self.lam ** np.asarray(i)


@dataclass(frozen=True)
class IsspCheckResult:
    passed: bool
    fraction: float
    n_runs: int


def _states_of(traj) -> np.ndarray:
    return np.asarray(getattr(traj, "states", traj), dtype=float)


def required_offsets(trajectories: Iterable, C: float, lam: float, M: int) -> np.ndarray:
    """Per run, the smallest constant making the bound hold for ``i <= M``."""
    out = []
    for traj in trajectories:
        X = _states_of(traj)[: M + 1]
        norms = np.linalg.norm(X, axis=1)
        i = np.arange(norms.size)
        out.append(float(np.max(norms - C * norms[0] * lam ** i)))
    return np.array(out)


def issp_empirical_check(trajectories, eps: float, M: int, beta_params: tuple[float, float], rho_value: float) -> IsspCheckResult:
    """Fraction of runs within ``beta(|x_0|, i) + rho`` for all ``i <= M``; passes at ``>= 1 - eps``."""
    C, lam = beta_params
    if C < 1 or not 0 < lam < 1:
        raise ValueError("need C >= 1 and lam in (0, 1)")
    if rho_value < 0:
        raise ValueError("rho must be nonnegative")
    req = required_offsets(trajectories, C, lam, M)
    if req.size == 0:
        raise ValueError("empty ensemble")
    frac = float(np.mean(req <= rho_value))
    return IsspCheckResult(frac >= 1.0 - eps, frac, int(req.size))


def decay_envelope(A, M: int) -> tuple[float, float]:
    """``lam = (1 + spectral radius) / 2`` and ``C = max_i |A^i| / lam^i`` over ``i <= M``."""
    A = as_matrix(A, "A")
    r = spectral_radius(A)
    if r >= 1:
        raise CertificationError(f"unstable A: spectral radius {r:.6f}")
    lam = 0.5 * (1.0 + r)
    C, Ai = 1.0, np.eye(A.shape[0])
    for i in range(1, M + 1):
        Ai = A @ Ai
        C = max(C, float(np.linalg.norm(Ai, 2)) / lam ** i)
    return C, lam


def calibrate_issp_bound(calibration, A, eps: float, M: int) -> IsspBound:
    """Fit ``beta`` from ``A`` and the offset from a calibration ensemble.

    The offset is the split-conformal quantile of the per-run required
    offsets at level ``1 - eps/2``, which leaves headroom for an
    independent evaluation ensemble.
    """
    C, lam = decay_envelope(A, M)
    req = np.sort(required_offsets(calibration, C, lam, M))
    n = req.size
    if n == 0:
        raise ValueError("empty calibration ensemble")
    rank = min(math.ceil((n + 1) * (1.0 - eps / 2.0)), n)
    return IsspBound(C, lam, max(float(req[rank - 1]), 0.0))


# ----------------------------------------------------------------------
# certificate

@dataclass(frozen=True)
class IsspCertificate:
    P: np.ndarray
    kappa_coeff: float
    rho: float
    gamma_min: float
    gamma: float
    sublevel_in_x0: bool
    mpc_offset: float
    stable: bool = True
    witness: Optional[np.ndarray] = None
    sublevel_samples: int = 0

    @property
    def certified(self) -> bool:
        return self.stable and self.sublevel_in_x0 and self.gamma > self.gamma_min

    def as_dict(self) -> dict:
        d = {
            "P": np.asarray(self.P).tolist(),
            "kappa_coeff": self.kappa_coeff,
            "rho": self.rho,
            "gamma_min": self.gamma_min,
            "gamma": self.gamma,
            "sublevel_in_x0": self.sublevel_in_x0,
            "sublevel_samples": self.sublevel_samples,
            "mpc_offset": self.mpc_offset,
            "stable": self.stable,
            "certified": self.certified,
        }
        if self.witness is not None:
            d["witness"] = np.asarray(self.witness).tolist()
        return d


@dataclass(frozen=True)
class LyapunovIngredients:
    P: np.ndarray
    kappa_coeff: float
    rho: float
    gamma_min: float


def lyapunov_ingredients(A, sigma_w, P=None, Q_lyap=None) -> LyapunovIngredients:
    """Stability gate and the sublevel threshold, independent of the MPC.

    Give ``P`` directly or ``Q_lyap`` to solve for it (identity by default).
    Raises :class:`CertificationError` when ``A`` is unstable or ``P`` does
    not decrease along it.
    """
    A = as_matrix(A, "A")
    r = spectral_radius(A)
    if r >= 1:
        raise CertificationError(f"unstable A: spectral radius {r:.6f} >= 1")
    if P is None:
        P = autonomous_lyapunov(A, np.eye(A.shape[0]) if Q_lyap is None else Q_lyap)
    P = as_symmetric(P, "P")
    kappa = kappa_coefficient(P, A)
    rho = rho_offset(P, sigma_w)
    return LyapunovIngredients(P, kappa, rho, rho / kappa)


def _gamma(ing: LyapunovIngredients, gamma_factor: float) -> float:
    return gamma_factor * ing.gamma_min if ing.gamma_min > 0 else gamma_factor


def certify(
    data: MpcProblemData,
    P=None,
    Q_lyap=None,
    gamma_factor: float = 1.1,
    n_samples: int = 720,
    seed: int = 0,
) -> IsspCertificate:
    """Assemble the certificate for the combined policy on ``data``.

    Raises :class:`CertificationError` when the plant is not stable.
    """
    A = data.sys.A
    ing = lyapunov_ingredients(A, data.noise.sigma_w, P, Q_lyap)
    gamma = _gamma(ing, gamma_factor)
    chk = check_sublevel_in_x0(data, ing.P, gamma, n_samples, seed)
    phi = mpc_noise_offset(data.cost.Q, A, data.noise.sigma_w, data.N)
    return IsspCertificate(ing.P, ing.kappa_coeff, ing.rho, ing.gamma_min, gamma, chk.inside, phi, True, chk.witness, n_samples)


def certify_empty_feasible_set(A, sigma_w, Q, N: int, P=None, Q_lyap=None, gamma_factor: float = 1.1) -> IsspCertificate:
    """Certificate when the MPC feasible set is known to be empty.

    Every point of the sublevel boundary is then a witness of failure.
    """
    ing = lyapunov_ingredients(A, sigma_w, P, Q_lyap)
    gamma = _gamma(ing, gamma_factor)
    witness = ellipsoid_boundary(ing.P, gamma, 1)[0]
    phi = mpc_noise_offset(Q, A, sigma_w, N)
    return IsspCertificate(ing.P, ing.kappa_coeff, ing.rho, ing.gamma_min, gamma, False, phi, True, witness, 1)
