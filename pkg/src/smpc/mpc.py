"""Condensed stochastic MPC with tightened constraints.

Decision variable: the stacked input sequence ``u = (u_0, ..., u_{N-1})``.
Nominal predictions are ``z = Phi x + Gamma u``.  The expected cost splits
into the nominal cost plus a constant ``c`` collecting the error-covariance
traces, so ``c`` never enters the QP.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal, Optional, Sequence

import numpy as np

from smpc.linalg import as_symmetric, cholesky, solve_dare
from smpc.model import LtiSystem, NoiseModel, Polytope, propagate_covariance, _vec
from smpc.qp import DenseQpSolver, QpSettings, QpSolution
from smpc.tightening import (
    TerminalIngredients,
    TightenedSequence,
    build_tightened_sequence,
    inscribed_polytope,
    terminal_level,
)

MpcStatus = Literal["optimal", "infeasible", "indeterminate"]


class MpcInfeasibleError(RuntimeError):
    """The MPC problem has no admissible input sequence at this state."""


@dataclass(frozen=True)
class CostSpec:
    """Stage weights ``Q``, ``R`` and terminal weight ``Qf``.

    ``Qf`` left as ``None`` is filled in by :func:`assemble` from the
    infinite-horizon LQR solution.
    """

    Q: np.ndarray
    R: np.ndarray
    Qf: Optional[np.ndarray] = None

    def __post_init__(self):
        for name in ("Q", "R", "Qf"):
            val = getattr(self, name)
            if val is None:
                continue
            S = as_symmetric(val, name)
            cholesky(S)
            S.setflags(write=False)
            object.__setattr__(self, name, S)


@dataclass(frozen=True)
class MpcProblemData:
    """Everything precomputed offline for one horizon.

    The QP reads ``min 0.5 u'Pu + (F x)'u  s.t.  G u <= w + E x``.  Row
    blocks of ``G``: state rows for steps ``0..N-1`` (``n_c`` each), terminal
    polytope rows, input rows for steps ``0..N-1``.
    """

    sys: LtiSystem
    cost: CostSpec
    N: int
    X: Polytope
    U: Polytope
    noise: NoiseModel
    tightened: TightenedSequence
    terminal: TerminalIngredients
    terminal_polytope: Polytope
    terminal_vertices: np.ndarray
    Phi: np.ndarray
    Gamma: np.ndarray
    P: np.ndarray
    F: np.ndarray
    Y: np.ndarray
    G: np.ndarray
    w: np.ndarray
    E: np.ndarray
    c: float
    solver: DenseQpSolver = field(repr=False)

    @property
    def n_state_rows(self) -> int:
        return self.X.n_constraints

    def predict(self, x, u_seq) -> np.ndarray:
        """Nominal states ``z_0..z_N`` as an (N+1, nx) array."""
        x = _vec(x, self.sys.nx, "x")
        u = np.asarray(u_seq, dtype=float).reshape(-1)
        return (self.Phi @ x + self.Gamma @ u).reshape(self.N + 1, self.sys.nx)

    def nominal_cost(self, x, u_seq) -> float:
        z = self.predict(x, u_seq)
        u = np.asarray(u_seq, dtype=float).reshape(self.N, self.sys.nu)
        Q, R, Qf = self.cost.Q, self.cost.R, self.cost.Qf
        stage = np.einsum("ij,jk,ik->", z[:-1], Q, z[:-1]) + np.einsum("ij,jk,ik->", u, R, u)
        return float(stage + z[-1] @ Qf @ z[-1])

    def shift_active_set(self, active: Sequence[int]) -> list[int]:
        """Map active rows of the previous solve one step forward in time."""
        nc, nt, nr = self.X.n_constraints, self.terminal_polytope.n_constraints, self.U.n_constraints
        n_state = self.N * nc
        out = []
        for i in active:
            if i < n_state:
                if i >= 2 * nc:
                    out.append(i - nc)
            elif i < n_state + nt:
                out.append(i)
            else:
                j = i - n_state - nt
                if j >= nr:
                    out.append(i - nr)
        return out


@dataclass(frozen=True)
class MpcSolution:
    status: MpcStatus
    u_seq: np.ndarray
    z_seq: np.ndarray
    nominal_value: float
    qp: Optional[QpSolution] = field(default=None, repr=False)

    @property
    def active_set(self) -> tuple[int, ...]:
        return self.qp.active_set if self.qp is not None else ()


def prediction_matrices(sys: LtiSystem, N: int) -> tuple[np.ndarray, np.ndarray]:
    """``Phi`` and ``Gamma`` with stacked ``z_i = A^i x + sum_j A^(i-1-j) B u_j``."""
    nx, nu = sys.nx, sys.nu
    powers = [np.eye(nx)]
    for _ in range(N):
        powers.append(sys.A @ powers[-1])
    Phi = np.vstack(powers)
    Gamma = np.zeros(((N + 1) * nx, N * nu))
    for i in range(1, N + 1):
        for j in range(i):
            Gamma[i * nx:(i + 1) * nx, j * nu:(j + 1) * nu] = powers[i - 1 - j] @ sys.B
    return Phi, Gamma


def assemble(
    sys: LtiSystem,
    cost: CostSpec,
    X: Polytope,
    U: Polytope,
    noise: NoiseModel,
    N: int,
    delta: float,
    terminal_facets: int = 16,
    settings: Optional[QpSettings] = None,
) -> MpcProblemData:
    """Precompute tightened sets, terminal ingredients and the condensed QP."""
    if N < 1:
        raise ValueError(f"horizon must be at least 1, got {N}")
    nx, nu = sys.nx, sys.nu
    if X.dim != nx or U.dim != nu:
        raise ValueError("constraint dimensions do not match the system")
    covs = propagate_covariance(sys, noise, N)
    tight = build_tightened_sequence(X, covs, delta, noise.mode, N)

    if cost.Qf is None:
        Qf, Kf = solve_dare(sys.A, sys.B, cost.Q, cost.R)
        cost = CostSpec(cost.Q, cost.R, Qf)
    else:
        Qf = cost.Qf
        Kf = np.linalg.solve(cost.R + sys.B.T @ Qf @ sys.B, sys.B.T @ Qf @ sys.A)
    alpha = terminal_level(Qf, Kf, tight.terminal_box, U)
    terminal = TerminalIngredients(Qf, Kf, alpha)
    term_poly, term_verts = inscribed_polytope(Qf, alpha, terminal_facets)

    Phi, Gamma = prediction_matrices(sys, N)
    Qbar = np.zeros(((N + 1) * nx, (N + 1) * nx))
    for i in range(N):
        Qbar[i * nx:(i + 1) * nx, i * nx:(i + 1) * nx] = cost.Q
    Qbar[N * nx:, N * nx:] = Qf
    Rbar = np.kron(np.eye(N), cost.R)
    P = 2.0 * (Gamma.T @ Qbar @ Gamma + Rbar)
    P = 0.5 * (P + P.T)
    F = 2.0 * Gamma.T @ Qbar @ Phi
    Y = Phi.T @ Qbar @ Phi

    G_rows, w_rows, E_rows = [], [], []
    for i, Z in enumerate(tight.sets):
        G_rows.append(Z.H @ Gamma[i * nx:(i + 1) * nx])
        w_rows.append(Z.h)
        E_rows.append(-Z.H @ Phi[i * nx:(i + 1) * nx])
    G_rows.append(term_poly.H @ Gamma[N * nx:])
    w_rows.append(term_poly.h)
    E_rows.append(-term_poly.H @ Phi[N * nx:])
    for i in range(N):
        block = np.zeros((U.n_constraints, N * nu))
        block[:, i * nu:(i + 1) * nu] = U.H
        G_rows.append(block)
        w_rows.append(U.h)
        E_rows.append(np.zeros((U.n_constraints, nx)))
    G = np.vstack(G_rows)
    w = np.concatenate(w_rows)
    E = np.vstack(E_rows)

    c = sum(float(np.trace(cost.Q @ covs[i])) for i in range(N)) + float(np.trace(Qf @ covs[N]))
    for arr in (Phi, Gamma, P, F, Y, G, w, E):
        arr.setflags(write=False)
    solver = DenseQpSolver(P, G, settings)
    return MpcProblemData(
        sys, cost, N, X, U, noise, tight, terminal, term_poly, term_verts,
        Phi, Gamma, P, F, Y, G, w, E, c, solver,
    )


def solve_mpc(data: MpcProblemData, x, warm_start: Optional[Sequence[int]] = None) -> MpcSolution:
    """Optimal nominal input sequence from ``z_0 = x``.

    ``warm_start`` is a guess of active constraint rows (for instance
    ``data.shift_active_set(previous.active_set)``); it changes only the work.
    """
    x = _vec(x, data.sys.nx, "x")
    if not np.all(np.isfinite(x)):
        raise ValueError("state has non-finite entries")
    qp = data.solver.solve(data.F @ x, data.w + data.E @ x, warm_start)
    nu, N = data.sys.nu, data.N
    if qp.status == "optimal":
        u = qp.x
        value = max(qp.objective + float(x @ data.Y @ x), 0.0)
        z = data.predict(x, u)
        return MpcSolution("optimal", u.reshape(N, nu), z, value, qp)
    status: MpcStatus = "infeasible" if qp.status == "primal_infeasible" else "indeterminate"
    nan_u = np.full((N, nu), np.nan)
    nan_z = np.full((N + 1, data.sys.nx), np.nan)
    return MpcSolution(status, nan_u, nan_z, math.inf if status == "infeasible" else math.nan, qp)


def mpc_policy(data: MpcProblemData, x) -> np.ndarray:
    """First optimal input; raises :class:`MpcInfeasibleError` unless the solve is optimal."""
    sol = solve_mpc(data, x)
    if sol.status != "optimal":
        raise MpcInfeasibleError(f"MPC {sol.status} at x = {np.asarray(x).tolist()}")
    return sol.u_seq[0].copy()


def value_function(data: MpcProblemData, x) -> float:
    """Optimal expected cost: nominal value plus ``c``.

    ``inf`` when infeasible, ``nan`` when the solver could not decide.
    """
    sol = solve_mpc(data, x)
    if sol.status == "optimal":
        return sol.nominal_value + data.c
    return sol.nominal_value
