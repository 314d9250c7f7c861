"""MPC with a zero-input back-up and the extended Lyapunov candidate."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from smpc.mpc import MpcProblemData, MpcSolution, solve_mpc


class Verdict(str, Enum):
    INSIDE = "inside"
    OUTSIDE = "outside"
    INDETERMINATE = "indeterminate"


class Branch(str, Enum):
    MPC = "mpc"
    BACKUP = "backup"
    INDETERMINATE_BACKUP = "indeterminate_backup"


_VERDICT = {"optimal": Verdict.INSIDE, "infeasible": Verdict.OUTSIDE, "indeterminate": Verdict.INDETERMINATE}


@dataclass(frozen=True)
class PolicyDecision:
    """Applied input and the branch that produced it.

    ``value_nominal`` is the nominal optimal value on the MPC branch and
    ``inf``/``nan`` otherwise.
    """

    input: np.ndarray
    branch: Branch
    value_nominal: float
    feasible: bool
    solution: Optional[MpcSolution] = None

    @property
    def verdict(self) -> Verdict:
        if self.branch is Branch.MPC:
            return Verdict.INSIDE
        return Verdict.OUTSIDE if self.branch is Branch.BACKUP else Verdict.INDETERMINATE


def verdict_of(sol: MpcSolution) -> Verdict:
    return _VERDICT[sol.status]


def in_feasible_set(data: MpcProblemData, x, warm_start: Optional[Sequence[int]] = None) -> Verdict:
    """Whether the MPC problem at ``x`` admits an input sequence."""
    return verdict_of(solve_mpc(data, x, warm_start))


def combined_policy(data: MpcProblemData, x, warm_start: Optional[Sequence[int]] = None) -> PolicyDecision:
    """MPC input when certified feasible, the zero input otherwise."""
    sol = solve_mpc(data, x, warm_start)
    if sol.status == "optimal":
        return PolicyDecision(sol.u_seq[0].copy(), Branch.MPC, sol.nominal_value, True, sol)
    branch = Branch.BACKUP if sol.status == "infeasible" else Branch.INDETERMINATE_BACKUP
    return PolicyDecision(np.zeros(data.sys.nu), branch, sol.nominal_value, False, sol)


def _bisect(data: MpcProblemData, x: np.ndarray, tol: float, warm: Optional[Sequence[int]]):
    lo, hi = 0.0, 1.0
    lo_sol = solve_mpc(data, np.zeros_like(x))
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        sol = solve_mpc(data, mid * x, warm)
        if sol.status == "optimal":
            lo, lo_sol = mid, sol
            warm = sol.active_set
        else:
            # indeterminate counts as outside: a* errs toward the feasible side
            hi = mid
    return lo, lo_sol


def boundary_scaling(data: MpcProblemData, x, tol: float = 1e-6) -> float:
    """Largest ``a`` in ``[0, 1]`` with ``a x`` feasible, to within ``tol``.

    The feasible set is convex and contains the origin, so the feasible
    scalings form an interval ``[0, a*]``.  Returns ``1.0`` if ``x`` itself
    is feasible; the returned value is always a certified-feasible scaling.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    if solve_mpc(data, x).status == "optimal":
        return 1.0
    return _bisect(data, x, tol, None)[0]


def lyapunov_candidate(data: MpcProblemData, x, tol: float = 1e-6, solution: Optional[MpcSolution] = None) -> float:
    """Nominal value at ``x`` inside the feasible set, at ``a* x`` outside.

    The nominal value is convex with its minimum at the origin, hence
    nondecreasing along rays, so the maximum over feasible scalings is
    attained at ``a*``.  ``solution`` may pass an existing solve at ``x``.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    sol = solution if solution is not None else solve_mpc(data, x)
    if sol.status == "optimal":
        return sol.nominal_value
    _, lo_sol = _bisect(data, x, tol, None)
    return lo_sol.nominal_value if lo_sol.status == "optimal" else math.nan
