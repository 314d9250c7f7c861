"""Seeded closed-loop and autonomous Monte Carlo simulation.

Run ``r`` of an ensemble draws its noise from a Philox stream keyed by
``(master_seed, r)``, so records do not depend on run order or on the
number of worker threads.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Literal, Optional, Sequence

import numpy as np

from smpc.model import LtiSystem, NoiseModel, Polytope, noise_factor
from smpc.mpc import MpcProblemData, solve_mpc
from smpc.policy import Branch, Verdict, combined_policy, lyapunov_candidate, verdict_of

SimMode = Literal["autonomous", "mpc_combined"]
AUTONOMOUS_BRANCH = "autonomous"


@dataclass(frozen=True)
class SimConfig:
    mode: SimMode
    n_runs: int
    steps: int
    master_seed: int
    initial_states: np.ndarray

    def __post_init__(self):
        if self.mode not in ("autonomous", "mpc_combined"):
            raise ValueError(f"unknown simulation mode {self.mode!r}")
        if self.n_runs < 1 or self.steps < 1:
            raise ValueError("n_runs and steps must be at least 1")
        if self.master_seed < 0:
            raise ValueError("master_seed must be nonnegative")
        X0 = np.atleast_2d(np.asarray(self.initial_states, dtype=float))
        if X0.shape[0] not in (1, self.n_runs):
            raise ValueError(f"need one initial state or {self.n_runs}, got {X0.shape[0]}")
        X0.setflags(write=False)
        object.__setattr__(self, "initial_states", X0)

    def initial_state(self, run: int) -> np.ndarray:
        return self.initial_states[0 if self.initial_states.shape[0] == 1 else run].copy()


@dataclass(frozen=True)
class TrajectoryRecord:
    """One run.

    ``states``, ``lyapunov_V``, ``candidate_V``, ``feasible_flags`` and
    ``violation_flags`` have one entry per visited state (``steps + 1``);
    ``inputs``, ``noise`` and ``branch_flags`` one per step.  Optional
    fields are ``None`` when the corresponding ingredient was not supplied.
    """

    run_id: int
    states: np.ndarray
    inputs: np.ndarray
    noise: np.ndarray
    branch_flags: tuple[str, ...]
    lyapunov_V: Optional[np.ndarray]
    candidate_V: Optional[np.ndarray]
    feasible_flags: Optional[tuple[str, ...]]
    violation_flags: Optional[np.ndarray]

    @property
    def steps(self) -> int:
        return self.inputs.shape[0]


def run_stream(master_seed: int, run: int) -> np.random.Generator:
    """Independent counter-based stream for one run."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(master_seed), int(run)])))


def sample_gaussian(sigma_w, stream: np.random.Generator, size: Optional[int] = None) -> np.ndarray:
    """``L xi`` with ``L L' = sigma_w`` and standard normal ``xi``.

    With ``size`` the draws are stacked row-wise and consume the stream
    exactly as ``size`` consecutive single draws would.
    """
    L = noise_factor(sigma_w)
    n = L.shape[0]
    if size is None:
        return L @ stream.standard_normal(n)
    return stream.standard_normal((size, n)) @ L.T


# ----------------------------------------------------------------------
# controllers

@dataclass(frozen=True)
class ControlStep:
    u: np.ndarray
    branch: str
    verdict: Optional[str] = None
    candidate: float = math.nan


class ZeroController:
    """Autonomous plant (``u = 0``).

    With ``data`` the feasible-set verdict and the Lyapunov candidate are
    recorded along the way; this costs one QP per step.
    """

    def __init__(self, nu: int, data: Optional[MpcProblemData] = None, candidate: bool = False):
        self.nu = nu
        self.data = data
        self.candidate = candidate and data is not None

    @property
    def records_verdicts(self) -> bool:
        return self.data is not None

    def new_run(self) -> Callable[[np.ndarray], ControlStep]:
        u0 = np.zeros(self.nu)
        data = self.data
        warm: list = [()]

        def act(x: np.ndarray) -> ControlStep:
            if data is None:
                return ControlStep(u0, AUTONOMOUS_BRANCH)
            sol = solve_mpc(data, x, warm[0])
            warm[0] = sol.active_set if sol.status == "optimal" else ()
            cand = lyapunov_candidate(data, x, solution=sol) if self.candidate else math.nan
            return ControlStep(u0, AUTONOMOUS_BRANCH, verdict_of(sol).value, cand)

        return act


class CombinedController:
    """MPC with zero-input back-up, warm-started from the shifted active set."""

    def __init__(self, data: MpcProblemData, candidate: bool = True, candidate_tol: float = 1e-6):
        self.data = data
        self.nu = data.sys.nu
        self.candidate = candidate
        self.candidate_tol = candidate_tol

    records_verdicts = True

    def new_run(self) -> Callable[[np.ndarray], ControlStep]:
        data = self.data
        warm: list = [None]

        def act(x: np.ndarray) -> ControlStep:
            dec = combined_policy(data, x, warm[0])
            if dec.branch is Branch.MPC:
                warm[0] = data.shift_active_set(dec.solution.active_set)
            elif dec.solution.qp is not None and dec.solution.qp.certificate is not None:
                # rows of the last infeasibility proof usually prove the next one too
                warm[0] = [int(i) for i in np.flatnonzero(dec.solution.qp.certificate > 0)]
            else:
                warm[0] = None
            cand = math.nan
            if self.candidate:
                cand = lyapunov_candidate(data, x, self.candidate_tol, solution=dec.solution)
            return ControlStep(dec.input, dec.branch.value, dec.verdict.value, cand)

        return act

    def evaluate(self, x: np.ndarray) -> ControlStep:
        """Verdict and candidate at a state without acting (used for the final state)."""
        return self.new_run()(x)


def run_closed_loop(
    sys: LtiSystem,
    controller,
    x0,
    steps: int,
    stream: np.random.Generator,
    noise: NoiseModel,
    X: Optional[Polytope] = None,
    lyap_P: Optional[np.ndarray] = None,
    run_id: int = 0,
) -> TrajectoryRecord:
    """Simulate ``steps`` transitions of ``x+ = Ax + Bu + w`` under ``controller``.

    The noise sequence is drawn up front from ``stream``; infeasibility is
    recorded, never raised.
    """
    if steps < 1:
        raise ValueError("steps must be at least 1")
    nx, nu = sys.nx, sys.nu
    W = sample_gaussian(noise.sigma_w, stream, steps)
    states = np.zeros((steps + 1, nx))
    inputs = np.zeros((steps, nu))
    states[0] = np.asarray(x0, dtype=float).reshape(nx)
    act = controller.new_run()
    branches, verdicts, cands = [], [], []
    for k in range(steps):
        cs = act(states[k])
        inputs[k] = cs.u
        branches.append(cs.branch)
        verdicts.append(cs.verdict)
        cands.append(cs.candidate)
        states[k + 1] = sys.A @ states[k] + sys.B @ inputs[k] + W[k]
    tracks = getattr(controller, "records_verdicts", False)
    if tracks:
        last = act(states[-1])
        verdicts.append(last.verdict)
        cands.append(last.candidate)
    V = np.einsum("ij,jk,ik->i", states, lyap_P, states) if lyap_P is not None else None
    with_cand = tracks and getattr(controller, "candidate", False)
    viol = ~X.contains_many(states) if X is not None else None
    for arr in (states, inputs, W) + tuple(a for a in (V, viol) if a is not None):
        arr.setflags(write=False)
    cand_arr = None
    if with_cand:
        cand_arr = np.array(cands)
        cand_arr.setflags(write=False)
    return TrajectoryRecord(
        run_id, states, inputs, W, tuple(branches), V, cand_arr,
        tuple(verdicts) if tracks else None, viol,
    )


def thread_count() -> int:
    """Worker threads from ``SMPC_THREADS`` (default 1)."""
    raw = os.environ.get("SMPC_THREADS", "").strip()
    if not raw:
        return 1
    n = int(raw)
    if n < 1:
        raise ValueError(f"SMPC_THREADS must be a positive integer, got {raw!r}")
    return n


def monte_carlo(
    cfg: SimConfig,
    sys: LtiSystem,
    controller,
    noise: NoiseModel,
    X: Optional[Polytope] = None,
    lyap_P: Optional[np.ndarray] = None,
    threads: Optional[int] = None,
    runs: Optional[Sequence[int]] = None,
) -> list[TrajectoryRecord]:
    """Simulate the ensemble; records come back in run order.

    ``runs`` selects a subset of run indices (default all of
    ``range(cfg.n_runs)``).  Each run is a pure function of its index.
    """
    idx = list(range(cfg.n_runs)) if runs is None else [int(r) for r in runs]

    def one(r: int) -> TrajectoryRecord:
        return run_closed_loop(
            sys, controller, cfg.initial_state(r), cfg.steps, run_stream(cfg.master_seed, r),
            noise, X, lyap_P, r,
        )

    n_threads = thread_count() if threads is None else threads
    if n_threads <= 1 or len(idx) <= 1:
        return [one(r) for r in idx]
    with ThreadPoolExecutor(max_workers=n_threads) as pool:
        return list(pool.map(one, idx))


def violation_stats(ensemble: Sequence[TrajectoryRecord], X: Polytope) -> np.ndarray:
    """Per-step fraction of runs with ``x_k`` outside ``X``."""
    if not ensemble:
        raise ValueError("empty ensemble")
    flags = np.array([~X.contains_many(rec.states) for rec in ensemble])
    return flags.mean(axis=0)


def one_step_violations(ensemble: Sequence[TrajectoryRecord], X: Polytope) -> tuple[int, int]:
    """``(violations, pairs)`` over steps taken on the MPC branch: is ``x_{k+1}`` outside ``X``?"""
    hits = pairs = 0
    for rec in ensemble:
        on = np.array([b == Branch.MPC.value for b in rec.branch_flags])
        nxt_out = ~X.contains_many(rec.states[1:])
        pairs += int(on.sum())
        hits += int((on & nxt_out).sum())
    return hits, pairs


def verdict_flags(rec: TrajectoryRecord) -> np.ndarray:
    """Boolean inside-flags of a record."""
    if rec.feasible_flags is None:
        raise ValueError("record carries no feasibility verdicts")
    return np.array([f == Verdict.INSIDE.value for f in rec.feasible_flags])
