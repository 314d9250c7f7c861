"""Dense convex QP solver with verified optimality and infeasibility verdicts.

Problems have the form::

    minimize    0.5 x'Px + q'x
    subject to  A_in x <= b_in

The core is the Goldfarb-Idnani dual active-set method.  It starts from a
dual-feasible point (the unconstrained minimizer, or a warm-start active
set), adds violated constraints one at a time and terminates either at the
exact KKT point or with a nonnegative combination of rows proving that no
feasible point exists.  A singular ``P`` is handled by an outer proximal
point loop whose sub-problems are strictly convex.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Optional, Sequence

import numpy as np

from smpc.linalg import NotPositiveDefiniteError, as_matrix, cholesky

Status = Literal["optimal", "primal_infeasible", "max_iterations"]

INFEASIBILITY_TOL = 1e-7


@dataclass(frozen=True)
class QpSettings:
    abs_tol: float = 1e-8
    rel_tol: float = 1e-9
    max_iter: int = 200_000
    infeasibility_tol: float = INFEASIBILITY_TOL
    # proximal weight used only when P is singular
    prox_weight: float = 1e-2


@dataclass(frozen=True)
class QpProblem:
    P: np.ndarray
    q: np.ndarray
    A_in: np.ndarray
    b_in: np.ndarray

    def __post_init__(self):
        P = as_matrix(self.P, "P")
        n = P.shape[0]
        if P.shape != (n, n):
            raise ValueError(f"P must be square, got {P.shape}")
        q = _vector(self.q, "q", n)
        A_in = np.array(self.A_in, dtype=float).reshape(-1, n)
        b_in = _vector(self.b_in, "b_in", A_in.shape[0])
        if not np.all(np.isfinite(A_in)):
            raise ValueError("A_in has non-finite entries")
        if np.abs(P - P.T).max(initial=0.0) > 1e-9 * (1.0 + np.abs(P).max(initial=0.0)):
            raise ValueError("P is not symmetric")
        P = 0.5 * (P + P.T)
        if n and np.linalg.eigvalsh(P)[0] < -1e-10 * max(1.0, np.abs(P).max()):
            raise ValueError("P is not positive semidefinite")
        for name, val in (("P", P), ("q", q), ("A_in", A_in), ("b_in", b_in)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    @property
    def n(self) -> int:
        return self.P.shape[0]

    @property
    def m(self) -> int:
        return self.A_in.shape[0]

    def objective(self, x: np.ndarray) -> float:
        return float(0.5 * x @ self.P @ x + self.q @ x)


@dataclass(frozen=True)
class QpSolution:
    """Solver verdict.

    ``duals`` are the inequality multipliers (nonnegative at an optimal
    verdict).  ``certificate`` is set only for ``primal_infeasible``: a
    nonnegative ``y`` with ``A_in' y ~ 0`` and ``b_in' y < 0``.
    """

    status: Status
    x: np.ndarray
    objective: float
    duals: np.ndarray
    primal_residual: float
    dual_residual: float
    iterations: int = 0
    active_set: tuple[int, ...] = ()
    certificate: Optional[np.ndarray] = field(default=None, repr=False)


def _vector(v, name: str, size: int) -> np.ndarray:
    arr = np.array(v, dtype=float).reshape(-1)
    if arr.size != size:
        raise ValueError(f"{name} has size {arr.size}, expected {size}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} has non-finite entries")
    return arr


def verify_certificate(A_in: np.ndarray, b_in: np.ndarray, y: np.ndarray, tol: float = INFEASIBILITY_TOL) -> bool:
    """Check a Farkas certificate of ``{x | A_in x <= b_in} = {}``.

    ``y`` is rescaled so that ``sum_i y_i ||a_i|| = 1`` (zero rows count with
    weight one); it is accepted when ``y >= 0``, ``||A_in' y||_inf <= tol``
    and ``b_in' y < -tol``.
    """
    A_in = np.asarray(A_in, dtype=float)
    b_in = np.asarray(b_in, dtype=float)
    y = np.asarray(y, dtype=float)
    if y.shape != b_in.shape or np.any(y < 0):
        return False
    norms = np.linalg.norm(A_in, axis=1)
    weight = np.where(norms > 0, norms, 1.0) @ y
    if not weight > 0:
        return False
    y = y / weight
    return bool(np.abs(A_in.T @ y).max(initial=0.0) <= tol and b_in @ y < -tol)


class DenseQpSolver:
    """Reusable workspace for QPs sharing ``P`` and ``A_in``.

    Factorizations and row norms are computed once; :meth:`solve` only takes
    the vectors that change between calls.  Instances carry no mutable
    state, so one workspace may serve concurrent callers.
    """

    def __init__(self, P, A_in, settings: Optional[QpSettings] = None):
        self.settings = settings or QpSettings()
        P = as_matrix(P, "P")
        self.n = P.shape[0]
        self.P = 0.5 * (P + P.T)
        A_in = np.array(A_in, dtype=float).reshape(-1, self.n)
        self.A_in = A_in
        self.m = A_in.shape[0]
        norms = np.linalg.norm(A_in, axis=1)
        scale_ref = max(1.0, norms.max(initial=0.0))
        self._zero_rows = np.flatnonzero(norms <= 1e-14 * scale_ref)
        self._rows = np.flatnonzero(norms > 1e-14 * scale_ref)
        self._norms = norms
        # normalized rows: every constraint violation is a distance
        self._G = A_in[self._rows] / norms[self._rows, None]
        try:
            L = cholesky(self.P) if self.n else np.zeros((0, 0))
            self.prox = 0.0
        except NotPositiveDefiniteError:
            self.prox = self.settings.prox_weight * max(1.0, np.abs(self.P).max())
            L = cholesky(self.P + self.prox * np.eye(self.n))
        Linv = np.linalg.solve(L, np.eye(self.n)) if self.n else L
        self._Hinv = Linv.T @ Linv
        self._HinvGt = self._Hinv @ self._G.T
        # Gram matrix of the normalized rows in the H^-1 metric
        self._W = self._G @ self._HinvGt
        for arr in (self.P, self.A_in, self._G, self._Hinv, self._HinvGt, self._W):
            arr.setflags(write=False)

    # ------------------------------------------------------------------
    def solve(self, q, b_in, warm_start: Optional[Sequence[int]] = None) -> QpSolution:
        """Solve with linear term ``q`` and right-hand side ``b_in``.

        ``warm_start`` is an optional list of row indices guessed active.
        The verdict does not depend on it; only the work does.
        """
        s = self.settings
        q = _vector(q, "q", self.n)
        b = _vector(b_in, "b_in", self.m)
        tol_b = s.abs_tol + s.rel_tol * max(1.0, np.abs(b).max(initial=0.0))

        bad = self._zero_rows[b[self._zero_rows] < -tol_b]
        if bad.size:
            y = np.zeros(self.m)
            y[bad[np.argmin(b[bad])]] = 1.0
            return self._infeasible(q, b, y, 0)

        bg = b[self._rows] / self._norms[self._rows]
        ws = None
        if warm_start is not None:
            pos = np.full(self.m, -1)
            pos[self._rows] = np.arange(self._rows.size)
            ws = [int(pos[i]) for i in warm_start if 0 <= i < self.m and pos[i] >= 0]

        if self.prox == 0.0:
            out = self._gi(q, bg, ws, s.max_iter)
            return self._finish(q, b, out)

        # proximal point loop for singular P: min f(x) + prox/2 |x - xk|^2
        xk = np.zeros(self.n)
        iters = 0
        out = None
        for _ in range(10_000):
            out = self._gi(q - self.prox * xk, bg, ws, s.max_iter - iters)
            iters += out[-1]
            if out[0] != "optimal":
                return self._finish(q, b, out[:-1] + (iters,))
            x_new = out[1]
            ws = list(out[3])
            step = np.abs(x_new - xk).max(initial=0.0)
            xk = x_new
            sol = self._finish(q, b, out[:-1] + (iters,))
            if step <= s.abs_tol and sol.status == "optimal":
                return sol
            if iters >= s.max_iter:
                break
        return self._as_max_iter(q, b, xk, iters)

    # ------------------------------------------------------------------
    def _gi(self, q, bg, warm, max_iter):
        """Goldfarb-Idnani iterations on the normalized rows ``G x <= bg``.

        Returns ``(status, x, u, active, y, iterations)`` where ``u`` are the
        multipliers of the rows listed in ``active``.
        """
        G, W, HinvGt = self._G, self._W, self._HinvGt
        x = -self._Hinv @ q
        active: list[int] = []
        u = np.zeros(0)
        if warm:
            active, u = self._dual_feasible_start(q, bg, warm)
        if active:
            x -= HinvGt[:, active] @ u
        tol = self.settings.abs_tol
        it = 0
        while True:
            viol = G @ x - bg
            if active:
                viol[active] = -np.inf
            p = int(np.argmax(viol)) if viol.size else -1
            if p < 0 or viol[p] <= tol * max(1.0, abs(bg[p])):
                return "optimal", x, u, active, None, it
            up = 0.0
            while True:
                it += 1
                if it > max_iter:
                    return "max_iterations", x, u, active, None, it
                Hn = HinvGt[:, p]
                if active:
                    r = np.linalg.solve(W[np.ix_(active, active)], W[active, p])
                    z = Hn - HinvGt[:, active] @ r
                else:
                    r = np.zeros(0)
                    z = Hn
                zn = G[p] @ z
                slack = G[p] @ x - bg[p]  # > 0 while p is violated
                t2 = slack / zn if zn > 1e-12 * W[p, p] else np.inf
                pos = r > 1e-12
                if np.any(pos):
                    ratios = np.full(r.size, np.inf)
                    ratios[pos] = u[pos] / r[pos]
                    l = int(np.argmin(ratios))
                    t1 = ratios[l]
                else:
                    l, t1 = -1, np.inf
                if not np.isfinite(t1) and not np.isfinite(t2):
                    y = np.zeros(G.shape[0])
                    y[p] = 1.0
                    if active:
                        y[active] = np.maximum(-r, 0.0)
                    return "primal_infeasible", x, u, active, y, it
                t = min(t1, t2)
                if np.isfinite(t2):
                    x = x - t * z
                u = u - t * r
                up += t
                if t2 <= t1:
                    active.append(p)
                    u = np.append(u, up)
                    break
                del active[l]
                u = np.delete(u, l)

    def _dual_feasible_start(self, q, bg, warm):
        """Equality-constrained KKT point on a warm-start set with u >= 0."""
        warm = list(dict.fromkeys(warm))
        if not warm:
            return [], np.zeros(0)
        S = self._W[np.ix_(warm, warm)]
        try:
            # fast path: the whole guess is independent
            Lw = np.linalg.cholesky(S)
            if Lw.diagonal().min() ** 2 > 1e-10 * S.diagonal().max():
                return self._drop_negative(q, bg, warm)
        except np.linalg.LinAlgError:
            pass
        # in-order Cholesky elimination; a row whose pivot collapses depends on earlier rows
        active: list[int] = []
        for j, i in enumerate(warm):
            d = S[j, j]
            if d <= 1e-10 * self._W[i, i]:
                continue
            col = S[j + 1 :, j] / np.sqrt(d)
            S[j + 1 :, j + 1 :] -= np.outer(col, col)
            active.append(i)
        return self._drop_negative(q, bg, active)

    def _drop_negative(self, q, bg, active):
        Hq = self._Hinv @ q
        while active:
            S = self._W[np.ix_(active, active)]
            u = -np.linalg.solve(S, bg[active] + self._G[active] @ Hq)
            worst = int(np.argmin(u))
            if u[worst] >= 0.0:
                return active, u
            del active[worst]
        return [], np.zeros(0)

    # ------------------------------------------------------------------
    def _finish(self, q, b, out) -> QpSolution:
        status, x, u, active, y, iters = out
        if status == "primal_infeasible":
            full = np.zeros(self.m)
            full[self._rows] = y / self._norms[self._rows]
            return self._infeasible(q, b, full, iters)
        if status == "max_iterations":
            return self._as_max_iter(q, b, x, iters)
        # polish: exact KKT solve on the final active set (original scaling)
        rows = self._rows[active] if active else np.zeros(0, dtype=int)
        lam = np.zeros(self.m)
        if active:
            lam[rows] = u / self._norms[rows]
        if active and self.prox == 0.0 and not self._accurate(q, b, x, lam, rows):
            Ga = self.A_in[rows]
            k = len(rows)
            K = np.block([[self.P, Ga.T], [Ga, np.zeros((k, k))]])
            try:
                sol = np.linalg.solve(K, np.concatenate([-q, b[rows]]))
            except np.linalg.LinAlgError:
                sol = np.full(self.n + k, np.nan)
            x_pol, la = sol[: self.n], sol[self.n :]
            gi_viol = np.max(self.A_in @ x - b, initial=0.0)
            if np.all(np.isfinite(sol)) and la.min() >= -self.settings.abs_tol and np.max(self.A_in @ x_pol - b) <= gi_viol + self.settings.abs_tol:
                x = x_pol
                lam[rows] = np.maximum(la, 0.0)
        return self._optimal(q, b, x, lam, iters, tuple(int(i) for i in rows))

    def _accurate(self, q, b, x, lam, rows) -> bool:
        """Whether the iterate already meets the tolerance well enough to skip polishing."""
        tight = 0.1 * self.settings.abs_tol
        if np.abs(self.A_in[rows] @ x - b[rows]).max() > tight:
            return False
        if np.max(self.A_in @ x - b) > tight:
            return False
        return np.abs(self.P @ x + q + self.A_in.T @ lam).max() <= tight

    def _optimal(self, q, b, x, lam, iters, active) -> QpSolution:
        s = self.settings
        pres = float(max(0.0, np.max(self.A_in @ x - b, initial=0.0)))
        dres = float(np.abs(self.P @ x + q + self.A_in.T @ lam).max(initial=0.0))
        scale = max(1.0, np.abs(q).max(initial=0.0), np.abs(b).max(initial=0.0))
        tol = s.abs_tol + s.rel_tol * scale
        status: Status = "optimal" if pres <= tol and dres <= tol else "max_iterations"
        obj = float(0.5 * x @ self.P @ x + q @ x)
        return QpSolution(status, x, obj, lam, pres, dres, iters, active)

    def _infeasible(self, q, b, y, iters) -> QpSolution:
        if not verify_certificate(self.A_in, b, y, self.settings.infeasibility_tol):
            return self._as_max_iter(q, b, np.zeros(self.n), iters)
        norms = np.where(self._norms > 0, self._norms, 1.0)
        y = y / (norms @ y)
        nan = np.full(self.n, np.nan)
        return QpSolution(
            "primal_infeasible", nan, np.inf, np.zeros(self.m), np.inf, np.inf, iters, (), certificate=y
        )

    def _as_max_iter(self, q, b, x, iters) -> QpSolution:
        pres = float(max(0.0, np.max(self.A_in @ x - b, initial=0.0)))
        obj = float(0.5 * x @ self.P @ x + q @ x)
        return QpSolution("max_iterations", x, obj, np.zeros(self.m), pres, np.inf, iters)


def solve(qp: QpProblem, settings: Optional[QpSettings] = None, warm_start: Optional[Sequence[int]] = None) -> QpSolution:
    """Solve a single QP; see :class:`DenseQpSolver` for repeated solves."""
    return DenseQpSolver(qp.P, qp.A_in, settings).solve(qp.q, qp.b_in, warm_start)


def check_feasible(A_in, b_in, settings: Optional[QpSettings] = None) -> Optional[bool]:
    """Feasibility of ``{x | A_in x <= b_in}``.

    Returns ``True`` or ``False`` on a certified verdict and ``None`` when the
    solver ran out of iterations (indeterminate; never read it as ``False``).
    """
    A_in = np.array(A_in, dtype=float)
    if A_in.ndim != 2:
        raise ValueError("A_in must be two-dimensional")
    n = A_in.shape[1]
    b_in = _vector(b_in, "b_in", A_in.shape[0])
    # zero objective; the solver's proximal loop makes it strictly convex
    sol = DenseQpSolver(np.zeros((n, n)), A_in, settings).solve(np.zeros(n), b_in)
    if sol.status == "optimal":
        return True
    if sol.status == "primal_infeasible":
        return False
    return None
