"""Independent QP oracles shared by the solver and acceptance tests."""

import itertools

import numpy as np


def brute_force_qp(P, q, G, b, tol=1e-9):
    """Enumerate every active set, keep KKT points that are primal and dual feasible.

    Returns ``(objective, x)`` or ``(inf, None)`` when no point is feasible
    (a strictly convex QP is infeasible exactly when enumeration finds nothing).
    """
    n, m = len(q), len(b)
    best, best_x = np.inf, None
    for k in range(0, min(n, m) + 1):
        for S in itertools.combinations(range(m), k):
            S = list(S)
            if k:
                K = np.block([[P, G[S].T], [G[S], np.zeros((k, k))]])
                rhs = np.concatenate([-q, b[S]])
            else:
                K, rhs = P, -q
            try:
                sol = np.linalg.solve(K, rhs)
            except np.linalg.LinAlgError:
                continue
            x, lam = sol[:n], sol[n:]
            if np.all(G @ x <= b + tol) and np.all(lam >= -tol):
                f = 0.5 * x @ P @ x + q @ x
                if f < best:
                    best, best_x = f, x
    return best, best_x


def random_qp(rng, n_max=3, m_max=6):
    n = int(rng.integers(1, n_max + 1))
    m = int(rng.integers(1, m_max + 1))
    M = rng.normal(size=(n, n))
    P = M @ M.T + 0.1 * np.eye(n)
    q = rng.normal(size=n) * 3
    G = rng.normal(size=(m, n))
    b = rng.normal(size=m)
    return P, q, G, b


def infeasible_qp(rng, n_max=3, m_max=6):
    """Random rows plus one row that contradicts a positive combination of them."""
    n = int(rng.integers(1, n_max + 1))
    k = int(rng.integers(1, m_max))
    G = rng.normal(size=(k, n))
    b = rng.normal(size=k)
    lam = rng.uniform(0.2, 2.0, size=k)
    # sum lam_i g_i' x <= lam' b, so -(sum lam_i g_i)' x <= -lam' b - gap is empty
    G = np.vstack([G, -(lam @ G)])
    b = np.append(b, -(lam @ b) - rng.uniform(0.1, 2.0))
    perm = rng.permutation(k + 1)
    M = rng.normal(size=(n, n))
    return M @ M.T + 0.1 * np.eye(n), rng.normal(size=n), G[perm], b[perm]
