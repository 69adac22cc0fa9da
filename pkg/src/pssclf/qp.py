"""Small dense convex QPs by exhaustive active-set search.

Problems here have at most a handful of inequality constraints (one CLF
constraint plus input box bounds), so every candidate active set of size
``<= n`` is tried and the KKT point with feasible primal and nonnegative
multipliers is returned. For a strictly convex objective that point is the
unique optimum.
"""

from dataclasses import dataclass
from itertools import combinations

import numpy as np


@dataclass
class QPResult:
    x: np.ndarray
    objective: float
    feasible: bool
    active: tuple = ()
    kkt_solves: int = 0


def solve_qp(H, g, A, b, tol=1e-9):
    """Minimize ``0.5 x'Hx + g'x`` subject to ``A x <= b``.

    ``H`` must be symmetric positive definite. Returns a QPResult with
    ``feasible=False`` and ``x=None`` when no KKT point exists, i.e. the
    constraint set is empty.
    """
    H = np.atleast_2d(np.asarray(H, dtype=float))
    g = np.atleast_1d(np.asarray(g, dtype=float))
    A = np.atleast_2d(np.asarray(A, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    n = H.shape[0]
    n_con = A.shape[0] if A.size else 0
    scale = 1.0 + np.abs(b)
    solves = 0
    for size in range(0, min(n, n_con) + 1):
        for act in combinations(range(n_con), size):
            Aa = A[list(act)]
            if size and np.linalg.matrix_rank(Aa) < size:
                continue
            kkt = np.zeros((n + size, n + size))
            kkt[:n, :n] = H
            kkt[:n, n:] = Aa.T
            kkt[n:, :n] = Aa
            rhs = np.concatenate([-g, b[list(act)]])
            try:
                sol = np.linalg.solve(kkt, rhs)
            except np.linalg.LinAlgError:
                continue
            solves += 1
            x, lam = sol[:n], sol[n:]
            if n_con and np.any(A @ x - b > tol * scale):
                continue
            if np.any(lam < -tol):
                continue
            obj = 0.5 * x @ H @ x + g @ x
            return QPResult(x, float(obj), True, act, solves)
    return QPResult(None, float("inf"), False, (), solves)


def box_rows(lo, hi):
    """Inequality rows for ``lo <= x <= hi``."""
    lo = np.atleast_1d(np.asarray(lo, dtype=float))
    hi = np.atleast_1d(np.asarray(hi, dtype=float))
    m = len(lo)
    I = np.eye(m)
    return np.vstack([I, -I]), np.concatenate([hi, -lo])
