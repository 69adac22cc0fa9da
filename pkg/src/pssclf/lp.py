"""Dense two-phase simplex for ``max c'z  s.t.  G z <= h`` with free ``z``.

Uncertainty-set LPs have very few variables (``m + 1``) and many rows, so the
solver works on the dual in standard form::

    min h'y   s.t.  G'y = c,  y >= 0

whose basis has only ``m + 1`` columns. Phase 1 drives artificial variables
out of the basis; phase 2 optimizes. Dual infeasibility means the primal is
unbounded (when the primal is feasible); dual unboundedness means the primal
is infeasible. The primal optimizer is read off the simplex multipliers.
"""

from dataclasses import dataclass

import numpy as np


class LPError(RuntimeError):
    pass


class UnboundedLP(LPError):
    """Objective is unbounded over the polyhedron."""


class InfeasibleLP(LPError):
    """Polyhedron is empty."""


@dataclass
class LPResult:
    value: float
    z: np.ndarray
    iterations: int
    phase1_iterations: int


def _simplex(A, b, cost, basis, allowed, tol, max_iter):
    """Revised simplex on ``min cost'y, A y = b, y >= 0`` from a feasible basis.

    Dantzig pricing, switching to Bland's rule after a run of degenerate
    pivots to rule out cycling. Returns ``(basis, y_B, status, iterations)``.
    """
    k = A.shape[0]
    its = 0
    degenerate_run = 0
    while its < max_iter:
        B = A[:, basis]
        y_B = np.linalg.solve(B, b)
        pi = np.linalg.solve(B.T, cost[basis])
        reduced = cost - pi @ A
        reduced[~allowed] = np.inf
        reduced[basis] = np.inf
        if degenerate_run > 2 * k + 5:
            cand = np.flatnonzero(reduced < -tol)
            if cand.size == 0:
                return basis, y_B, "optimal", its
            j = int(cand[0])
        else:
            j = int(np.argmin(reduced))
            if reduced[j] >= -tol:
                return basis, y_B, "optimal", its
        d = np.linalg.solve(B, A[:, j])
        pos = d > tol
        if not np.any(pos):
            return basis, y_B, "unbounded", its
        ratios = np.full(k, np.inf)
        ratios[pos] = np.maximum(y_B[pos], 0.0) / d[pos]
        theta = ratios.min()
        ties = np.flatnonzero(ratios <= theta + tol * max(1.0, theta))
        leave = int(ties[np.argmin(np.asarray(basis)[ties])])
        degenerate_run = degenerate_run + 1 if theta <= tol else 0
        basis = list(basis)
        basis[leave] = j
        its += 1
    raise LPError(f"simplex did not converge in {max_iter} iterations")


def maximize(c, G, h, tol=1e-10, max_iter=10_000) -> LPResult:
    """Solve ``max c'z s.t. G z <= h``; raises UnboundedLP or InfeasibleLP."""
    c = np.asarray(c, dtype=float)
    G = np.atleast_2d(np.asarray(G, dtype=float))
    h = np.asarray(h, dtype=float)
    n_rows, k = G.shape
    sign = np.where(c < 0, -1.0, 1.0)
    # dual equality rows, flipped so the right-hand side is nonnegative
    A = np.hstack([G.T * sign[:, None], np.eye(k)])
    rhs = c * sign
    cols = n_rows + k
    allowed = np.ones(cols, dtype=bool)
    phase1_cost = np.concatenate([np.zeros(n_rows), np.ones(k)])
    basis = list(range(n_rows, cols))
    basis, y_B, _, it1 = _simplex(A, rhs, phase1_cost, basis, allowed, tol, max_iter)
    infeas = float(phase1_cost[basis] @ y_B)
    if infeas > tol * max(1.0, np.abs(rhs).max()) * 10:
        if np.all(h >= 0) or _feasible(G, h, tol, max_iter):
            raise UnboundedLP("objective unbounded above over the constraint set")
        raise InfeasibleLP("constraint set is empty")

    # pivot remaining artificials out where a real column can replace them
    Binv = np.linalg.inv(A[:, basis])
    for pos, col in enumerate(list(basis)):
        if col < n_rows:
            continue
        row = Binv[pos] @ A[:, :n_rows]
        row[basis] = 0.0
        cand = np.flatnonzero(np.abs(row) > 1e-9)
        if cand.size:
            basis[pos] = int(cand[0])
            Binv = np.linalg.inv(A[:, basis])
    allowed[n_rows:] = False
    cost = np.concatenate([h, np.zeros(k)])
    basis, y_B, status, it2 = _simplex(A, rhs, cost, basis, allowed, tol, max_iter)
    if status == "unbounded":
        raise InfeasibleLP("constraint set is empty")
    pi = np.linalg.solve(A[:, basis].T, cost[basis])
    z = pi * sign
    return LPResult(float(cost[basis] @ y_B), z, it1 + it2, it1)


def _feasible(G, h, tol, max_iter):
    """Primal feasibility via the dual with zero objective (unbounded dual means empty)."""
    try:
        maximize(np.zeros(G.shape[1]), G, h, tol, max_iter)
    except InfeasibleLP:
        return False
    except UnboundedLP:
        return True
    return True
