"""Quadratic CLFs, Lyapunov-derivative estimates, and CLF-based controllers.

The CLF lives in error coordinates ``e = x - x_d(t)``. Functions that need
the error take ``t`` and ``reference`` keywords; ``reference=None`` means
regulation to the origin (``e = x``).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import solve_continuous_are, solve_continuous_lyapunov

from .comparison import ComparisonFn, power_law
from .dynamics import AffineSystem, PendulumParams, linearize, saturate
from .qp import QPResult, box_rows, solve_qp

logger = logging.getLogger(__name__)


class AssumptionViolation(RuntimeError):
    """No admissible input satisfies the CLF decrease condition within bounds."""


@dataclass(frozen=True, eq=False)
class QuadraticCLF:
    """``V(e) = e' P e`` with decay requirement ``V_dot <= -c3 |e|^2``."""

    P: np.ndarray
    c3: float
    K: Optional[np.ndarray] = None

    def __post_init__(self):
        P = np.asarray(self.P, dtype=float)
        if not np.allclose(P, P.T, atol=1e-12 * max(1.0, np.abs(P).max())):
            raise ValueError("CLF matrix must be symmetric")
        if np.linalg.eigvalsh(P).min() <= 0:
            raise ValueError("CLF matrix must be positive definite")
        if not self.c3 > 0:
            raise ValueError("decay coefficient must be positive")
        object.__setattr__(self, "P", 0.5 * (P + P.T))

    @property
    def n(self) -> int:
        return self.P.shape[0]

    @property
    def lam_min(self) -> float:
        return float(np.linalg.eigvalsh(self.P)[0])

    @property
    def lam_max(self) -> float:
        return float(np.linalg.eigvalsh(self.P)[-1])

    @property
    def lower(self) -> ComparisonFn:
        return power_law(self.lam_min, 2.0)

    @property
    def upper(self) -> ComparisonFn:
        return power_law(self.lam_max, 2.0)

    @property
    def decay(self) -> ComparisonFn:
        return power_law(self.c3, 2.0)

    def value(self, e):
        e = np.asarray(e, dtype=float)
        return float(e @ self.P @ e) if e.ndim == 1 else np.einsum("ij,jk,ik->i", e, self.P, e)

    def grad(self, e):
        e = np.asarray(e, dtype=float)
        return 2.0 * (e @ self.P)

    def alpha(self, e_norm):
        return self.c3 * np.asarray(e_norm) ** 2

    def to_dict(self) -> dict:
        return {
            "P": self.P.tolist(),
            "c3": self.c3,
            "K": None if self.K is None else np.asarray(self.K).tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QuadraticCLF":
        K = None if d.get("K") is None else np.array(d["K"], dtype=float)
        return cls(np.array(d["P"], dtype=float), float(d["c3"]), K)


def _is_stabilizable(A, B, tol=1e-9):
    n = A.shape[0]
    for lam in np.linalg.eigvals(A):
        if lam.real >= -tol:
            M = np.hstack([A - lam * np.eye(n), B.astype(complex)])
            if np.linalg.matrix_rank(M, tol=1e-8) < n:
                return False
    return True


def synthesize_clf(system, Q, R=1.0, K=None) -> QuadraticCLF:
    """Build a quadratic CLF from a linearization.

    ``system`` is an AffineSystem (linearized at the origin) or an ``(A, B)``
    pair. Without an explicit gain ``K`` an LQR gain for weights ``(Q, R)`` is
    used. ``P`` then solves ``(A - BK)' P + P (A - BK) = -Q`` and the decay
    coefficient is ``lambda_min(Q) / 2``.
    """
    if isinstance(system, AffineSystem):
        A, B = linearize(system)
    else:
        A, B = (np.atleast_2d(np.asarray(M, dtype=float)) for M in system)
    n = A.shape[0]
    B = B.reshape(n, -1)
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    if K is None:
        if not _is_stabilizable(A, B):
            raise ValueError("linearization is not stabilizable")
        S = solve_continuous_are(A, B, Q, R)
        K = np.linalg.solve(R, B.T @ S)
    K = np.atleast_2d(np.asarray(K, dtype=float)).reshape(B.shape[1], n)
    Acl = A - B @ K
    if np.linalg.eigvals(Acl).real.max() >= 0:
        raise ValueError("closed-loop linearization is not Hurwitz")
    P = solve_continuous_lyapunov(Acl.T, -Q)
    return QuadraticCLF(P, float(np.linalg.eigvalsh(Q)[0]) / 2.0, K)


def pendulum_linearization(est: PendulumParams):
    """Error dynamics of the estimated pendulum after gravity cancellation."""
    return np.array([[0.0, 1.0], [0.0, 0.0]]), np.array([[0.0], [1.0 / est.inertia]])


def pendulum_clf(est: PendulumParams, Q=((10.0, 0.0), (0.0, 1.0)), R=1.0) -> QuadraticCLF:
    return synthesize_clf(pendulum_linearization(est), Q, R)


def tracking_error(x, t=0.0, reference=None):
    """Return ``(e, xdot_d)`` for state ``x`` at time ``t``."""
    x = np.asarray(x, dtype=float)
    if reference is None:
        return x, np.zeros_like(x)
    return x - reference.x_d(t), reference.xdot_d(t)


@dataclass
class DerivativeEstimate:
    base: float
    correction: float
    total: float


def vdot_terms(clf, est_sys, x, estimators=None, t=0.0, reference=None):
    """Affine coefficients ``(phi0, phi1)`` with ``V_hat_dot(x, u) = phi0 + phi1' u``.

    Also returns the gradient used, since callers usually need it.
    """
    e, xd_dot = tracking_error(x, t, reference)
    gv = clf.grad(e)
    phi0 = float(gv @ (est_sys.drift(x) - xd_dot))
    phi1 = est_sys.act(x).T @ gv
    if estimators is not None:
        a_hat, b_hat = estimators.predict(x, gv)
        phi0 += float(b_hat)
        phi1 = phi1 + a_hat
    return phi0, phi1, gv


def vdot_estimated(clf, est_sys, x, u, estimators=None, t=0.0, reference=None) -> DerivativeEstimate:
    e, xd_dot = tracking_error(x, t, reference)
    gv = clf.grad(e)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    base = float((est_sys.xdot(x, u) - xd_dot) @ gv)
    corr = 0.0
    if estimators is not None:
        a_hat, b_hat = estimators.predict(x, gv)
        corr = float(a_hat @ u + b_hat)
    return DerivativeEstimate(base, corr, base + corr)


def vdot_true(clf, true_sys, x, u, t=0.0, reference=None) -> float:
    """Exact Lyapunov derivative along the true dynamics (simulation ground truth)."""
    e, xd_dot = tracking_error(x, t, reference)
    return float(clf.grad(e) @ (true_sys.xdot(x, u) - xd_dot))


def admissible(clf, est_sys, x, u, estimators=None, t=0.0, reference=None) -> bool:
    e, _ = tracking_error(x, t, reference)
    est = vdot_estimated(clf, est_sys, x, u, estimators, t, reference)
    return bool(est.total <= -clf.alpha(np.linalg.norm(e)))


def solve_clf_qp(phi0, phi1, alpha_val, u_max=None, H=None, g=None, u_base=None) -> QPResult:
    """Minimize ``0.5 v'Hv + g'v`` over the increment ``v`` applied on top of ``u_base``.

    Constraints: ``phi0 + phi1'(u_base + v) <= -alpha_val`` and
    ``|u_base + v| <= u_max`` componentwise. When the constraints cannot be
    met together the result is flagged infeasible and ``x`` holds the
    in-bounds increment that minimizes the Lyapunov derivative.
    """
    phi1 = np.atleast_1d(np.asarray(phi1, dtype=float))
    m = len(phi1)
    u_base = np.zeros(m) if u_base is None else np.atleast_1d(np.asarray(u_base, dtype=float))
    H = np.eye(m) if H is None else np.atleast_2d(np.asarray(H, dtype=float))
    g = np.zeros(m) if g is None else np.atleast_1d(np.asarray(g, dtype=float))
    rows = [phi1[None, :]]
    rhs = [np.array([-alpha_val - phi0 - phi1 @ u_base])]
    if u_max is not None:
        Ab, bb = box_rows(-u_max - u_base, u_max - u_base)
        rows.append(Ab)
        rhs.append(bb)
    res = solve_qp(H, g, np.vstack(rows), np.concatenate(rhs))
    if res.feasible:
        return res
    # no admissible input within the bounds: push the derivative down as far as possible.
    lim = np.inf if u_max is None else u_max
    target = np.where(phi1 > 0, -lim, np.where(phi1 < 0, lim, np.clip(u_base, -lim, lim)))
    v = target - u_base
    return QPResult(v, float(0.5 * v @ H @ v + g @ v), False, (), res.kkt_solves)


def qp_controller(clf, est_sys, x, estimators=None, u_max=None, t=0.0, reference=None,
                  return_result=False):
    """Min-norm input satisfying ``V_hat_dot(x, u) <= -alpha(|e|)`` and ``|u| <= u_max``."""
    phi0, phi1, _ = vdot_terms(clf, est_sys, x, estimators, t, reference)
    e, _ = tracking_error(x, t, reference)
    res = solve_clf_qp(phi0, phi1, clf.alpha(np.linalg.norm(e)), u_max)
    if not res.feasible:
        logger.debug("CLF constraint infeasible at t=%.4g, x=%s", t, np.asarray(x).tolist())
    return res if return_result else res.x


def pd_controller(kp, kd, reference, x, t, u_max=None):
    e, _ = tracking_error(x, t, reference)
    return saturate(-kp * e[0] - kd * e[1], u_max)


@dataclass
class PDController:
    kp: float
    kd: float
    reference: object = None
    u_max: Optional[float] = None

    def __call__(self, x, t):
        return pd_controller(self.kp, self.kd, self.reference, x, t, self.u_max)


@dataclass
class CLFQPController:
    """Model-based min-norm CLF controller; infeasible states are recorded in ``events``."""

    clf: QuadraticCLF
    est_sys: AffineSystem
    reference: object = None
    u_max: Optional[float] = None
    estimators: object = None
    events: list = field(default_factory=list)

    def __call__(self, x, t):
        res = qp_controller(self.clf, self.est_sys, x, self.estimators, self.u_max, t,
                            self.reference, return_result=True)
        if not res.feasible:
            self.events.append((float(t), np.asarray(x, dtype=float).copy()))
        return res.x

    def vdot_hat(self, x, u, t):
        return vdot_estimated(self.clf, self.est_sys, x, u, self.estimators, t, self.reference).total
