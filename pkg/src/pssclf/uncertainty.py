"""Data-driven polyhedral uncertainty sets over the Lyapunov-derivative residual.

For a test state ``x`` and every data point ``(x', u')`` the residual pair
``(a, b)`` at ``x`` must satisfy ``|a'u' + b| <= eps(x, x', u')`` where::

    eps = loss(x', u')
          + eps_L(x, x') * (L_A |u'| + L_b)
          + eps_inf(x, x') * (|A|_inf |u'| + |b|_inf)
          + eps_H(x, x', u')
          + slack

with ``eps_L = |x - x'| * min(|grad V(x)|, |grad V(x')|)``, ``eps_inf =
|grad V(x) - grad V(x')|`` and ``eps_H`` the change in the learned
correction between ``x'`` and ``x``. All norms are Euclidean. ``slack``
absorbs the error of finite-difference derivative labels.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import Optional

import numpy as np

from .clf import tracking_error, vdot_true
from .dynamics import PendulumParams
from .lp import LPResult, UnboundedLP, maximize


@dataclass
class Sample:
    """One measurement ``((x, u), V_dot)`` with cached model quantities.

    ``vdot_base`` is the model-only estimate; ``vdot_hat`` adds the learned
    correction that was current when the sample was cached.
    """

    x: np.ndarray
    u: np.ndarray
    vdot_measured: float
    vdot_hat: float
    grad_v: np.ndarray
    vdot_base: Optional[float] = None
    a_hat: Optional[np.ndarray] = None
    b_hat: Optional[float] = None
    t: float = 0.0

    @property
    def loss(self) -> float:
        return observed_loss(self)

    def to_json(self) -> str:
        d = {
            "x": [float(v) for v in self.x],
            "u": [float(v) for v in np.atleast_1d(self.u)],
            "vdot_measured": float(self.vdot_measured),
            "vdot_hat": float(self.vdot_hat),
            "grad_v": [float(v) for v in self.grad_v],
            "vdot_base": None if self.vdot_base is None else float(self.vdot_base),
            "a_hat": None if self.a_hat is None else [float(v) for v in np.atleast_1d(self.a_hat)],
            "b_hat": None if self.b_hat is None else float(self.b_hat),
            "t": float(self.t),
        }
        return json.dumps(d, allow_nan=False)

    @classmethod
    def from_json(cls, line: str) -> "Sample":
        d = json.loads(line)
        return cls(
            x=np.array(d["x"], dtype=float),
            u=np.array(d["u"], dtype=float),
            vdot_measured=float(d["vdot_measured"]),
            vdot_hat=float(d["vdot_hat"]),
            grad_v=np.array(d["grad_v"], dtype=float),
            vdot_base=d.get("vdot_base"),
            a_hat=None if d.get("a_hat") is None else np.array(d["a_hat"], dtype=float),
            b_hat=d.get("b_hat"),
            t=float(d.get("t", 0.0)),
        )


def observed_loss(s: Sample) -> float:
    return abs(s.vdot_measured - s.vdot_hat)


class Dataset:
    """Append-only collection of samples with stacked array views."""

    def __init__(self, samples=()):
        self._samples: list[Sample] = []
        self._arrays = None
        self.extend(samples)

    def __len__(self):
        return len(self._samples)

    def __iter__(self):
        return iter(self._samples)

    def __getitem__(self, i):
        return self._samples[i]

    def append(self, s: Sample):
        self._samples.append(s)
        self._arrays = None

    def extend(self, samples):
        for s in samples:
            self._samples.append(s)
        self._arrays = None

    def subset(self, idx) -> "Dataset":
        return Dataset([self._samples[i] for i in idx])

    def _stack(self):
        if self._arrays is None:
            S = self._samples
            base = [s.vdot_base if s.vdot_base is not None else s.vdot_hat for s in S]
            self._arrays = {
                "X": np.array([s.x for s in S], dtype=float),
                "U": np.array([np.atleast_1d(s.u) for s in S], dtype=float),
                "vdot": np.array([s.vdot_measured for s in S], dtype=float),
                "vdot_hat": np.array([s.vdot_hat for s in S], dtype=float),
                "base": np.array(base, dtype=float),
                "grad": np.array([s.grad_v for s in S], dtype=float),
                "t": np.array([s.t for s in S], dtype=float),
            }
        return self._arrays

    @property
    def X(self):
        return self._stack()["X"]

    @property
    def U(self):
        return self._stack()["U"]

    @property
    def vdot(self):
        return self._stack()["vdot"]

    @property
    def vdot_base(self):
        return self._stack()["base"]

    @property
    def grad(self):
        return self._stack()["grad"]

    @property
    def t(self):
        return self._stack()["t"]

    def estimator_outputs(self, estimators):
        if estimators is None or not len(self):
            m = self.U.shape[1] if len(self) else 1
            return np.zeros((len(self), m)), np.zeros(len(self))
        return estimators.predict_batch(self.X, self.grad)

    def vdot_hat(self, estimators=None):
        A, B = self.estimator_outputs(estimators)
        return self.vdot_base + np.sum(A * self.U, axis=1) + B

    def losses(self, estimators=None):
        """Observed loss against the model augmented with ``estimators``."""
        return np.abs(self.vdot - self.vdot_hat(estimators))

    def recached(self, estimators) -> "Dataset":
        """Copy with ``vdot_hat`` and estimator caches recomputed for ``estimators``."""
        A, B = self.estimator_outputs(estimators)
        out = []
        for s, a, b in zip(self._samples, A, B):
            base = s.vdot_base if s.vdot_base is not None else s.vdot_hat
            out.append(Sample(s.x, s.u, s.vdot_measured, float(base + a @ np.atleast_1d(s.u) + b),
                              s.grad_v, base, a.copy(), float(b), s.t))
        return Dataset(out)

    def save_jsonl(self, path):
        with open(path, "w") as fh:
            for s in self._samples:
                fh.write(s.to_json() + "\n")

    @classmethod
    def load_jsonl(cls, path) -> "Dataset":
        with open(path) as fh:
            return cls(Sample.from_json(line) for line in fh if line.strip())


LABEL_ANCHORS = ("midpoint", "start")


def label_points(traj, anchor: str = "midpoint"):
    """States, inputs, and times that the forward-difference labels are attached to.

    ``(V[k+1] - V[k]) / dt`` is a second-order estimate of ``V_dot`` at the
    middle of step ``k`` (the input is held over the step) but only a
    first-order estimate at its start. ``"midpoint"`` pairs label ``k`` with
    ``((x_k + x_{k+1}) / 2, u_k, t_k + dt / 2)``; ``"start"`` with ``(x_k, u_k, t_k)``.
    """
    n = len(traj.inputs)
    if anchor == "midpoint":
        X = 0.5 * (traj.states[:n] + traj.states[1:n + 1])
        T = traj.t[:n] + 0.5 * np.diff(traj.t[:n + 1])
    elif anchor == "start":
        X, T = traj.states[:n], traj.t[:n]
    else:
        raise ValueError(f"label anchor must be one of {LABEL_ANCHORS}, got {anchor!r}")
    return X, traj.inputs, T


def samples_from_trajectory(traj, clf, est_sys, reference=None, estimators=None,
                            anchor: str = "midpoint"):
    """Turn a simulated run into samples labelled with forward-difference ``V_dot``."""
    out = []
    for x, u, t, vd in zip(*label_points(traj, anchor), traj.vdot):
        e, xd_dot = tracking_error(x, t, reference)
        gv = clf.grad(e)
        base = float((est_sys.xdot(x, u) - xd_dot) @ gv)
        a_hat = b_hat = None
        vhat = base
        if estimators is not None:
            a_hat, b_hat = estimators.predict(x, gv)
            vhat = base + float(a_hat @ u + b_hat)
        out.append(Sample(np.array(x, dtype=float), u.copy(), float(vd), vhat, gv, base, a_hat,
                          None if b_hat is None else float(b_hat), float(t)))
    return out


@dataclass(frozen=True)
class LipschitzBudget:
    """Lipschitz constants and sup-norm bounds of ``A`` and ``b`` on the operating region."""

    L_A: float
    L_b: float
    A_sup: float
    b_sup: float
    L_a_hat: Optional[float] = None
    L_b_hat: Optional[float] = None

    def __post_init__(self):
        for name in ("L_A", "L_b", "A_sup", "b_sup"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    def to_dict(self):
        return {"L_A": self.L_A, "L_b": self.L_b, "A_sup": self.A_sup, "b_sup": self.b_sup,
                "L_a_hat": self.L_a_hat, "L_b_hat": self.L_b_hat}


def pendulum_budget(true: PendulumParams, est: PendulumParams, safety: float = 1.1) -> LipschitzBudget:
    """Analytic budget on the box ``|x|_inf <= pi``.

    ``A`` is constant (``L_A = 0``); ``b(x) = (0, dg sin theta)`` with ``dg =
    g0/l - g0/l_hat`` so both its Lipschitz constant and sup norm are ``|dg|``.
    """
    dA = abs(1.0 / true.inertia - 1.0 / est.inertia)
    dg = abs(true.gravity / true.length - est.gravity / est.length)
    return LipschitzBudget(L_A=0.0, L_b=safety * dg, A_sup=safety * dA, b_sup=safety * dg)


def label_error_bound(trajectories, clf, true_sys, reference=None, safety: float = 2.0,
                      anchor: str = "midpoint") -> float:
    """Fitted bound on the forward-difference label error, ``safety * max |V_meas - V_dot|``.

    Uses the true system, so it is a simulation-side calibration of the
    additive slack rather than something a deployed system could compute.
    """
    worst = 0.0
    for traj in trajectories:
        for x, u, t, vd in zip(*label_points(traj, anchor), traj.vdot):
            worst = max(worst, abs(vd - vdot_true(clf, true_sys, x, u, t, reference)))
    return safety * worst


def model_vddot(clf, sys, x, u, t: float = 0.0, reference=None, h: float = 1e-6) -> float:
    """``d^2 V / dt^2`` along the model flow with the input held fixed.

    Uses a forward-difference Jacobian of the closed-loop vector field and a
    central difference of the reference velocity.
    """
    x = np.asarray(x, dtype=float)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    e, xd_dot = tracking_error(x, t, reference)
    f0 = sys.xdot(x, u)
    J = np.column_stack([(sys.xdot(x + h * ei, u) - f0) / h for ei in np.eye(len(x))])
    xdd_d = 0.0 if reference is None else (reference.xdot_d(t + h) - reference.xdot_d(t - h)) / (2 * h)
    ed = f0 - xd_dot
    edd = J @ f0 - xdd_d
    return float(2.0 * ed @ clf.P @ ed + 2.0 * e @ clf.P @ edd)


def label_error_scale(X, U, T, clf, est_sys, dt: float, reference=None) -> np.ndarray:
    """Per-sample scale ``dt * (|V_ddot_model| / 2 + 1)`` of the forward-difference error."""
    v = np.array([model_vddot(clf, est_sys, x, u, t, reference) for x, u, t in zip(X, U, T)])
    return dt * (0.5 * np.abs(v) + 1.0)


def fit_label_slack(trajectories, clf, true_sys, est_sys, reference=None,
                    safety: float = 2.0, anchor: str = "midpoint") -> float:
    """Fitted ``C`` with ``|V_meas - V_dot| <= C * label_error_scale`` on every recorded step.

    Uses the true system, so like ``label_error_bound`` it is a
    simulation-side calibration.
    """
    worst = 0.0
    for traj in trajectories:
        n = len(traj.inputs)
        X, U, T = label_points(traj, anchor)
        w = label_error_scale(X, U, T, clf, est_sys, traj.dt, reference)
        exact = np.array([vdot_true(clf, true_sys, x, u, t, reference) for x, u, t in zip(X, U, T)])
        if n:
            worst = max(worst, float(np.max(np.abs(traj.vdot[:n] - exact) / w)))
    return safety * worst


def dataset_slack(dataset, C: float, clf, est_sys, dt: float, reference=None) -> np.ndarray:
    if not len(dataset):
        return np.zeros(0)
    return C * label_error_scale(dataset.X, dataset.U, dataset.t, clf, est_sys, dt, reference)


def epsilon_terms(x, s: Sample, clf, budget: LipschitzBudget, estimators=None,
                  t: float = 0.0, reference=None, slack: float = 0.0) -> float:
    """Total bound ``eps(x, x', u')`` for a single data point (reference path)."""
    e, _ = tracking_error(x, t, reference)
    g = clf.grad(e)
    gp = np.asarray(s.grad_v, dtype=float)
    u = np.atleast_1d(s.u)
    un = float(np.linalg.norm(u))
    if estimators is None:
        loss = abs(s.vdot_measured - (s.vdot_base if s.vdot_base is not None else s.vdot_hat))
        eps_h = 0.0
    else:
        ap, bp = estimators.predict(s.x, gp)
        a, b = estimators.predict(np.asarray(x, float), g)
        base = s.vdot_base if s.vdot_base is not None else s.vdot_hat
        loss = abs(s.vdot_measured - (base + float(ap @ u) + float(bp)))
        eps_h = abs(float((a - ap) @ u) + float(b) - float(bp))
    eps_l = np.linalg.norm(np.asarray(x, float) - s.x) * min(np.linalg.norm(g), np.linalg.norm(gp))
    eps_inf = np.linalg.norm(g - gp)
    return float(loss + eps_l * (budget.L_A * un + budget.L_b)
                 + eps_inf * (budget.A_sup * un + budget.b_sup) + eps_h + slack)


@dataclass
class UncertaintyPolyhedron:
    """``{z = (a, b) : Xi z <= xi}`` with rows ``+-[u', 1]``."""

    Xi: np.ndarray
    xi: np.ndarray
    anchor: Optional[np.ndarray] = None
    lp_iterations: int = 0

    @property
    def dim(self) -> int:
        return self.Xi.shape[1]

    def slack(self, a, b):
        z = np.concatenate([np.atleast_1d(a), [float(b)]])
        return self.xi - self.Xi @ z

    def contains(self, a, b, tol=1e-9) -> bool:
        return bool(np.all(self.slack(a, b) >= -tol))

    def scaled(self, factor) -> "UncertaintyPolyhedron":
        return UncertaintyPolyhedron(self.Xi.copy(), factor * self.xi, self.anchor)

    def lp(self, u) -> LPResult:
        c = np.concatenate([np.atleast_1d(np.asarray(u, dtype=float)), [1.0]])
        try:
            res = maximize(c, self.Xi, self.xi)
        except UnboundedLP as exc:
            raise UnboundedLP(
                "uncertainty set is unbounded in this direction: insufficiently diverse data"
            ) from exc
        self.lp_iterations += res.iterations
        return res

    def sup_linear(self, u) -> float:
        return self.lp(u).value


def sup_linear(poly: UncertaintyPolyhedron, u) -> float:
    """``sup (a'u + b)`` over the polyhedron; raises UnboundedLP when unbounded."""
    return poly.sup_linear(u)


def polyhedron_from_offsets(U, eps, anchor=None) -> UncertaintyPolyhedron:
    U = np.atleast_2d(np.asarray(U, dtype=float))
    rows = np.hstack([U, np.ones((len(U), 1))])
    eps = np.asarray(eps, dtype=float)
    return UncertaintyPolyhedron(np.vstack([rows, -rows]), np.concatenate([eps, eps]), anchor)


class UncertaintyModel:
    """Builds ``Delta(x)`` from a fixed dataset snapshot.

    Per-sample quantities that do not depend on the test state (losses,
    estimator outputs, input norms) are computed once. ``cap`` keeps only the
    nearest data points by ``|x - x'|``; ``cap=None`` uses every point.
    ``slack`` is a scalar or one value per sample.
    """

    def __init__(self, dataset: Dataset, clf, budget: LipschitzBudget, estimators=None,
                 slack: float = 0.0, cap: Optional[int] = 500, reference=None):
        if not len(dataset):
            raise ValueError("cannot build an uncertainty set from an empty dataset")
        self.dataset = dataset
        self.clf = clf
        self.budget = budget
        self.estimators = estimators
        self.slack = np.broadcast_to(np.asarray(slack, dtype=float), (len(dataset),)).copy()
        self.cap = cap
        self.reference = reference
        self.X = dataset.X
        self.U = dataset.U
        self.G = dataset.grad
        self.unorm = np.linalg.norm(self.U, axis=1)
        self.gnorm = np.linalg.norm(self.G, axis=1)
        self.A_hat, self.b_hat = dataset.estimator_outputs(estimators)
        self.loss = dataset.losses(estimators)

    def epsilon(self, x, t: float = 0.0, idx=None):
        """Offsets ``eps(x, x'_j, u'_j)`` for data indices ``idx`` (all when None)."""
        x = np.asarray(x, dtype=float)
        e, _ = tracking_error(x, t, self.reference)
        g = self.clf.grad(e)
        sel = slice(None) if idx is None else idx
        X, G, U = self.X[sel], self.G[sel], self.U[sel]
        un, gn, loss = self.unorm[sel], self.gnorm[sel], self.loss[sel]
        eps_l = np.linalg.norm(X - x, axis=1) * np.minimum(np.linalg.norm(g), gn)
        eps_inf = np.linalg.norm(G - g, axis=1)
        b = self.budget
        eps = loss + eps_l * (b.L_A * un + b.L_b) + eps_inf * (b.A_sup * un + b.b_sup) + self.slack[sel]
        if self.estimators is not None:
            a_x, b_x = self.estimators.predict(x, g)
            eps = eps + np.abs(np.sum((a_x - self.A_hat[sel]) * U, axis=1) + b_x - self.b_hat[sel])
        return eps

    def nearest(self, x):
        if self.cap is None or self.cap >= len(self.X):
            return np.arange(len(self.X))
        d = np.linalg.norm(self.X - np.asarray(x, dtype=float), axis=1)
        return np.sort(np.argpartition(d, self.cap - 1)[: self.cap])

    def polyhedron(self, x, t: float = 0.0) -> UncertaintyPolyhedron:
        idx = self.nearest(x)
        return polyhedron_from_offsets(self.U[idx], self.epsilon(x, t, idx), np.asarray(x, float))

    __call__ = polyhedron

    def sup(self, x, u, t: float = 0.0) -> float:
        return self.polyhedron(x, t).sup_linear(u)


def build_polyhedron(dataset, x, clf, budget, estimators=None, t: float = 0.0, reference=None,
                     slack: float = 0.0, cap=None) -> UncertaintyPolyhedron:
    return UncertaintyModel(dataset, clf, budget, estimators, slack, cap, reference).polyhedron(x, t)


@dataclass
class VertexSet:
    vertices: np.ndarray
    rays: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    lines: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))

    @property
    def bounded(self) -> bool:
        return len(self.rays) == 0 and len(self.lines) == 0

    def sup(self, c) -> float:
        """Maximum of ``c'z`` over the polyhedron using its V-representation."""
        c = np.asarray(c, dtype=float)
        tol = 1e-9 * max(1.0, np.abs(c).max())
        if len(self.lines) and np.any(np.abs(self.lines @ c) > tol):
            return math.inf
        if len(self.rays) and np.any(self.rays @ c > tol):
            return math.inf
        if not len(self.vertices):
            raise ValueError("polyhedron has no vertices")
        return float(np.max(self.vertices @ c))


def _unique_rows(M, tol):
    out = []
    for row in M:
        if not any(np.linalg.norm(row - r) <= tol * max(1.0, np.linalg.norm(r)) for r in out):
            out.append(row)
    return np.array(out).reshape(len(out), M.shape[1])


def vertex_enumerate(poly: UncertaintyPolyhedron, tol: float = 1e-9) -> VertexSet:
    """Vertices, extreme rays, and lineality of ``{Xi z <= xi}`` for dimension <= 3.

    Vertices are intersections of ``d`` linearly independent constraint
    hyperplanes that satisfy every row. Extreme rays of the recession cone
    ``{Xi r <= 0}`` come from ``d - 1`` independent rows.
    """
    Xi, xi = np.asarray(poly.Xi, float), np.asarray(poly.xi, float)
    n_rows, d = Xi.shape
    if d > 3:
        raise ValueError(f"vertex enumeration supports dimension <= 3, got {d}")
    rank = np.linalg.matrix_rank(Xi)
    if rank < d:
        # P = row-space part + lineality; enumerate the row-space part in its own coordinates
        _, _, Vt = np.linalg.svd(Xi)
        Q = Vt[:rank].T
        if rank == 0:
            inner = VertexSet(np.zeros((1, 0)) if np.all(xi >= -tol) else np.zeros((0, 0)),
                              np.zeros((0, 0)), np.zeros((0, 0)))
        else:
            inner = vertex_enumerate(UncertaintyPolyhedron(Xi @ Q, xi), tol)
        rays = inner.rays @ Q.T if len(inner.rays) else np.zeros((0, d))
        return VertexSet(inner.vertices @ Q.T, rays, Vt[rank:])
    scale = 1.0 + np.abs(xi)

    combos = np.array(list(combinations(range(n_rows), d)))
    M = Xi[combos]
    ok = np.abs(np.linalg.det(M)) > 1e-12
    verts = np.zeros((0, d))
    if np.any(ok):
        Z = np.linalg.solve(M[ok], xi[combos[ok]][..., None])[..., 0]
        feas = np.all(Z @ Xi.T - xi <= tol * scale * 10, axis=1)
        verts = _unique_rows(Z[feas], 1e-9)

    rays = []
    for sub in combinations(range(n_rows), d - 1):
        S = Xi[list(sub)]
        _, sv, Vt = np.linalg.svd(S)
        if np.sum(sv > 1e-12) < d - 1:
            continue
        r = Vt[-1]
        for cand in (r, -r):
            if np.all(Xi @ cand <= tol):
                rays.append(cand / np.linalg.norm(cand))
    rays = _unique_rows(np.array(rays), 1e-9) if rays else np.zeros((0, d))
    return VertexSet(verts, rays, np.zeros((0, d)))


def project_onto(p, Xi, xi, tol: float = 1e-9):
    """Euclidean projection of ``p`` onto ``{Xi z <= xi}`` (small dimension).

    Enumerates active sets: the projection is the feasible point among the
    projections onto faces whose multipliers are all nonnegative.
    """
    p = np.asarray(p, dtype=float)
    d = len(p)
    scale = 1.0 + np.abs(xi)
    if np.all(Xi @ p - xi <= tol * scale):
        return p.copy()
    best, best_d = None, math.inf
    for size in range(1, d + 1):
        for sub in combinations(range(len(xi)), size):
            S = Xi[list(sub)]
            gram = S @ S.T
            if abs(np.linalg.det(gram)) < 1e-12:
                continue
            lam = np.linalg.solve(gram, S @ p - xi[list(sub)])
            if np.any(lam < -tol):
                continue
            z = p - S.T @ lam
            if np.all(Xi @ z - xi <= tol * scale * 10):
                dist = np.linalg.norm(z - p)
                if dist < best_d:
                    best, best_d = z, dist
    if best is None:
        raise ValueError("projection failed; is the polyhedron empty?")
    return best


def hausdorff_distance(p1: UncertaintyPolyhedron, p2: UncertaintyPolyhedron) -> float:
    """Symmetric Hausdorff distance between two bounded polyhedra.

    The distance to a convex set is convex, so its maximum over a polytope
    is attained at a vertex; each vertex is projected onto the other set.
    """
    if p1.dim != p2.dim:
        raise ValueError("polyhedra have different dimensions")
    v1, v2 = vertex_enumerate(p1), vertex_enumerate(p2)
    if not (v1.bounded and v2.bounded):
        raise ValueError("Hausdorff distance requires bounded polyhedra")
    d12 = max(np.linalg.norm(v - project_onto(v, p2.Xi, p2.xi)) for v in v1.vertices)
    d21 = max(np.linalg.norm(v - project_onto(v, p1.Xi, p1.xi)) for v in v2.vertices)
    return float(max(d12, d21))
