"""End-to-end experiments shared by the CLI and the acceptance suite."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .certify import (CertificationReport, InvarianceReport, check_boundary_condition,
                      check_forward_invariance, boundary_points, projected_disturbance,
                      pss_bound_params, verify_pss_trajectory)
from .clf import CLFQPController, PDController, vdot_estimated
from .dynamics import integrate, zero_reference
from .learn import AugmentedController, explore
from .lp import UnboundedLP
from .uncertainty import (Dataset, LipschitzBudget, UncertaintyModel, dataset_slack,
                          fit_label_slack, label_points, pendulum_budget,
                          samples_from_trajectory)

TRACKING_SCHEMA = "tracking-v1"
HEATMAP_SCHEMA = "heatmap-v1"
UNBOUNDED = "unbounded"
EMPTY = "empty"


# ---------------------------------------------------------------------------
# tracking comparison

def angle_error(traj, reference) -> np.ndarray:
    ref = np.array([reference.x_d(t)[0] for t in traj.t])
    return np.abs(traj.states[:, 0] - ref)


@dataclass
class TrackingComparison:
    t: np.ndarray
    baseline: np.ndarray
    final: np.ndarray

    @property
    def baseline_mean(self) -> float:
        return float(np.mean(self.baseline))

    @property
    def final_mean(self) -> float:
        return float(np.mean(self.final))

    @property
    def ratio(self) -> float:
        return self.final_mean / self.baseline_mean if self.baseline_mean > 0 else math.nan

    def save_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write(f"# schema={TRACKING_SCHEMA} baseline_mean={self.baseline_mean!r} "
                     f"final_mean={self.final_mean!r}\n")
            w = csv.writer(fh)
            w.writerow(["t", "abs_err_baseline", "abs_err_final"])
            for row in zip(self.t, self.baseline, self.final):
                w.writerow([format(float(v), ".17g") for v in row])

    @classmethod
    def load_csv(cls, path) -> "TrackingComparison":
        data = np.loadtxt(path, delimiter=",", skiprows=2, ndmin=2)
        return cls(data[:, 0], data[:, 1], data[:, 2])


def compare_tracking(traj_baseline, traj_final, reference) -> TrackingComparison:
    if len(traj_baseline.t) != len(traj_final.t) or not np.allclose(traj_baseline.t, traj_final.t):
        raise ValueError("trajectories must share the same time grid")
    return TrackingComparison(traj_baseline.t.copy(), angle_error(traj_baseline, reference),
                              angle_error(traj_final, reference))


def evaluation_start(setup):
    """Fixed evaluation initial state: the reference start."""
    return setup.reference.x_d(0.0).copy()


def simulate(setup, controller, x0=None, horizon=None, dt=None):
    cfg = setup.config
    x0 = evaluation_start(setup) if x0 is None else x0
    return integrate(setup.true_sys, controller, x0, horizon or cfg.horizon, dt or cfg.dt,
                     value_fn=setup.value_fn, u_max=cfg.u_max)


def qp_tracking_controller(setup, estimators=None):
    return CLFQPController(setup.clf, setup.est_sys, setup.reference, setup.config.u_max, estimators)


# ---------------------------------------------------------------------------
# disturbance bounds and the heatmap

def budget_for(setup) -> LipschitzBudget:
    cfg = setup.config
    b = pendulum_budget(setup.true, setup.est, cfg.lipschitz_safety)
    over = {k: getattr(cfg, k) for k in ("L_A", "L_b", "A_sup", "b_sup") if getattr(cfg, k) is not None}
    if over:
        b = LipschitzBudget(**{**b.to_dict(), **over})
    return b


def uncertainty_model(setup, dataset, estimators=None, slack=0.0) -> UncertaintyModel:
    return UncertaintyModel(dataset, setup.clf, budget_for(setup), estimators, slack,
                            setup.config.polyhedron_cap, setup.reference)


def disturbance_bound(model: UncertaintyModel, x, u, t) -> float:
    """``sup_{Delta(x)} a'u + b``; ``inf`` when the set is unbounded in that direction."""
    try:
        return model.sup(x, u, t)
    except UnboundedLP:
        return math.inf


def bounds_along(model, traj) -> np.ndarray:
    """Disturbance bound at each step of ``traj`` with the input actually applied."""
    return np.array([disturbance_bound(model, x, u, t)
                     for x, u, t in zip(traj.states[:-1], traj.inputs, traj.t[:-1])])


@dataclass
class HeatmapGrid:
    theta_edges: np.ndarray
    omega_edges: np.ndarray
    max_bound: np.ndarray  # nan where empty
    count: np.ndarray
    unbounded: np.ndarray
    meta: dict = field(default_factory=dict)

    def bin_of(self, theta, omega):
        i = int(np.searchsorted(self.theta_edges, theta, side="right") - 1)
        j = int(np.searchsorted(self.omega_edges, omega, side="right") - 1)
        if not (0 <= i < len(self.theta_edges) - 1 and 0 <= j < len(self.omega_edges) - 1):
            return None
        return i, j

    def value_at(self, theta, omega) -> float:
        """Bin maximum; ``inf`` for unbounded bins, ``nan`` outside the grid or for empty bins."""
        b = self.bin_of(theta, omega)
        if b is None or self.count[b] == 0:
            return math.nan
        return math.inf if self.unbounded[b] else float(self.max_bound[b])

    def save_csv(self, path):
        with open(path, "w", newline="") as fh:
            meta = " ".join(f"{k}={v}" for k, v in sorted(self.meta.items()))
            fh.write(f"# schema={HEATMAP_SCHEMA} {meta}\n")
            w = csv.writer(fh)
            w.writerow(["theta_lo", "theta_hi", "omega_lo", "omega_hi", "count", "max_bound"])
            for i in range(len(self.theta_edges) - 1):
                for j in range(len(self.omega_edges) - 1):
                    if self.count[i, j] == 0:
                        v = EMPTY
                    elif self.unbounded[i, j]:
                        v = UNBOUNDED
                    else:
                        v = format(float(self.max_bound[i, j]), ".17g")
                    w.writerow([format(float(self.theta_edges[i]), ".17g"),
                                format(float(self.theta_edges[i + 1]), ".17g"),
                                format(float(self.omega_edges[j]), ".17g"),
                                format(float(self.omega_edges[j + 1]), ".17g"),
                                int(self.count[i, j]), v])

    @classmethod
    def load_csv(cls, path) -> "HeatmapGrid":
        with open(path) as fh:
            header = fh.readline()
            rows = list(csv.DictReader(fh))
        meta = dict(kv.split("=", 1) for kv in header[1:].split() if "=" in kv)
        meta.pop("schema", None)
        th = sorted({float(r["theta_lo"]) for r in rows} | {float(r["theta_hi"]) for r in rows})
        om = sorted({float(r["omega_lo"]) for r in rows} | {float(r["omega_hi"]) for r in rows})
        nt, no = len(th) - 1, len(om) - 1
        mx, cnt, unb = np.full((nt, no), np.nan), np.zeros((nt, no), int), np.zeros((nt, no), bool)
        for k, r in enumerate(rows):
            i, j = divmod(k, no)
            cnt[i, j] = int(r["count"])
            if r["max_bound"] == UNBOUNDED:
                unb[i, j] = True
            elif r["max_bound"] != EMPTY:
                mx[i, j] = float(r["max_bound"])
        return cls(np.array(th), np.array(om), mx, cnt, unb, meta)


def heatmap(dataset: Dataset, model: UncertaintyModel, controller, n_points: int = 100,
            per_point: int = 20, sigma: float = 0.1, theta_range=(-math.pi, math.pi),
            omega_range=(-2 * math.pi, 2 * math.pi), bins=(50, 50), seed=0) -> HeatmapGrid:
    """Bin ``sup_{Delta(x)} a'k(x, t) + b`` over Gaussian samples around training states.

    ``controller(x, t)`` is evaluated at the time stamp of the training point
    the sample was drawn around.
    """
    if not len(dataset):
        raise ValueError("dataset is empty")
    rng = np.random.default_rng(seed)
    centers = rng.choice(len(dataset), size=min(n_points, len(dataset)), replace=False)
    te = np.linspace(*theta_range, bins[0] + 1)
    oe = np.linspace(*omega_range, bins[1] + 1)
    grid = HeatmapGrid(te, oe, np.full(bins, np.nan), np.zeros(bins, int), np.zeros(bins, bool),
                       {"sigma": sigma, "per_point": per_point, "n_points": len(centers),
                        "reconstruction_defaults": True})
    X, T = dataset.X, dataset.t
    for c in np.sort(centers):
        for x in X[c] + sigma * rng.standard_normal((per_point, X.shape[1])):
            b = grid.bin_of(x[0], x[1])
            if b is None:
                continue
            v = disturbance_bound(model, x, controller(x, T[c]), T[c])
            grid.count[b] += 1
            if math.isinf(v):
                grid.unbounded[b] = True
            elif not grid.max_bound[b] >= v:  # also replaces nan
                grid.max_bound[b] = v
    return grid


# ---------------------------------------------------------------------------
# regulation certification scenario

@dataclass
class CertificationOutcome:
    report: CertificationReport
    invariance: Optional[InvarianceReport]
    dataset: Dataset
    slack: np.ndarray


def regulation_controller(setup, kind: str = "qp", estimators=None):
    """Controller for regulating to the upright equilibrium (CLF coordinates = state)."""
    cfg = setup.config
    if kind == "qp":
        return CLFQPController(setup.clf, setup.est_sys, None, cfg.u_max, estimators)
    if kind == "pd":
        return PDController(cfg.kp, cfg.kd, zero_reference(2), cfg.u_max)
    if kind == "learned":
        base = PDController(cfg.kp, cfg.kd, zero_reference(2), cfg.u_max)
        return AugmentedController(base, setup.clf, setup.est_sys, estimators, 1.0, None, cfg.u_max)
    raise ValueError(f"unknown controller kind {kind!r}")


def certify_regulation(setup, kind: str = "qp", estimators=None, level: Optional[float] = None,
                       dt: float = 2e-4, n_starts: int = 120, horizon: float = 0.05,
                       slack_safety: float = 1.25, n_samples: Optional[int] = None,
                       n_trajectories: int = 100, seed: int = 0,
                       run_invariance: bool = True) -> CertificationOutcome:
    """Collect data around ``{V = level}``, check the boundary condition, then simulate.

    Data come from short exploratory runs of the same controller on the true
    system, started just outside the boundary. Invariance is simulated only
    when the boundary check passes, unless ``run_invariance`` is ``"always"``.
    """
    cfg = setup.config
    level = cfg.level if level is None else level
    level = 1.0 if level is None else level
    n_samples = n_samples or cfg.boundary_samples
    ctrl = regulation_controller(setup, kind, estimators)
    rng = np.random.default_rng(seed)
    floor = cfg.effective_explore_floor
    D, trajs = Dataset(), []
    for x0 in boundary_points(setup.clf, 1.05 * level, n_starts):
        tr = integrate(setup.true_sys, lambda x, t: explore(ctrl(x, t), rng, cfg.explore_scale, floor),
                       x0, horizon, dt, value_fn=lambda x, t: setup.clf.value(x), u_max=cfg.u_max)
        trajs.append(tr)
        D.extend(samples_from_trajectory(tr, setup.clf, setup.est_sys, None, estimators,
                                         cfg.label_anchor))
    C = fit_label_slack(trajs, setup.clf, setup.true_sys, setup.est_sys, None, slack_safety,
                        cfg.label_anchor)
    slack = dataset_slack(D, C, setup.clf, setup.est_sys, dt)
    model = UncertaintyModel(D, setup.clf, budget_for(setup), estimators, slack, cfg.polyhedron_cap)
    alpha_q = pss_bound_params(setup.clf, cfg.alpha_split).alpha_q

    def nominal(x, u):
        return vdot_estimated(setup.clf, setup.est_sys, x, u, estimators).total

    report = check_boundary_condition(setup.clf, level, lambda x: ctrl(x, 0.0), model, alpha_q,
                                      n_samples, nominal)
    inv = None
    if run_invariance == "always" or (run_invariance and report.passed):
        inv = check_forward_invariance(setup.clf, level, ctrl, setup.true_sys, n_trajectories,
                                       horizon=2.0, dt=0.005, u_max=cfg.u_max)
    return CertificationOutcome(report, inv, D, slack)


# ---------------------------------------------------------------------------
# PSS envelope runs

def pss_check(setup, traj, vdot_hat_fn, reference, rate_factor: float = 1.0, slack: float = 0.0,
              anchor: Optional[str] = None):
    """Envelope check of one run in error coordinates.

    ``vdot_hat_fn(x, u, t)`` is the model derivative the controller was
    designed against; the projected disturbance is measured relative to it,
    at the points given by ``anchor`` (default: the configured label anchor).
    """
    clf = setup.clf
    ref = reference or zero_reference(clf.n)
    E = traj.states - np.array([ref.x_d(t) for t in traj.t])
    # V measured in the same coordinates as E; traj.vdot may refer to another reference
    vdot = np.diff(clf.value(E)) / np.diff(traj.t)
    X, U, T = label_points(traj, anchor or setup.config.label_anchor)
    Em = X - np.array([ref.x_d(t) for t in T])
    vh = np.array([vdot_hat_fn(x, u, t) for x, u, t in zip(X, U, T)])
    delta = projected_disturbance(vdot, vh, clf.alpha(np.linalg.norm(Em, axis=1)))
    params = pss_bound_params(clf, setup.config.alpha_split, rate_factor)
    return verify_pss_trajectory(E, traj.t, params, delta, slack)
