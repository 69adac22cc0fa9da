"""Executable PSS checks for the CLF projection.

Everything here works in the CLF's own coordinates: ``controller(x)`` and
``delta_builder(x)`` receive the state whose norm the bounds talk about. For a
tracking problem, wrap them at a fixed reference time.

Explicit bound functions for a quadratic CLF with ``alpha = c3 r^2`` split as
``alpha_p + alpha_q`` (``alpha_p = theta * alpha``)::

    beta'(r, t) = sqrt(lam_max / lam_min) * r * exp(-kappa t / 2),  kappa = theta c3 / lam_max
    gamma'(s)   = sqrt(upper(alpha_q^-1(s)) / lam_min)

obtained from ``V_dot <= -alpha_p o upper^-1 (V)`` whenever ``V >= upper o
alpha_q^-1(|delta|)`` and the comparison lemma.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .comparison import ComparisonFn, KLBound, compose, power_law, split_alpha
from .dynamics import SimulationDiverged, integrate
from .lp import UnboundedLP


@dataclass(frozen=True)
class PSSBoundParams:
    beta: KLBound
    gamma: ComparisonFn
    rho: ComparisonFn
    alpha_p: ComparisonFn
    alpha_q: ComparisonFn

    def to_dict(self):
        return {k: getattr(self, k).to_dict() for k in ("beta", "gamma", "rho", "alpha_p", "alpha_q")}


def pss_bound_params(clf, theta: float = 0.5, rate_factor: float = 1.0) -> PSSBoundParams:
    """Bound functions for ``clf``; ``rate_factor`` scales the decay rate (for falsification probes)."""
    alpha_p, alpha_q = split_alpha(clf.decay, theta)
    lam_min, lam_max = clf.lam_min, clf.lam_max
    kappa = alpha_p.c / lam_max
    beta = KLBound(rate_factor * kappa / 2.0, power_law(math.sqrt(lam_max / lam_min), 1.0))
    rho = alpha_q.inverted()
    gamma = compose(clf.lower.inverted(), compose(clf.upper, rho))
    return PSSBoundParams(beta, gamma, rho, alpha_p, alpha_q)


def pss_envelope(params: PSSBoundParams, x0, t, sup_delta) -> float:
    r = float(np.linalg.norm(x0)) if np.ndim(x0) else float(x0)
    return params.beta(r, t) + params.gamma(sup_delta)


def smallest_invariant_level(clf, alpha_q: ComparisonFn, mu: float) -> float:
    """Smallest ``c`` with ``B_{alpha_q^-1(mu)}`` inside ``{V <= c}``."""
    if mu < 0:
        raise ValueError("mu must be nonnegative")
    return float(clf.upper(alpha_q.inverse(mu)))


def boundary_points(clf, level: float, n_samples: int) -> np.ndarray:
    """Uniform-angle samples of the ellipse ``{e : e'Pe = level}`` (n = 2)."""
    if level <= 0:
        raise ValueError("sublevel value must be positive")
    if clf.n != 2:
        raise ValueError("boundary sampling is implemented for two-dimensional CLFs")
    L = np.linalg.cholesky(clf.P)
    phi = 2.0 * np.pi * np.arange(n_samples) / n_samples
    circle = np.stack([np.cos(phi), np.sin(phi)], axis=1)
    return math.sqrt(level) * np.linalg.solve(L.T, circle.T).T


@dataclass
class CertificationReport:
    level: float
    n_samples: int
    worst_margin: float
    mu: float
    passed: bool
    certifiable: bool = True
    margins: list = field(default_factory=list)
    points: list = field(default_factory=list)
    unbounded: list = field(default_factory=list)
    note: str = ""

    @property
    def unbounded_everywhere(self) -> bool:
        return len(self.unbounded) == self.n_samples

    def to_dict(self):
        return asdict(self)

    def save_json(self, path):
        with open(path, "w") as fh:
            json.dump(_jsonable(self.to_dict()), fh, indent=2, sort_keys=True)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else ("inf" if v > 0 else "-inf" if v < 0 else "nan")
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def check_boundary_condition(clf, level, controller, delta_builder, alpha_q: ComparisonFn,
                             n_samples: int = 720, nominal=None) -> CertificationReport:
    """Evaluate ``|x| - alpha_q^-1(sup_{Delta(x)} a'k(x) + b)`` on the level set boundary.

    ``nominal(x, u)``, when given, is the model derivative ``V_hat_dot``; any
    amount by which it misses ``-alpha(|x|)`` is added to the sup, so
    controllers that are not CLF-admissible cannot pass on the disturbance
    term alone. Passing means the sufficient boundary condition holds at every
    sampled point; this is a sampled check, not an exhaustive proof.
    """
    pts = boundary_points(clf, level, n_samples)
    margins = np.empty(n_samples)
    mu = 0.0
    unbounded = []
    for i, x in enumerate(pts):
        u = controller(x)
        try:
            s = delta_builder(x).sup_linear(u)
        except UnboundedLP:
            unbounded.append(i)
            margins[i] = -math.inf
            continue
        if nominal is not None:
            s += max(0.0, nominal(x, u) + float(clf.alpha(np.linalg.norm(x))))
        mu = max(mu, s)
        margins[i] = np.linalg.norm(x) - alpha_q.inverse(max(s, 0.0))
    if unbounded:
        return CertificationReport(level, n_samples, -math.inf, math.inf, False, False,
                                   margins.tolist(), pts.tolist(), unbounded,
                                   note=f"uncertainty set unbounded at {len(unbounded)} of "
                                        f"{n_samples} boundary samples")
    worst = float(margins.min())
    return CertificationReport(level, n_samples, worst, mu, worst >= 0, True,
                               margins.tolist(), pts.tolist())


def mu_over_set(samples, controller, delta_builder) -> float:
    """``sup_x sup_{Delta(x)} (a'k(x) + b)`` over a finite sample of the set."""
    samples = list(samples)
    if not samples:
        raise ValueError("sample set must be nonempty")
    return max(delta_builder(x).sup_linear(controller(x)) for x in samples)


@dataclass
class PSSReport:
    max_violation: float
    n_violations: int
    passed: bool
    envelope: np.ndarray
    norms: np.ndarray
    sup_delta: float
    bounded_delta: bool = True


def projected_disturbance(vdot_measured, vdot_hat, alpha_vals):
    """``delta = V_dot - V_hat_dot`` measured against a CLF-compliant nominal derivative.

    When the nominal derivative already meets ``-alpha`` this is the plain
    difference; otherwise (saturated or non-CLF controllers) the shortfall
    counts as disturbance too.
    """
    return np.asarray(vdot_measured) - np.minimum(np.asarray(vdot_hat), -np.asarray(alpha_vals))


def verify_pss_trajectory(errors, t, params: PSSBoundParams, delta_series, slack: float = 0.0,
                          bound_limit: float = 1e6) -> PSSReport:
    """Check ``|x(t_k)| <= beta'(|x_0|, t_k) + gamma'(sup_{j<=k} |delta_j|) + slack`` at every step."""
    errors = np.asarray(errors, dtype=float)
    t = np.asarray(t, dtype=float) - float(t[0])
    delta = np.abs(np.asarray(delta_series, dtype=float))
    norms = np.linalg.norm(errors, axis=1)
    running = np.maximum.accumulate(delta)
    sup_k = np.concatenate([running, running[-1:]]) if len(running) == len(norms) - 1 else running
    env = params.beta(norms[0], t) + np.asarray(params.gamma(sup_k)) + slack
    viol = norms - env
    return PSSReport(float(max(viol.max(), 0.0)), int(np.sum(viol > 0)), bool(np.all(viol <= 0)),
                     env, norms, float(delta.max()) if len(delta) else 0.0,
                     bool(np.all(np.isfinite(delta)) and (delta.max() if len(delta) else 0) < bound_limit))


@dataclass
class InvarianceReport:
    level: float
    n_trajectories: int
    max_V: float
    n_escaped: int
    passed: bool
    diverged: int = 0


def check_forward_invariance(clf, level, controller, true_sys, n_trajectories: int = 100,
                             horizon: float = 2.0, dt: float = 0.005, u_max=None,
                             rel_tol: float = 1e-3) -> InvarianceReport:
    """Simulate from uniformly spaced points of ``{V = level}`` and track ``max V``.

    ``controller(x, t)`` acts on the CLF coordinates directly.
    """
    starts = boundary_points(clf, level, n_trajectories)
    max_V, escaped, diverged = 0.0, 0, 0
    limit = level * (1.0 + rel_tol)
    for x0 in starts:
        try:
            traj = integrate(true_sys, controller, x0, horizon, dt, u_max=u_max)
        except SimulationDiverged:
            diverged += 1
            escaped += 1
            max_V = math.inf
            continue
        v = clf.value(traj.states).max()
        max_V = max(max_V, float(v))
        escaped += int(v > limit)
    return InvarianceReport(level, n_trajectories, max_V, escaped, escaped == 0, diverged)
