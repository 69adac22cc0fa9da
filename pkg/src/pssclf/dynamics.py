"""Affine control systems, the uncertain inverted pendulum, and simulation.

The pendulum is a point mass on a massless rod with torque at the base,
angle measured from upright::

    theta_ddot = (g0 / l) * sin(theta) + u / (m * l**2)

so the state ``x = (theta, theta_dot)`` has drift ``f(x) = (theta_dot,
(g0 / l) sin theta)`` and actuation ``g(x) = (0, 1 / (m l**2))``.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

logger = logging.getLogger(__name__)


class SimulationDiverged(RuntimeError):
    """Raised when integration produces a non-finite state."""


@dataclass(frozen=True)
class AffineSystem:
    """``x_dot = f(x) + g(x) u`` with ``f: R^n -> R^n`` and ``g: R^n -> R^{n x m}``."""

    f: Callable[[np.ndarray], np.ndarray]
    g: Callable[[np.ndarray], np.ndarray]
    n: int
    m: int
    name: str = "affine"

    def drift(self, x):
        return np.asarray(self.f(np.asarray(x, dtype=float)), dtype=float)

    def act(self, x):
        return np.asarray(self.g(np.asarray(x, dtype=float)), dtype=float).reshape(self.n, self.m)

    def xdot(self, x, u):
        u = np.atleast_1d(np.asarray(u, dtype=float))
        return self.drift(x) + self.act(x) @ u


@dataclass(frozen=True)
class PendulumParams:
    mass: float = 0.25
    length: float = 0.5
    gravity: float = 9.81
    u_max: float = 5.0

    def __post_init__(self):
        for name in ("mass", "length", "gravity", "u_max"):
            if not getattr(self, name) > 0:
                raise ValueError(f"pendulum {name} must be strictly positive")

    @property
    def inertia(self) -> float:
        return self.mass * self.length ** 2


def pendulum_dynamics(params: PendulumParams, x, u) -> np.ndarray:
    theta, omega = float(x[0]), float(x[1])
    u = float(np.ravel(u)[0]) if np.ndim(u) else float(u)
    return np.array([omega, params.gravity / params.length * math.sin(theta) + u / params.inertia])


def pendulum_system(params: PendulumParams) -> AffineSystem:
    g0_l = params.gravity / params.length
    inv_inertia = 1.0 / params.inertia

    def f(x):
        return np.array([x[1], g0_l * math.sin(x[0])])

    def g(x):
        return np.array([[0.0], [inv_inertia]])

    return AffineSystem(f, g, n=2, m=1, name=f"pendulum(m={params.mass:g}, l={params.length:g})")


def sample_true_system(est: PendulumParams, scale: float, seed=None) -> PendulumParams:
    """Perturb mass and length by independent factors drawn from ``[1 - scale, 1 + scale]``."""
    if not 0.0 <= scale <= 0.3:
        raise ValueError(f"perturbation scale must lie in [0, 0.3], got {scale}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    fm, fl = rng.uniform(1.0 - scale, 1.0 + scale, size=2)
    return replace(est, mass=est.mass * fm, length=est.length * fl)


@dataclass(frozen=True)
class ResidualPair:
    """``A(x) = g(x) - g_hat(x)`` and ``b(x) = f(x) - f_hat(x)``."""

    true_sys: AffineSystem
    est_sys: AffineSystem

    def A(self, x):
        return self.true_sys.act(x) - self.est_sys.act(x)

    def b(self, x):
        return self.true_sys.drift(x) - self.est_sys.drift(x)

    def disturbance(self, x, u):
        return self.A(x) @ np.atleast_1d(u) + self.b(x)


def residual(true_sys: AffineSystem, est_sys: AffineSystem, x):
    if (true_sys.n, true_sys.m) != (est_sys.n, est_sys.m):
        raise ValueError(
            f"dimension mismatch: true system is {true_sys.n}x{true_sys.m}, "
            f"estimated system is {est_sys.n}x{est_sys.m}"
        )
    pair = ResidualPair(true_sys, est_sys)
    return pair.A(x), pair.b(x)


def sampled_lipschitz(fn, low, high, n_pairs=2000, seed=0, max_sep=None) -> float:
    """Largest difference quotient ``|fn(x) - fn(y)| / |x - y|`` over random pairs in a box."""
    rng = np.random.default_rng(seed)
    low, high = np.asarray(low, float), np.asarray(high, float)
    best = 0.0
    for _ in range(n_pairs):
        x = rng.uniform(low, high)
        if max_sep is None:
            y = rng.uniform(low, high)
        else:
            y = np.clip(x + rng.uniform(-max_sep, max_sep, size=x.shape), low, high)
        d = np.linalg.norm(x - y)
        if d < 1e-12:
            continue
        best = max(best, np.linalg.norm(np.asarray(fn(x)) - np.asarray(fn(y)), 2) / d)
    return best


@dataclass(frozen=True)
class Reference:
    """Desired state ``x_d(t)`` and its time derivative."""

    x_d: Callable[[float], np.ndarray]
    xdot_d: Callable[[float], np.ndarray]
    name: str = "reference"


def sinusoid_reference(amplitude: float = math.pi / 3, frequency: float = 1.0) -> Reference:
    a, w = amplitude, frequency

    def x_d(t):
        return np.array([a * math.sin(w * t), a * w * math.cos(w * t)])

    def xdot_d(t):
        return np.array([a * w * math.cos(w * t), -a * w * w * math.sin(w * t)])

    return Reference(x_d, xdot_d, name=f"sinusoid(a={a:g}, w={w:g})")


def zero_reference(n: int = 2) -> Reference:
    z = np.zeros(n)
    return Reference(lambda t: z.copy(), lambda t: z.copy(), name="zero")


def saturate(u, u_max):
    if u_max is None:
        return np.atleast_1d(np.asarray(u, dtype=float))
    return np.clip(np.atleast_1d(np.asarray(u, dtype=float)), -u_max, u_max)


TRAJECTORY_HEADER = ["t", "theta", "theta_dot", "u", "V", "Vdot_measured"]


@dataclass
class Trajectory:
    """Uniformly sampled run: ``N + 1`` states, ``N`` zero-order-hold inputs.

    ``V`` and ``vdot`` are filled when a Lyapunov value function is supplied;
    ``vdot[k]`` is the forward difference over step ``k`` and is aligned with
    ``inputs[k]``.
    """

    t: np.ndarray
    states: np.ndarray
    inputs: np.ndarray
    V: np.ndarray = field(default_factory=lambda: np.zeros(0))
    vdot: np.ndarray = field(default_factory=lambda: np.zeros(0))
    saturated: int = 0

    @property
    def dt(self) -> float:
        return float(self.t[1] - self.t[0])

    def __len__(self):
        return len(self.inputs)

    def save_csv(self, path):
        n_steps = len(self.inputs)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRAJECTORY_HEADER)
            for k in range(n_steps + 1):
                u = self.inputs[k, 0] if k < n_steps else math.nan
                V = self.V[k] if len(self.V) else math.nan
                vd = self.vdot[k] if k < len(self.vdot) else math.nan
                row = [self.t[k], self.states[k, 0], self.states[k, 1], u, V, vd]
                w.writerow([f"{v:.17g}" for v in row])

    @classmethod
    def load_csv(cls, path) -> "Trajectory":
        with open(path, newline="") as fh:
            r = csv.reader(fh)
            header = [h.strip() for h in next(r)]
            if header != TRAJECTORY_HEADER:
                raise ValueError(f"{path}: unexpected trajectory header {header}")
            rows = np.array([[float(v) for v in row] for row in r])
        V = rows[:, 4] if not np.all(np.isnan(rows[:, 4])) else np.zeros(0)
        vdot = rows[:-1, 5] if not np.all(np.isnan(rows[:-1, 5])) else np.zeros(0)
        return cls(t=rows[:, 0], states=rows[:, 1:3].copy(), inputs=rows[:-1, 3:4].copy(), V=V, vdot=vdot)


def rk4_step(sys: AffineSystem, x, u, dt):
    k1 = sys.xdot(x, u)
    k2 = sys.xdot(x + 0.5 * dt * k1, u)
    k3 = sys.xdot(x + 0.5 * dt * k2, u)
    k4 = sys.xdot(x + dt * k3, u)
    return x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def n_steps_for(horizon: float, dt: float) -> int:
    return int(math.floor(horizon / dt + 1e-9))


def integrate(sys: AffineSystem, controller, x0, horizon: float, dt: float,
              value_fn=None, u_max=None, t0: float = 0.0) -> Trajectory:
    """Fixed-step RK4 with the input held constant over each step.

    Parameters
    ----------
    controller : callable
        ``controller(x, t) -> u``, evaluated once at the start of every step.
    value_fn : callable, optional
        ``value_fn(x, t) -> V``; when given, the trajectory carries ``V`` and
        the forward-difference derivative labels.
    u_max : float, optional
        Symmetric saturation applied to every controller output.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    if horizon < dt:
        raise ValueError("horizon must be at least one step")
    n_steps = n_steps_for(horizon, dt)
    t = t0 + dt * np.arange(n_steps + 1)
    states = np.empty((n_steps + 1, sys.n))
    inputs = np.empty((n_steps, sys.m))
    states[0] = np.asarray(x0, dtype=float)
    n_sat = 0
    for k in range(n_steps):
        x = states[k]
        u_raw = np.atleast_1d(np.asarray(controller(x, t[k]), dtype=float))
        u = saturate(u_raw, u_max)
        if u_max is not None and np.any(u != u_raw):
            n_sat += 1
        inputs[k] = u
        x_next = rk4_step(sys, x, u, dt)
        if not np.all(np.isfinite(x_next)):
            raise SimulationDiverged(
                f"{sys.name}: non-finite state at step {k + 1} (t={t[k + 1]:.4g}) "
                f"from x={x.tolist()} with u={u.tolist()}"
            )
        states[k + 1] = x_next
    if n_sat:
        logger.debug("%s: input saturated on %d of %d steps", sys.name, n_sat, n_steps)
    traj = Trajectory(t=t, states=states, inputs=inputs, saturated=n_sat)
    if value_fn is not None:
        traj.V = np.array([value_fn(states[k], t[k]) for k in range(n_steps + 1)])
        traj.vdot = measure_vdot(traj, dt)
    return traj


def measure_vdot(traj: Trajectory, dt: Optional[float] = None) -> np.ndarray:
    """Forward-difference labels ``(V[k+1] - V[k]) / dt`` aligned with ``inputs[k]``."""
    V = np.asarray(traj.V, dtype=float)
    if len(V) < 2:
        raise ValueError("need at least two V samples to differentiate")
    dt = traj.dt if dt is None else dt
    return np.diff(V) / dt


def linearize(sys: AffineSystem, x0=None, h: float = 1e-6):
    """Central-difference Jacobian of the drift and the actuation matrix at ``x0``."""
    x0 = np.zeros(sys.n) if x0 is None else np.asarray(x0, dtype=float)
    A = np.empty((sys.n, sys.n))
    for i in range(sys.n):
        dx = np.zeros(sys.n)
        dx[i] = h
        A[:, i] = (sys.drift(x0 + dx) - sys.drift(x0 - dx)) / (2 * h)
    return A, sys.act(x0)
