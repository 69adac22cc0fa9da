"""Residual estimators, ERM training, controller augmentation, and the episodic loop.

The learned correction to the model-based Lyapunov derivative is
``a_hat(x, grad V)' u + b_hat(x, grad V)``, each head a two-layer ReLU
network on the concatenated state and CLF gradient.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import expit

from .clf import solve_clf_qp, tracking_error, vdot_terms
from .dynamics import SimulationDiverged, integrate, saturate
from .qp import QPResult, box_rows, solve_qp
from .uncertainty import Dataset, dataset_slack, fit_label_slack, samples_from_trajectory

logger = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


class EpisodeError(RuntimeError):
    def __init__(self, episode: int, cause: BaseException):
        super().__init__(f"episode {episode}: {type(cause).__name__}: {cause}")
        self.episode = episode
        self.cause = cause


# ---------------------------------------------------------------------------
# networks

class MLPEstimator:
    """``relu(x W1 + b1) W2 + b2`` with optional per-layer spectral budget."""

    def __init__(self, W1, b1, W2, b2, budget: float = 0.0):
        self.W1 = np.asarray(W1, dtype=float)
        self.b1 = np.asarray(b1, dtype=float)
        self.W2 = np.asarray(W2, dtype=float)
        self.b2 = np.asarray(b2, dtype=float)
        self.budget = float(budget)
        if self.W1.shape[1] != self.b1.shape[0] or self.W2.shape != (self.b1.shape[0], self.b2.shape[0]):
            raise ValueError("inconsistent layer shapes")

    @classmethod
    def init(cls, n_in: int, n_out: int, hidden: int = 200, rng=None, budget: float = 0.0):
        rng = np.random.default_rng(rng)
        W1 = rng.normal(0.0, math.sqrt(2.0 / n_in), (n_in, hidden))
        W2 = rng.normal(0.0, math.sqrt(1.0 / hidden), (hidden, n_out))
        return cls(W1, np.zeros(hidden), W2, np.zeros(n_out), budget)

    @classmethod
    def zeros(cls, n_in: int, n_out: int, hidden: int = 200):
        return cls(np.zeros((n_in, hidden)), np.zeros(hidden), np.zeros((hidden, n_out)), np.zeros(n_out))

    @property
    def n_in(self):
        return self.W1.shape[0]

    @property
    def n_out(self):
        return self.W2.shape[1]

    @property
    def hidden(self):
        return self.W1.shape[1]

    PARAMS = ("W1", "b1", "W2", "b2")

    def params(self):
        return [getattr(self, k) for k in self.PARAMS]

    def copy(self) -> "MLPEstimator":
        return MLPEstimator(*(p.copy() for p in self.params()), budget=self.budget)

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params()])

    def set_flat(self, theta):
        i = 0
        for k in self.PARAMS:
            p = getattr(self, k)
            p[...] = np.reshape(theta[i:i + p.size], p.shape)
            i += p.size

    def forward(self, X, return_cache=False):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        pre = X @ self.W1 + self.b1
        h = np.maximum(pre, 0.0)
        out = h @ self.W2 + self.b2
        return (out, (X, pre, h)) if return_cache else out

    __call__ = forward

    def backward(self, cache, dout):
        """Parameter gradients of ``sum(dout * out)``."""
        X, pre, h = cache
        dW2 = h.T @ dout
        db2 = dout.sum(axis=0)
        dh = (dout @ self.W2.T) * (pre > 0)
        return [X.T @ dh, dh.sum(axis=0), dW2, db2]

    def lipschitz_bound(self) -> float:
        return float(np.linalg.norm(self.W1, 2) * np.linalg.norm(self.W2, 2))

    def to_dict(self) -> dict:
        return {
            "budget": self.budget,
            "layers": [{"name": k, "shape": list(getattr(self, k).shape),
                        "data": getattr(self, k).ravel().tolist()} for k in self.PARAMS],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MLPEstimator":
        arrs = {L["name"]: np.array(L["data"], dtype=float).reshape(L["shape"]) for L in d["layers"]}
        return cls(*(arrs[k] for k in cls.PARAMS), budget=d.get("budget", 0.0))


def mlp_forward(net: MLPEstimator, x, grad_v) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    grad_v = np.asarray(grad_v, dtype=float)
    if x.shape[-1] + grad_v.shape[-1] != net.n_in:
        raise ValueError(f"network expects {net.n_in} inputs, got {x.shape[-1]} + {grad_v.shape[-1]}")
    out = net.forward(np.concatenate([x, grad_v], axis=-1))
    return out[0] if x.ndim == 1 else out


def power_iteration(W, n_iter: int = 1000, tol: float = 1e-13, seed=0) -> float:
    """Top singular value of ``W`` by power iteration on ``W'W``."""
    W = np.atleast_2d(np.asarray(W, dtype=float))
    v = np.random.default_rng(seed).normal(size=W.shape[1])
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(n_iter):
        w = W @ v
        s_new = float(np.linalg.norm(w))
        if s_new == 0.0:
            return 0.0
        v = W.T @ w
        v /= np.linalg.norm(v)
        if abs(s_new - sigma) <= tol * s_new:
            sigma = s_new
            break
        sigma = s_new
    return float(np.linalg.norm(W @ v))


def spectral_normalize(net: MLPEstimator, budget: float, n_iter: int = 1000) -> MLPEstimator:
    """Copy of ``net`` with each weight matrix scaled to operator norm at most ``budget``."""
    if not budget > 0:
        raise ValueError("spectral budget must be positive")
    out = net.copy()
    out.budget = float(budget)
    for k in ("W1", "W2"):
        W = getattr(out, k)
        sigma = power_iteration(W, n_iter)
        if sigma > budget:
            W *= budget / sigma
    return out


# ---------------------------------------------------------------------------
# the estimator pair

@dataclass
class ResidualEstimators:
    """``(a_hat, b_hat)`` heads with fixed input standardization and output scales.

    ``a_hat = out_scale / u_scale * a_net(f)`` and ``b_hat = out_scale * b_net(f)``,
    so the network sees standardized features and inputs.
    """

    a_net: MLPEstimator
    b_net: MLPEstimator
    in_mean: np.ndarray
    in_scale: np.ndarray
    out_scale: float = 1.0
    u_scale: float = 1.0
    fitted: bool = False

    @classmethod
    def init(cls, n: int, m: int, hidden: int = 200, rng=None, budget: float = 0.0):
        rng = np.random.default_rng(rng)
        a = MLPEstimator.init(2 * n, m, hidden, rng, budget)
        b = MLPEstimator.init(2 * n, 1, hidden, rng, budget)
        return cls(a, b, np.zeros(2 * n), np.ones(2 * n), 1.0)

    def features(self, X, G):
        return (np.concatenate([np.atleast_2d(X), np.atleast_2d(G)], axis=1) - self.in_mean) / self.in_scale

    def predict_batch(self, X, G):
        F = self.features(X, G)
        return (self.out_scale / self.u_scale) * self.a_net(F), self.out_scale * self.b_net(F)[:, 0]

    def predict(self, x, grad_v):
        A, B = self.predict_batch(np.asarray(x, dtype=float)[None], np.asarray(grad_v, dtype=float)[None])
        return A[0], float(B[0])

    def lipschitz_bound(self):
        """Lipschitz bounds of ``(a_hat, b_hat)`` in the raw ``(x, grad V)`` input."""
        k = self.out_scale / float(np.min(self.in_scale))
        return k / self.u_scale * self.a_net.lipschitz_bound(), k * self.b_net.lipschitz_bound()

    def copy(self):
        return ResidualEstimators(self.a_net.copy(), self.b_net.copy(), self.in_mean.copy(),
                                  self.in_scale.copy(), self.out_scale, self.u_scale, self.fitted)

    def to_dict(self):
        return {"a_net": self.a_net.to_dict(), "b_net": self.b_net.to_dict(),
                "in_mean": self.in_mean.tolist(), "in_scale": self.in_scale.tolist(),
                "out_scale": self.out_scale, "u_scale": self.u_scale, "fitted": self.fitted}

    @classmethod
    def from_dict(cls, d):
        return cls(MLPEstimator.from_dict(d["a_net"]), MLPEstimator.from_dict(d["b_net"]),
                   np.array(d["in_mean"], dtype=float), np.array(d["in_scale"], dtype=float),
                   float(d["out_scale"]), float(d.get("u_scale", 1.0)), bool(d.get("fitted", True)))


@dataclass
class FitHistory:
    epoch_loss: list
    initial_loss: float
    final_loss: float


def erm_loss_and_grads(est: ResidualEstimators, F, U, r):
    """Mean squared residual error (normalized units) and gradients for both heads."""
    a_out, a_cache = est.a_net.forward(F, return_cache=True)
    b_out, b_cache = est.b_net.forward(F, return_cache=True)
    err = np.sum(a_out * U, axis=1) + b_out[:, 0] - r
    loss = float(np.mean(err ** 2))
    dp = (2.0 / len(r)) * err
    ga = est.a_net.backward(a_cache, dp[:, None] * U)
    gb = est.b_net.backward(b_cache, dp[:, None])
    return loss, ga, gb


def erm_fit(estimators: ResidualEstimators, dataset: Dataset, epochs: int = 200, lr: float = 1e-3,
            momentum: float = 0.9, batch_size: int = 64, seed=0, mask=None,
            refit_scaling: bool = True, select_best: bool = True) -> tuple[ResidualEstimators, FitHistory]:
    """Squared-loss ERM of ``V_dot ~ V_hat_dot_0 + a_hat'u + b_hat`` by momentum SGD.

    ``estimators`` is the starting point (copied, not modified); ``mask``
    selects the training samples. With ``select_best`` the returned weights are
    the epoch-end iterate (or the starting point) with the lowest full training
    loss, which filters out the SGD noise floor. Losses in the history are in
    physical units (``(V_dot)^2``).
    """
    if not len(dataset):
        raise ValueError("dataset is empty")
    idx = np.arange(len(dataset)) if mask is None else np.flatnonzero(mask)
    if idx.size == 0:
        raise ValueError("no training samples selected")
    est = estimators.copy()
    X, G, U = dataset.X[idx], dataset.grad[idx], dataset.U[idx]
    target = dataset.vdot[idx] - dataset.vdot_base[idx]
    if refit_scaling:
        Z = np.concatenate([X, G], axis=1)
        new_mean, new_scale = Z.mean(axis=0), Z.std(axis=0) + 1e-8
        new_out = float(np.sqrt(np.mean(target ** 2))) or 1.0
        new_u = float(np.sqrt(np.mean(np.sum(U ** 2, axis=1)))) or 1.0
        if est.fitted:
            _rescale(est, new_mean, new_scale, new_out, new_u)
        else:
            # an unfitted network has nothing to preserve; keep it O(1) in normalized units
            est.in_mean, est.in_scale, est.out_scale, est.u_scale = new_mean, new_scale, new_out, new_u
    F = est.features(X, G)
    U = U / est.u_scale
    r = target / est.out_scale
    s2 = est.out_scale ** 2
    rng = np.random.default_rng(seed)
    vel_a = [np.zeros_like(p) for p in est.a_net.params()]
    vel_b = [np.zeros_like(p) for p in est.b_net.params()]
    init_loss = s2 * erm_loss_and_grads(est, F, U, r)[0]
    best, best_loss = est.copy(), init_loss
    history = []
    n = len(r)
    for ep in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            bi = order[start:start + batch_size]
            loss, ga, gb = erm_loss_and_grads(est, F[bi], U[bi], r[bi])
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {ep}, batch offset {start} "
                                       f"(lr={lr}, momentum={momentum}, n={n})")
            total += loss * len(bi)
            for net, vel, grads in ((est.a_net, vel_a, ga), (est.b_net, vel_b, gb)):
                for p, v, g in zip(net.params(), vel, grads):
                    v *= momentum
                    v -= lr * g
                    p += v
            if est.a_net.budget > 0:
                est.a_net = spectral_normalize(est.a_net, est.a_net.budget, 50)
                est.b_net = spectral_normalize(est.b_net, est.b_net.budget, 50)
        history.append(s2 * total / n)
        if select_best:
            full = s2 * erm_loss_and_grads(est, F, U, r)[0]
            if full < best_loss:
                best, best_loss = est.copy(), full
    if select_best:
        est = best
    final = s2 * erm_loss_and_grads(est, F, U, r)[0]
    if not math.isfinite(final):
        raise TrainingDiverged(f"non-finite final loss (lr={lr}, n={n})")
    est.fitted = True
    return est, FitHistory(history, init_loss, final)


def _rescale(est: ResidualEstimators, mean, scale, out_scale, u_scale):
    """Change the standardization and output scales without changing predictions."""
    # old features f = (z - m0)/s0, new f' = (z - m1)/s1  =>  f = (f' s1 + m1 - m0)/s0
    ratio = scale / est.in_scale
    shift = (mean - est.in_mean) / est.in_scale
    ka = (est.out_scale / est.u_scale) / (out_scale / u_scale)
    kb = est.out_scale / out_scale
    for net, k in ((est.a_net, ka), (est.b_net, kb)):
        net.b1 = net.b1 + shift @ net.W1
        net.W1 = net.W1 * ratio[:, None]
        net.W2 = net.W2 * k
        net.b2 = net.b2 * k
    est.in_mean, est.in_scale = mean.copy(), scale.copy()
    est.out_scale, est.u_scale = out_scale, u_scale


# ---------------------------------------------------------------------------
# controller augmentation

def augmenting_qp(u_base, phi0, phi1, alpha_val, P=None, q=None, r: float = 0.0,
                  u_max=None, return_result=False):
    """Augmentation ``u'`` minimizing ``0.5 [u;u']'P[u;u'] + q'[u;u'] + r``.

    Subject to ``phi0 + phi1'(u + u') <= -alpha_val`` and ``|u + u'| <= u_max``.
    ``P`` defaults to ``blockdiag(0, I)`` and ``q`` to zero. The result's
    ``objective`` includes the terms that do not depend on ``u'``.
    """
    u_base = np.atleast_1d(np.asarray(u_base, dtype=float))
    m = len(u_base)
    if P is None:
        P = np.zeros((2 * m, 2 * m))
        P[m:, m:] = np.eye(m)
    P = np.asarray(P, dtype=float)
    q = np.zeros(2 * m) if q is None else np.asarray(q, dtype=float)
    if P.shape != (2 * m, 2 * m) or q.shape != (2 * m,):
        raise ValueError("P must be 2m x 2m and q a 2m-vector")
    H = P[m:, m:]
    if np.linalg.eigvalsh(0.5 * (H + H.T)).min() <= 0:
        raise ValueError("the augmentation block of P must be positive definite")
    g = 0.5 * (P[m:, :m] + P[:m, m:].T) @ u_base + q[m:]
    res = solve_clf_qp(phi0, phi1, alpha_val, u_max, H, g, u_base)
    const = 0.5 * u_base @ P[:m, :m] @ u_base + q[:m] @ u_base + r
    res = QPResult(res.x, float(res.objective + const), res.feasible, res.active, res.kkt_solves)
    return res if return_result else res.x


def augmenting_objective(u_base, v, P=None, q=None, r=0.0):
    u_base = np.atleast_1d(np.asarray(u_base, dtype=float))
    m = len(u_base)
    if P is None:
        P = np.zeros((2 * m, 2 * m))
        P[m:, m:] = np.eye(m)
    q = np.zeros(2 * m) if q is None else np.asarray(q, dtype=float)
    z = np.concatenate([u_base, np.atleast_1d(v)])
    return float(0.5 * z @ np.asarray(P) @ z + q @ z + r)


@dataclass
class AugmentedController:
    """``u_0(x, t) + w * augment(u_0, V_hat_dot)``, saturated to the input bounds."""

    base: object
    clf: object
    est_sys: object
    estimators: Optional[ResidualEstimators] = None
    weight: float = 0.0
    reference: object = None
    u_max: Optional[float] = None
    P: Optional[np.ndarray] = None
    q: Optional[np.ndarray] = None
    r: float = 0.0
    events: list = field(default_factory=list)

    def augmentation(self, x, t):
        u0 = np.atleast_1d(self.base(x, t))
        phi0, phi1, _ = vdot_terms(self.clf, self.est_sys, x, self.estimators, t, self.reference)
        e, _ = tracking_error(x, t, self.reference)
        res = augmenting_qp(u0, phi0, phi1, self.clf.alpha(np.linalg.norm(e)), self.P, self.q,
                            self.r, self.u_max, return_result=True)
        if not res.feasible:
            self.events.append((float(t), np.asarray(x, dtype=float).copy()))
        return u0, res.x

    def __call__(self, x, t):
        if self.weight == 0.0:
            return saturate(np.atleast_1d(self.base(x, t)), self.u_max)
        u0, v = self.augmentation(x, t)
        return saturate(u0 + self.weight * v, self.u_max)


# ---------------------------------------------------------------------------
# schedule and exploration

@dataclass(frozen=True)
class TrustSchedule:
    T: int
    steepness: float
    weights: tuple

    @property
    def midpoint(self) -> float:
        return (self.T + 1) / 2.0

    def __getitem__(self, k):
        """Weight for episode ``k`` (1-based)."""
        return self.weights[k - 1]


def trust_weights(T: int, steepness: float = 1.0) -> TrustSchedule:
    """Logistic weights ``1 / (1 + exp(-s (k - (T+1)/2)))`` for ``k = 1..T``."""
    if T < 1:
        raise ValueError("need at least one episode")
    k = np.arange(1, T + 1, dtype=float)
    d = k - (T + 1) / 2.0
    if math.isinf(steepness):
        w = np.where(d > 0, 1.0, np.where(d < 0, 0.0, 0.5))
    else:
        w = expit(steepness * d)
    w = np.maximum.accumulate(np.clip(w, 0.0, 1.0))
    return TrustSchedule(T, float(steepness), tuple(float(v) for v in w))


def explore(u, rng, scale: float = 0.25, floor: float = 0.0):
    """``u + max(scale |u|, floor) * zeta`` with ``zeta`` uniform on ``[-1, 1]^m``."""
    u = np.atleast_1d(np.asarray(u, dtype=float))
    amp = max(scale * float(np.linalg.norm(u)), floor)
    if amp == 0.0:
        return u.copy()
    return u + amp * rng.uniform(-1.0, 1.0, size=u.shape)


# ---------------------------------------------------------------------------
# episodic loop

@dataclass
class EpisodeRecord:
    episode: int
    weight: float
    x0: list
    n_samples: int
    n_train: int
    n_holdout: int
    train_loss_initial: float
    train_loss_final: float
    holdout_loss_before: float
    holdout_loss_after: float
    holdout_all_before: float
    holdout_all_after: float
    holdout_mse_before: float
    holdout_mse_after: float
    tracking_error: float
    saturated_steps: int
    infeasible_events: int

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class DaclyfResult:
    dataset: Dataset
    estimators: Optional[ResidualEstimators]
    controller: object
    episodes: list
    trajectories: list
    holdout: np.ndarray
    schedule: Optional[TrustSchedule]
    label_C: float
    setup: object

    def slack(self, dataset=None):
        """Per-sample label slack for ``dataset`` (default: the aggregated data)."""
        dataset = self.dataset if dataset is None else dataset
        cfg = self.setup.config
        if cfg.vdot_slack is not None:
            return np.full(len(dataset), cfg.vdot_slack)
        return dataset_slack(dataset, self.label_C, self.setup.clf, self.setup.est_sys, cfg.dt,
                             self.setup.reference)


def _mean_abs(v):
    return float(np.mean(np.abs(v))) if len(v) else 0.0


def _mean_sq(v):
    return float(np.mean(np.square(v))) if len(v) else 0.0


def daclyf(config, setup=None, progress=None) -> DaclyfResult:
    """Run the episodic loop for ``config.episodes`` episodes.

    Each episode samples ``x0`` around the reference start, runs the current
    controller with exploration on the true system, aggregates the labelled
    samples, refits the estimators, and rebuilds the controller from the
    baseline with the episode's trust weight.
    """
    from .config import build_setup

    setup = setup or build_setup(config)
    cfg = config
    ss = np.random.SeedSequence(cfg.seed)
    rng_x0, rng_explore, rng_hold, rng_train, rng_init = (np.random.default_rng(s) for s in ss.spawn(5))
    est_sys, true_sys, clf, ref = setup.est_sys, setup.true_sys, setup.clf, setup.reference
    baseline = setup.baseline
    T = int(cfg.episodes)
    schedule = trust_weights(T, cfg.trust_steepness) if T >= 1 else None
    dataset = Dataset()
    holdout = np.zeros(0, dtype=bool)
    estimators = None
    controller = AugmentedController(baseline, clf, est_sys, None, 0.0, ref, cfg.u_max)
    records, trajs = [], []
    floor = cfg.effective_explore_floor
    for k in range(1, T + 1):
        try:
            x0 = ref.x_d(0.0) + rng_x0.uniform(-cfg.x0_radius, cfg.x0_radius, size=2)

            def run_ctrl(x, t, _c=controller):
                return explore(_c(x, t), rng_explore, cfg.explore_scale, floor)

            used, n_events = controller, len(controller.events)
            traj = integrate(true_sys, run_ctrl, x0, cfg.horizon, cfg.dt,
                             value_fn=setup.value_fn, u_max=cfg.u_max)
            trajs.append(traj)
            new = samples_from_trajectory(traj, clf, est_sys, ref, estimators, cfg.label_anchor)
            dataset.extend(new)
            holdout = np.concatenate([holdout, rng_hold.random(len(new)) < cfg.holdout])
            train = ~holdout
            # held-out part of this episode's trajectory, and of all episodes so far
            fresh = holdout.copy()
            fresh[: len(dataset) - len(new)] = False
            before = _mean_abs(dataset.losses(estimators)[fresh])
            mse_before = _mean_sq(dataset.losses(estimators)[fresh])
            before_all = _mean_abs(dataset.losses(estimators)[holdout])
            if estimators is None or not cfg.warm_start:
                start = ResidualEstimators.init(est_sys.n, est_sys.m, cfg.hidden, rng_init,
                                                cfg.spectral_budget)
            else:
                start = estimators
            estimators, hist = erm_fit(start, dataset, cfg.epochs, cfg.lr, cfg.momentum,
                                       cfg.batch_size, rng_train, mask=train)
            after = _mean_abs(dataset.losses(estimators)[fresh])
            mse_after = _mean_sq(dataset.losses(estimators)[fresh])
            after_all = _mean_abs(dataset.losses(estimators)[holdout])
            w = schedule[k]
            controller = AugmentedController(baseline, clf, est_sys, estimators, w, ref, cfg.u_max)
            err = traj.states[:, 0] - np.array([ref.x_d(t)[0] for t in traj.t])
            rec = EpisodeRecord(k, w, x0.tolist(), len(dataset), int(train.sum()),
                                int(holdout.sum()), hist.initial_loss, hist.final_loss, before,
                                after, before_all, after_all, mse_before, mse_after,
                                _mean_abs(err), int(np.sum(traj.saturated)),
                                len(used.events) - n_events)
            records.append(rec)
            logger.info("episode %d: w=%.3f |D|=%d holdout loss %.4g -> %.4g, tracking %.4f",
                        k, w, len(dataset), before, after, rec.tracking_error)
            if progress is not None:
                progress(rec)
        except (SimulationDiverged, TrainingDiverged, FloatingPointError, ValueError) as exc:
            raise EpisodeError(k, exc) from exc
    C = (fit_label_slack(trajs, clf, true_sys, est_sys, ref, cfg.slack_safety, cfg.label_anchor)
         if trajs else 0.0)
    return DaclyfResult(dataset, estimators, controller, records, trajs, holdout, schedule,
                        float(C), setup)
