"""End-to-end acceptance checks, one test per criterion.

Each test records a one-line verdict; the lines are printed at the end of the
pytest run (see ``conftest.py``) and when this file is run as a script.
"""

import math
import time

import numpy as np
import pytest

from oracles import grid_minimize_1d
from pssclf.certify import check_boundary_condition, pss_bound_params
from pssclf.clf import qp_controller, tracking_error, vdot_estimated, vdot_terms
from pssclf.config import ExperimentConfig, build_setup
from pssclf.dynamics import residual
from pssclf import experiments as ex
from pssclf.learn import (ResidualEstimators, augmenting_qp, daclyf, erm_loss_and_grads,
                          power_iteration)
from pssclf.lp import UnboundedLP, maximize
from pssclf.uncertainty import UncertaintyModel, UncertaintyPolyhedron, vertex_enumerate

RESULTS = {}


def record(n, passed, detail):
    line = f"criterion {n}: {'PASS' if passed else 'FAIL'}  {detail}"
    RESULTS[n] = line
    print(line)
    return passed


@pytest.fixture(scope="module")
def learned():
    """Default 10-episode run, pinned seed."""
    t0 = time.perf_counter()
    res = daclyf(ExperimentConfig())
    return res, time.perf_counter() - t0


# ---------------------------------------------------------------------------

def test_criterion_1_containment(learned):
    res, _ = learned
    s = res.setup
    t0 = time.perf_counter()
    slack = res.slack()
    models = {"model-only": (ex.uncertainty_model(s, res.dataset, None, slack), None),
              "learned": (ex.uncertainty_model(s, res.dataset, res.estimators, slack), res.estimators)}
    rng = np.random.default_rng(2024)
    n = 1000
    # half near the collected data, half uniform over the operating box
    k = rng.integers(len(res.dataset), size=n // 2)
    X = np.vstack([res.dataset.X[k] + 0.1 * rng.standard_normal((n // 2, 2)),
                   rng.uniform(-math.pi, math.pi, (n // 2, 2))])
    T = np.concatenate([res.dataset.t[k], rng.uniform(0, s.config.horizon, n // 2)])
    worst = {}
    for name, (model, est) in models.items():
        w = math.inf
        for x, t in zip(X, T):
            e, _ = tracking_error(x, t, s.reference)
            g = s.clf.grad(e)
            A, b = residual(s.true_sys, s.est_sys, x)
            a_true, b_true = A.T @ g, float(b @ g)
            if est is not None:  # the learned set bounds what the estimators leave over
                a_hat, b_hat = est.predict(x, g)
                a_true, b_true = a_true - a_hat, b_true - b_hat
            w = min(w, float(np.min(model.polyhedron(x, t).slack(a_true, b_true))))
        worst[name] = w
    elapsed = time.perf_counter() - t0
    ok = min(worst.values()) >= -1e-9 and elapsed < 60
    record(1, ok, f"min constraint slack {worst['model-only']:.3g} (model-only), "
                  f"{worst['learned']:.3g} (learned) over {n} states; {elapsed:.1f}s")
    assert ok


def test_criterion_2_lp_vs_vertices():
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    worst, unb_agree, n_unb = 0.0, 0, 0
    for i in range(500):
        d = 2 + i % 2
        G = np.vstack([np.eye(d), -np.eye(d), rng.normal(size=(int(rng.integers(2, 8)), d))])
        h = rng.uniform(0.1, 3.0, len(G))
        poly = UncertaintyPolyhedron(G, h)
        vs = vertex_enumerate(poly)
        assert vs.bounded
        if i % 2:
            u = rng.normal(size=d - 1)  # the uncertainty-set objective a'u + b
            lp, oracle = poly.sup_linear(u), vs.sup(np.append(u, 1.0))
        else:
            c = rng.normal(size=d)
            lp, oracle = maximize(c, G, h).value, vs.sup(c)
        worst = max(worst, abs(lp - oracle))
    for i in range(200):
        d = 2 + i % 2
        nrm = rng.normal(size=d)
        G = rng.normal(size=(int(rng.integers(d, 7)), d))
        G[G @ nrm < 0] *= -1
        h = rng.uniform(0.1, 3.0, len(G))
        c = rng.normal(size=d)
        oracle = vertex_enumerate(UncertaintyPolyhedron(G, h)).sup(c)
        try:
            lp = maximize(c, G, h).value
        except UnboundedLP:
            lp = math.inf
        n_unb += math.isinf(oracle)
        unb_agree += math.isinf(oracle) == math.isinf(lp)
        if not math.isinf(oracle) and not math.isinf(lp):
            worst = max(worst, abs(lp - oracle))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-8 and unb_agree == 200 and elapsed < 30
    record(2, ok, f"max |LP - vertex| {worst:.2e} on 500 bounded; unbounded detection agrees "
                  f"{unb_agree}/200 ({n_unb} unbounded); {elapsed:.1f}s")
    assert ok


def test_criterion_3_qp_vs_grid():
    s = build_setup(ExperimentConfig())
    rng = np.random.default_rng(3)
    worst = {"qp_controller": 0.0, "augmenting_qp": 0.0}
    mismatched = 0
    est = ResidualEstimators.init(2, 1, 16, rng)
    for i in range(500):
        x, t = rng.uniform(-math.pi, math.pi, 2), rng.uniform(0, 10)
        u_max = rng.uniform(1, 8)
        estimators = est if i % 2 else None
        res = qp_controller(s.clf, s.est_sys, x, estimators, u_max, t, s.reference, return_result=True)
        phi0, phi1, _ = vdot_terms(s.clf, s.est_sys, x, estimators, t, s.reference)
        a = s.clf.alpha(np.linalg.norm(x - s.reference.x_d(t)))
        _, val = grid_minimize_1d(lambda u: 0.5 * u ** 2, lambda u: phi0 + phi1[0] * u <= -a,
                                  -u_max, u_max)
        mismatched += res.feasible != np.isfinite(val)
        if res.feasible and np.isfinite(val):
            worst["qp_controller"] = max(worst["qp_controller"], abs(res.objective - val))
    for _ in range(500):
        u0, phi0, phi1 = rng.uniform(-5, 5), rng.normal(0, 2), rng.normal()
        a, u_max = rng.uniform(0, 1), 5.0
        L = rng.normal(size=(2, 2))
        P, q, r = L @ L.T + 0.1 * np.eye(2), rng.normal(size=2), rng.normal()
        res = augmenting_qp([u0], phi0, [phi1], a, P, q, r, u_max, return_result=True)
        obj = lambda v: 0.5 * (P[0, 0] * u0 ** 2 + 2 * P[0, 1] * u0 * v + P[1, 1] * v ** 2) \
            + q[0] * u0 + q[1] * v + r
        _, val = grid_minimize_1d(obj, lambda v: phi0 + phi1 * (u0 + v) <= -a, -u_max - u0, u_max - u0)
        mismatched += res.feasible != np.isfinite(val)
        if res.feasible and np.isfinite(val):
            worst["augmenting_qp"] = max(worst["augmenting_qp"], abs(res.objective - val))
    ok = max(worst.values()) <= 1e-6 and mismatched == 0
    record(3, ok, f"max objective gap {worst['qp_controller']:.2e} (qp_controller), "
                  f"{worst['augmenting_qp']:.2e} (augmenting_qp); feasibility mismatches {mismatched}")
    assert ok


def test_criterion_4_monotonicity():
    s = build_setup(ExperimentConfig())
    out = ex.certify_regulation(s, "qp", level=1.0, run_invariance=False)
    D, slack = out.dataset, out.slack
    ctrl = ex.regulation_controller(s, "qp")
    alpha_q = pss_bound_params(s.clf, s.config.alpha_split).alpha_q
    nominal = lambda x, u: vdot_estimated(s.clf, s.est_sys, x, u).total
    budget = ex.budget_for(s)
    rng = np.random.default_rng(4)
    mu_viol = margin_viol = unbounded_small = 0
    for _ in range(100):
        big = np.sort(rng.choice(len(D), int(rng.integers(100, 1000)), replace=False))
        small = np.sort(rng.choice(big, int(rng.integers(5, len(big))), replace=False))
        reps = []
        for idx in (small, big):
            model = UncertaintyModel(D.subset(idx), s.clf, budget, None, slack[idx], cap=None)
            reps.append(check_boundary_condition(s.clf, 1.0, lambda x: ctrl(x, 0.0), model, alpha_q,
                                                 180, nominal))
        unbounded_small += bool(reps[0].unbounded)
        mu_viol += reps[1].mu > reps[0].mu * (1 + 1e-12) + 1e-12
        m_small, m_big = np.array(reps[0].margins), np.array(reps[1].margins)
        tol = 1e-9 * (1 + np.abs(np.where(np.isfinite(m_small), m_small, 0)).max())
        margin_viol += int(np.sum(m_big < m_small - tol))
    ok = mu_viol == 0 and margin_viol == 0
    record(4, ok, f"100 nested pairs: mu violations {mu_viol}, margin violations {margin_viol} "
                  f"({unbounded_small} smaller sets unbounded somewhere)")
    assert ok


def _pss_runs(res):
    """50 seeded runs: perturbed tracking under PD / QP / learned, plus exact-model regulation."""
    s = res.setup
    exact = build_setup(ExperimentConfig(perturbation=0.0))
    qp = ex.qp_tracking_controller(s)
    learned = res.controller
    model_vdot = lambda x, u, t: vdot_estimated(s.clf, s.est_sys, x, u, None, t, s.reference).total
    learned_vdot = lambda x, u, t: vdot_estimated(s.clf, s.est_sys, x, u, res.estimators, t,
                                                  s.reference).total
    kinds = [("pd", s.baseline, model_vdot), ("qp", qp, qp.vdot_hat), ("learned", learned, learned_vdot)]
    rng = np.random.default_rng(5)
    runs = []
    for k in range(36):
        name, ctrl, vh = kinds[k % 3]
        x0 = s.reference.x_d(0.0) + rng.uniform(-0.2, 0.2, 2)
        runs.append((f"tracking/{name}", s, ex.simulate(s, ctrl, x0=x0), vh, s.reference))
    reg = ex.regulation_controller(exact, "qp")
    for _ in range(14):
        x0 = np.array([rng.choice([-1, 1]) * rng.uniform(0.2, 1.5), 0.0])
        runs.append(("exact/regulation", exact, ex.simulate(exact, reg, x0=x0), reg.vdot_hat, None))
    return runs


def test_criterion_5_pss_envelope(learned):
    res, _ = learned
    slack = res.setup.config.dt  # C = 1 in state units per second
    viol, probe, groups, unbounded = 0, 0, {}, 0
    for group, s, traj, vh, ref in _pss_runs(res):
        rep = ex.pss_check(s, traj, vh, ref, slack=slack)
        probe_rep = ex.pss_check(s, traj, vh, ref, rate_factor=10.0, slack=slack)
        viol += rep.n_violations
        unbounded += not rep.bounded_delta
        fired = probe_rep.n_violations > 0
        probe += fired
        g = groups.setdefault(group, [0, 0])
        g[0] += 1
        g[1] += fired
    ok = viol == 0 and probe >= 1
    detail = ", ".join(f"{g} {f}/{n}" for g, (n, f) in sorted(groups.items()))
    record(5, ok, f"50 runs, envelope violations {viol}; 10x-rate probe fires on {probe} runs "
                  f"({detail}); unbounded-delta flags {unbounded}")
    assert ok


def test_criterion_6_forward_invariance():
    exact = build_setup(ExperimentConfig(perturbation=0.0))
    good = ex.certify_regulation(exact, "qp", level=1.0)
    assert good.report.n_samples >= 720
    neg = ex.certify_regulation(build_setup(ExperimentConfig(kp=0.5)), "pd", level=0.5,
                                run_invariance="always")
    pert = ex.certify_regulation(build_setup(ExperimentConfig()), "qp", level=1.0)
    ok_good = good.report.passed and good.invariance is not None and good.invariance.passed
    ok_neg = (not neg.report.passed) and neg.invariance.n_escaped > 0
    ok = ok_good and ok_neg
    inv = good.invariance
    record(6, ok, f"exact-model QP level 1: check {'passes' if good.report.passed else 'fails'} "
                  f"(margin {good.report.worst_margin:.3g}), {inv.n_escaped if inv else '-'}/100 escape, "
                  f"max V {inv.max_V if inv else float('nan'):.4f}; negative control "
                  f"{neg.invariance.n_escaped}/100 escape; 30%-perturbed QP check "
                  f"{'passes' if pert.report.passed else 'fails'} (margin {pert.report.worst_margin:.3g})")
    assert ok


def test_criterion_7_episodic_improvement(learned):
    res, elapsed = learned
    s = res.setup
    base = ex.simulate(s, s.baseline)
    final = ex.simulate(s, res.controller)
    cmp = ex.compare_tracking(base, final, s.reference)
    drops = [(e.episode, e.holdout_loss_before, e.holdout_loss_after) for e in res.episodes[1:]]
    held = all(after < before for _, before, after in drops)
    ok = cmp.ratio <= 0.5 and held and elapsed < 600
    worst = max(after / before for _, before, after in drops)
    record(7, ok, f"tracking {cmp.final_mean:.4f} vs PD {cmp.baseline_mean:.4f} (ratio {cmp.ratio:.3f}); "
                  f"held-out loss drops in episodes 2-10: {held} (worst after/before {worst:.3f}); "
                  f"run {elapsed:.0f}s")
    assert ok


def test_criterion_8_heatmap_claim(learned):
    res, _ = learned
    s = res.setup
    slack = res.slack()
    before = ex.uncertainty_model(s, res.dataset, None, slack)
    after = ex.uncertainty_model(s, res.dataset, res.estimators, slack)
    b_qp = ex.bounds_along(before, ex.simulate(s, ex.qp_tracking_controller(s)))
    b_final = ex.bounds_along(after, ex.simulate(s, res.controller))
    frac = float(np.mean(b_final < b_qp))
    ok = frac >= 0.8
    record(8, ok, f"final bound below pre-learning QP bound at {frac:.1%} of {len(b_qp)} steps "
                  f"(medians {np.median(b_final):.3g} vs {np.median(b_qp):.3g})")
    assert ok


def test_criterion_9_gradients():
    rng = np.random.default_rng(9)
    worst_grad = 0.0
    for _ in range(20):
        est = ResidualEstimators.init(2, 1, 16, rng)
        F, U, r = rng.normal(size=(40, 4)), rng.normal(size=(40, 1)), rng.normal(size=40)
        _, ga, gb = erm_loss_and_grads(est, F, U, r)
        for net, grads in ((est.a_net, ga), (est.b_net, gb)):
            theta = net.flat()
            fd = np.zeros_like(theta)
            for i in range(len(theta)):
                for sgn in (1, -1):
                    th = theta.copy()
                    th[i] += sgn * 1e-6
                    net.set_flat(th)
                    fd[i] += sgn * erm_loss_and_grads(est, F, U, r)[0] / 2e-6
            net.set_flat(theta)
            an = np.concatenate([g.ravel() for g in grads])
            worst_grad = max(worst_grad, np.linalg.norm(an - fd) / np.linalg.norm(fd))
    worst_sv = 0.0
    for _ in range(50):
        W = rng.normal(size=tuple(rng.integers(2, 60, size=2)))
        worst_sv = max(worst_sv, abs(power_iteration(W) - np.linalg.svd(W, compute_uv=False)[0]))
    ok = worst_grad <= 1e-5 and worst_sv <= 1e-3
    record(9, ok, f"max relative gradient error {worst_grad:.2e} at 20 points; "
                  f"max spectral-norm error {worst_sv:.2e} on 50 matrices")
    assert ok


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q"]))
