import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import random_bounded_polyhedron
from pssclf.clf import tracking_error, vdot_true
from pssclf.dynamics import residual
from pssclf.experiments import qp_tracking_controller, simulate, uncertainty_model
from pssclf.learn import ResidualEstimators, explore
from pssclf.lp import InfeasibleLP, UnboundedLP, maximize
from pssclf.uncertainty import (Dataset, LipschitzBudget, Sample, UncertaintyModel,
                                UncertaintyPolyhedron, dataset_slack, epsilon_terms,
                                fit_label_slack, hausdorff_distance, label_points,
                                observed_loss, pendulum_budget, polyhedron_from_offsets,
                                project_onto, samples_from_trajectory, vertex_enumerate)

DIAMOND = UncertaintyPolyhedron(np.array([[1.0, 1], [1, -1], [-1, 1], [-1, -1]]), np.ones(4))


# ---------------------------------------------------------------------------
# LP

def test_lp_diamond_example():
    res = maximize([1.0, 0.0], DIAMOND.Xi, DIAMOND.xi)
    assert res.value == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(res.z, [1.0, 0.0], atol=1e-12)
    assert maximize([1.0, 1.0], DIAMOND.Xi, DIAMOND.xi).value == pytest.approx(1.0)
    assert maximize([0.0, 0.0], DIAMOND.Xi, DIAMOND.xi).value == 0.0


def test_lp_unbounded_and_infeasible():
    with pytest.raises(UnboundedLP):
        maximize([1.0, 0.0], np.array([[0.0, 1.0], [0.0, -1.0]]), np.ones(2))
    with pytest.raises(UnboundedLP):
        maximize([1.0], np.array([[-1.0]]), np.array([1.0]))
    with pytest.raises(InfeasibleLP):
        maximize([1.0], np.array([[1.0], [-1.0]]), np.array([-1.0, -1.0]))


def test_lp_matches_vertex_oracle(rng):
    for _ in range(200):
        d = int(rng.integers(2, 4))
        G, h = random_bounded_polyhedron(rng, d)
        c = rng.normal(size=d)
        poly = UncertaintyPolyhedron(G, h)
        vs = vertex_enumerate(poly)
        assert vs.bounded
        res = maximize(c, G, h)
        assert abs(res.value - vs.sup(c)) <= 1e-8
        assert np.all(G @ res.z <= h + 1e-9)


def test_lp_unbounded_matches_vertex_oracle(rng):
    agree = {True: 0, False: 0}
    for _ in range(200):
        d = int(rng.integers(2, 4))
        # rows confined to a random halfspace leave the opposite direction open
        n = rng.normal(size=d)
        G = rng.normal(size=(int(rng.integers(d, 7)), d))
        G[G @ n < 0] *= -1
        h = rng.uniform(0.1, 3.0, size=len(G))
        c = rng.normal(size=d)
        vs = vertex_enumerate(UncertaintyPolyhedron(G, h))
        oracle = vs.sup(c)
        try:
            lp_val = maximize(c, G, h).value
        except UnboundedLP:
            lp_val = math.inf
        assert math.isinf(oracle) == math.isinf(lp_val)
        if not math.isinf(oracle):
            assert abs(oracle - lp_val) <= 1e-8
        agree[math.isinf(oracle)] += 1
    assert agree[True] > 20 and agree[False] > 20


def test_vertex_enumeration_with_lineality():
    slab = UncertaintyPolyhedron(np.array([[1.0, 0.0], [-1.0, 0.0]]), np.array([2.0, 1.0]))
    vs = vertex_enumerate(slab)
    assert len(vs.lines) == 1
    assert vs.sup([1.0, 0.0]) == pytest.approx(2.0)
    assert vs.sup([-1.0, 0.0]) == pytest.approx(1.0)
    assert math.isinf(vs.sup([0.0, 1.0]))


@given(st.integers(0, 10_000), st.floats(0.1, 10))
def test_lp_positive_scaling(seed, k):
    rng = np.random.default_rng(seed)
    G, h = random_bounded_polyhedron(rng, 3)
    c = rng.normal(size=3)
    base = maximize(c, G, h).value
    assert maximize(k * c, G, h).value == pytest.approx(k * base, rel=1e-9, abs=1e-9)
    assert maximize(c, G, k * h).value == pytest.approx(k * base, rel=1e-9, abs=1e-9)


@given(st.integers(0, 10_000))
def test_symmetric_polyhedron_sup_is_even(seed):
    # rows come in +- pairs, so the set is centrally symmetric: sup of c'z equals sup of -c'z
    rng = np.random.default_rng(seed)
    U = rng.normal(size=(int(rng.integers(3, 9)), 1))
    poly = polyhedron_from_offsets(U, rng.uniform(0.1, 2, len(U)))
    c = np.concatenate([rng.normal(size=1), [1.0]])
    up = maximize(c, poly.Xi, poly.xi).value
    assert maximize(-c, poly.Xi, poly.xi).value == pytest.approx(up, rel=1e-9, abs=1e-12)
    assert up >= 0
    assert poly.sup_linear(c[:1]) == pytest.approx(up, rel=1e-12)


# ---------------------------------------------------------------------------
# samples, losses, offsets

def _sample(vm, vh, x=(0.0, 0.0), u=(1.0,), g=(1.0, 0.0)):
    return Sample(np.array(x, float), np.array(u, float), vm, vh, np.array(g, float), vh)


def test_observed_loss_examples():
    assert observed_loss(_sample(1.0, 1.0)) == 0.0
    assert observed_loss(_sample(1.0, -2.0)) == 3.0
    assert _sample(-0.5, 0.25).loss == 0.75


def test_sample_json_round_trip(tmp_path):
    D = Dataset([_sample(1.0, 0.5, (0.1, 0.2), (0.3,), (2.0, 1.0))])
    D.save_jsonl(tmp_path / "d.jsonl")
    back = Dataset.load_jsonl(tmp_path / "d.jsonl")
    assert len(back) == 1
    np.testing.assert_array_equal(back.X, D.X)
    assert back[0].vdot_measured == 1.0


def test_epsilon_at_data_point_is_loss_plus_slack(setup):
    s = _sample(1.3, 1.0, (0.2, -0.1), (0.5,), setup.clf.grad(np.array([0.2, -0.1])))
    b = LipschitzBudget(1.0, 2.0, 3.0, 4.0)
    assert epsilon_terms(s.x, s, setup.clf, b, slack=0.05) == pytest.approx(0.35)


def test_epsilon_four_term_oracle(setup, rng):
    clf = setup.clf
    budget = LipschitzBudget(0.7, 1.3, 2.1, 0.4)
    est = ResidualEstimators.init(2, 1, 8, rng)
    samples = []
    for _ in range(20):
        xp = rng.uniform(-1, 1, 2)
        gp = clf.grad(xp)
        samples.append(Sample(xp, rng.uniform(-3, 3, 1), rng.normal(), 0.0, gp, rng.normal()))
    D = Dataset(samples)
    model = UncertaintyModel(D, clf, budget, est, slack=0.01, cap=None)
    x = rng.uniform(-1, 1, 2)
    got = model.epsilon(x)
    for k, s in enumerate(samples):
        g, gp, un = clf.grad(x), s.grad_v, abs(s.u[0])
        ap, bp = est.predict(s.x, gp)
        a, b = est.predict(x, g)
        loss = abs(s.vdot_measured - s.vdot_base - ap[0] * s.u[0] - bp)
        eps_l = np.linalg.norm(x - s.x) * min(np.linalg.norm(g), np.linalg.norm(gp))
        eps_inf = np.linalg.norm(g - gp)
        eps_h = abs((a[0] - ap[0]) * s.u[0] + b - bp)
        hand = loss + eps_l * (0.7 * un + 1.3) + eps_inf * (2.1 * un + 0.4) + eps_h + 0.01
        assert got[k] == pytest.approx(hand, rel=1e-12)
        assert epsilon_terms(x, s, clf, budget, est, slack=0.01) == pytest.approx(hand, rel=1e-12)


def test_pendulum_budget_analytic():
    from pssclf.dynamics import PendulumParams

    est, true = PendulumParams(), PendulumParams(0.3, 0.6)
    b = pendulum_budget(true, est, safety=1.0)
    assert b.L_A == 0.0
    assert b.L_b == pytest.approx(abs(9.81 / 0.6 - 9.81 / 0.5))
    assert b.A_sup == pytest.approx(abs(1 / (0.3 * 0.36) - 1 / 0.0625))
    with pytest.raises(ValueError):
        LipschitzBudget(-1.0, 0, 0, 0)


def test_empty_dataset_rejected(setup):
    with pytest.raises(ValueError):
        UncertaintyModel(Dataset(), setup.clf, LipschitzBudget(0, 0, 0, 0))


# ---------------------------------------------------------------------------
# labels

def test_label_points_anchors(setup):
    tr = simulate(setup, qp_tracking_controller(setup), horizon=0.2)
    X, U, T = label_points(tr, "midpoint")
    np.testing.assert_allclose(X, 0.5 * (tr.states[:-1] + tr.states[1:]))
    np.testing.assert_allclose(T, tr.t[:-1] + 0.5 * tr.dt)
    X, U, T = label_points(tr, "start")
    np.testing.assert_array_equal(X, tr.states[:-1])
    with pytest.raises(ValueError):
        label_points(tr, "end")


def test_midpoint_labels_are_second_order(setup):
    """Forward-difference labels converge like dt^2 at midpoints and like dt at step starts."""
    ctrl = qp_tracking_controller(setup)
    errs = {"midpoint": [], "start": []}
    for dt in (0.01, 0.005):
        tr = simulate(setup, ctrl, horizon=2.0, dt=dt)
        for anchor in errs:
            X, U, T = label_points(tr, anchor)
            exact = np.array([vdot_true(setup.clf, setup.true_sys, x, u, t, setup.reference)
                              for x, u, t in zip(X, U, T)])
            errs[anchor].append(np.max(np.abs(tr.vdot - exact)))
    assert errs["midpoint"][0] / errs["midpoint"][1] > 3.0
    assert errs["start"][0] / errs["start"][1] < 2.5
    assert errs["midpoint"][0] < errs["start"][0]


# ---------------------------------------------------------------------------
# containment and monotonicity

@pytest.fixture(scope="module")
def tracking_data(setup):
    rng = np.random.default_rng(7)
    ctrl = qp_tracking_controller(setup)
    trajs = [simulate(setup, lambda x, t: explore(ctrl(x, t), rng, 0.25, 0.5), horizon=3.0)
             for _ in range(2)]
    D = Dataset()
    for tr in trajs:
        D.extend(samples_from_trajectory(tr, setup.clf, setup.est_sys, setup.reference))
    C = fit_label_slack(trajs, setup.clf, setup.true_sys, setup.est_sys, setup.reference)
    slack = dataset_slack(D, C, setup.clf, setup.est_sys, setup.config.dt, setup.reference)
    return D, slack


def _true_pair(setup, x, t):
    e, _ = tracking_error(x, t, setup.reference)
    g = setup.clf.grad(e)
    A, b = residual(setup.true_sys, setup.est_sys, x)
    return A.T @ g, float(b @ g)


def test_true_residual_contained(setup, tracking_data):
    D, slack = tracking_data
    model = uncertainty_model(setup, D, slack=slack)
    rng = np.random.default_rng(3)
    worst = math.inf
    for k in rng.choice(len(D), 100, replace=False):
        x, t = D.X[k] + rng.normal(0, 0.05, 2), D.t[k]
        poly = model.polyhedron(x, t)
        worst = min(worst, float(np.min(poly.slack(*_true_pair(setup, x, t)))))
    assert worst >= -1e-9


def test_zero_slack_loses_containment_somewhere(setup, tracking_data):
    # finite-difference labels carry O(dt^2) error, so the slack term is not decorative
    D, _ = tracking_data
    model = uncertainty_model(setup, D)
    mins = [np.min(model.polyhedron(D.X[k], D.t[k]).slack(*_true_pair(setup, D.X[k], D.t[k])))
            for k in range(0, len(D), 7)]
    assert min(mins) < 0


def test_adding_data_shrinks_support(setup, tracking_data):
    D, slack = tracking_data
    budget = pendulum_budget(setup.true, setup.est)
    rng = np.random.default_rng(11)
    for _ in range(20):
        n = int(rng.integers(50, len(D) - 50))
        small = UncertaintyModel(D.subset(range(n)), setup.clf, budget, None, slack[:n], None,
                                 setup.reference)
        big = UncertaintyModel(D, setup.clf, budget, None, slack, None, setup.reference)
        k = int(rng.integers(len(D)))
        x, t, u = D.X[k] + rng.normal(0, 0.1, 2), D.t[k], rng.uniform(-5, 5, 1)
        try:
            s_small = small.sup(x, u, t)
        except UnboundedLP:
            continue
        assert big.sup(x, u, t) <= s_small + 1e-9


def test_dataset_slack_scales_with_C(setup, tracking_data):
    D, _ = tracking_data
    s1 = dataset_slack(D, 1.0, setup.clf, setup.est_sys, 0.01, setup.reference)
    s2 = dataset_slack(D, 2.5, setup.clf, setup.est_sys, 0.01, setup.reference)
    np.testing.assert_allclose(s2, 2.5 * s1)
    assert np.all(s1 >= 0.01)
    assert len(dataset_slack(Dataset(), 1.0, setup.clf, setup.est_sys, 0.01)) == 0


def test_cap_keeps_nearest(setup, tracking_data):
    D, slack = tracking_data
    model = UncertaintyModel(D, setup.clf, pendulum_budget(setup.true, setup.est), None, slack,
                             cap=25, reference=setup.reference)
    x = D.X[10]
    idx = model.nearest(x)
    d = np.linalg.norm(D.X - x, axis=1)
    assert len(idx) == 25 and d[idx].max() <= np.sort(d)[24] + 1e-15
    assert model.polyhedron(x).Xi.shape[0] == 50


# ---------------------------------------------------------------------------
# projection and Hausdorff distance

def test_projection_examples():
    np.testing.assert_allclose(project_onto([3.0, 0.0], DIAMOND.Xi, DIAMOND.xi), [1.0, 0.0])
    np.testing.assert_allclose(project_onto([1.0, 1.0], DIAMOND.Xi, DIAMOND.xi), [0.5, 0.5])
    np.testing.assert_array_equal(project_onto([0.1, 0.2], DIAMOND.Xi, DIAMOND.xi), [0.1, 0.2])


def test_hausdorff_examples():
    assert hausdorff_distance(DIAMOND, DIAMOND) == 0.0
    assert hausdorff_distance(DIAMOND, DIAMOND.scaled(2.0)) == pytest.approx(1.0)
    box = UncertaintyPolyhedron(np.vstack([np.eye(2), -np.eye(2)]), np.ones(4))
    # farthest box corner (1, 1) lies sqrt(2)/2 from the diamond edge
    assert hausdorff_distance(DIAMOND, box) == pytest.approx(math.sqrt(0.5))


def test_projection_against_grid(rng):
    for _ in range(20):
        G, h = random_bounded_polyhedron(rng, 2)
        p = rng.normal(0, 4, 2)
        z = project_onto(p, G, h)
        g = np.stack(np.meshgrid(np.linspace(-3.2, 3.2, 641), np.linspace(-3.2, 3.2, 641)), -1)
        g = g.reshape(-1, 2)
        g = g[np.all(g @ G.T <= h, axis=1)]
        assert np.linalg.norm(z - p) <= np.min(np.linalg.norm(g - p, axis=1)) + 1e-12
        assert np.all(G @ z <= h + 1e-9)
