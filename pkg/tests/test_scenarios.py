import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ccmpc.geometry import GmmPrediction, ObstacleModes, PolytopeObstacle, fit_prediction, pose_to_faces
from ccmpc.planners import ClosedLoopTrace, HorizonMode, PlannerKind
from ccmpc.scenarios import (IntersectionConfig, IntersectionScene, LaneChangeConfig, SceneKind, TrialConfig,
                             TrialRecord, aggregate, assumption_table, evaluate_collision_rate,
                             gen_lane_change_predictions, run_trial, run_trials)

CFG = LaneChangeConfig()


def test_mode_count_sequence():
    pred = gen_lane_change_predictions(CFG.T - 1, CFG.T, 0, CFG)
    assert [pred.mode_count(tau, 0) for tau in pred.taus()] == [2] + [1] * (CFG.T - 1)
    assert pred.modes_nonincreasing()
    assert pred.times(3) == list(range(4, CFG.T + 1))


def test_covariance_decay():
    pred = gen_lane_change_predictions(CFG.T - 1, CFG.T, 0, CFG)
    for tau in range(1, CFG.T - 1):
        for t in range(tau + 2, CFG.T + 1):
            a = np.linalg.norm(pred.get(tau, t, 0).joint_covs[0])
            b = np.linalg.norm(pred.get(tau + 1, t, 0).joint_covs[0])
            assert math.sqrt(b / a) == pytest.approx(math.sqrt(0.5), rel=1e-12)


@settings(max_examples=30)
@given(st.integers(0, 2 ** 32 - 1), st.sampled_from([0, 1]))
def test_generated_predictions_pass_mean_shift_check(seed, true_mode):
    cfg = replace(CFG, true_mode=true_mode)
    pred = gen_lane_change_predictions(cfg.T - 1, cfg.T, seed, cfg)
    report = assumption_table(pred, cfg.epsilon, cfg.T)
    assert report.rows and report.passed
    # the generator keeps a margin below the bound
    assert all(r["h"] <= cfg.noise_margin * r["gamma_g"] + 1e-12 for r in report.table())


def test_config_validation():
    for bad in (dict(T=1), dict(epsilon=0.5), dict(dt=0.0), dict(true_mode=2)):
        with pytest.raises(ValueError):
            LaneChangeConfig(**bad)
    with pytest.raises(ValueError):
        IntersectionConfig(true_modes=(0,))


def point_trace(points):
    return ClosedLoopTrace([np.zeros(4)] + [np.array([p[0], p[1], 0.0, 0.0]) for p in points], [], [])


def two_mode_prediction(centres, weights, sigma):
    obs = PolytopeObstacle.rectangle(2.0, 1.0)
    pred = GmmPrediction(4)
    means = np.array([pose_to_faces((cx, cy, 0.0), obs) for cx, cy in centres])
    covs = np.array([sigma ** 2 * np.eye(20) for _ in centres])
    pred.add(0, 1, 0, ObstacleModes(np.array(weights), means, covs))
    return pred


def test_collision_rate_far_is_zero():
    pred = two_mode_prediction([(0.0, 0.0), (5.0, 0.0)], [0.5, 0.5], 0.01)
    rep = evaluate_collision_rate(point_trace([(50.0, 20.0)]), pred.at_step, 10_000, 0)
    assert rep.rate == 0.0 and rep.per_step == [0.0]


@pytest.mark.parametrize("w", [0.2, 0.5, 0.9])
def test_collision_rate_at_mode_centre(w):
    pred = two_mode_prediction([(0.0, 0.0), (30.0, 0.0)], [w, 1 - w], 1e-3)
    n = 10_000
    rep = evaluate_collision_rate(point_trace([(0.0, 0.0)]), pred.at_step, n, 1)
    assert abs(rep.rate - w) <= 4 * math.sqrt(w * (1 - w) / n)


@pytest.mark.parametrize("point", [(1.5, 0.3), (2.4, -0.6), (0.0, 1.2)])
def test_collision_rate_matches_point_in_polytope(point):
    obs = PolytopeObstacle.rectangle(2.0, 1.0)
    rng = np.random.default_rng(7)

    def poses(n):
        xy = rng.multivariate_normal([0.5, 0.0], [[0.8, 0.2], [0.2, 0.3]], size=n)
        return np.column_stack([xy, np.zeros(n)])

    pred = fit_prediction({(0, 1): [poses(50_000)]}, obs)
    n = 10_000
    rep = evaluate_collision_rate(point_trace([point]), pred.at_step, n, 3, contact_tol=0.0)
    direct = np.mean([obs.contains_point(p, point) for p in poses(n)])
    sigma = math.sqrt(max(direct * (1 - direct), 1e-4) / n)
    assert abs(rep.rate - direct) <= 3 * math.sqrt(2) * sigma


def record(seed, kind, feasible, cost):
    return TrialRecord(seed, kind, feasible, None if feasible else 3, cost, 2.0 + seed, 0.0, 0.1 * seed)


def test_aggregate_is_a_fold():
    recs = [record(0, PlannerKind.NOMINAL, True, -1.0), record(1, PlannerKind.NOMINAL, False, math.nan),
            record(2, PlannerKind.NOMINAL, True, -3.0), record(0, PlannerKind.ROBUST, True, 1.0)]
    rows = aggregate(recs)
    assert rows == aggregate(list(reversed(recs)))
    nom, rob = rows
    assert nom.planner is PlannerKind.NOMINAL and nom.n_trials == 3
    assert nom.feasibility == pytest.approx(2 / 3) and nom.cost == -2.0 and nom.travel_time == 3.0
    assert nom.worst_solve_time == pytest.approx(0.1)
    assert rob.feasibility == 1.0 and rob.cost == 1.0


def test_lane_change_trial_deterministic():
    cfg = TrialConfig(planners=(PlannerKind.NOMINAL,), n_trials=1, collision_samples=2000)
    a, ra = run_trials(cfg)
    b, rb = run_trials(cfg)
    strip = (lambda rs: [replace(r, worst_solve_time=0.0) for r in rs])
    assert strip(ra) == strip(rb)
    assert a[0].feasibility == 1.0 and a[0].collision_rate <= CFG.epsilon
    with pytest.raises(ValueError):
        run_trials(cfg, 0)


def test_lane_change_nominal_cheaper_than_robust():
    cfg = TrialConfig(collision_samples=1000)
    nom, _, _ = run_trial(cfg, PlannerKind.NOMINAL, 0)
    rob, _, _ = run_trial(cfg, PlannerKind.ROBUST, 0)
    assert nom.feasible and rob.feasible
    assert nom.cost < rob.cost


def test_intersection_predictions():
    scene = IntersectionScene(IntersectionConfig(), 0)
    pred0 = scene.prediction(0)
    assert pred0.obstacles(0) == [0, 1]
    assert [pred0.mode_count(0, j) for j in (0, 1)] == [2, 2]
    pred3 = scene.prediction(3)
    assert [pred3.mode_count(3, j) for j in (0, 1)] == [1, 1]
    assert pred3.times(3) == list(range(4, 4 + scene.cfg.T))
    assert scene.prediction(3) is pred3


def test_intersection_smoke():
    cfg = TrialConfig(scene=SceneKind.T_INTERSECTION_LITE, intersection=IntersectionConfig(n_steps=6),
                      collision_samples=1000)
    rec, trace, scene = run_trial(cfg, PlannerKind.ROBUST, 0)
    assert rec.feasible and len(trace.states) == 7
    assert trace.plans[0].mode is HorizonMode.RECEDING
    assert any(p.mode is HorizonMode.SHRINKING for p in trace.plans)
    assert trace.states[-1][0] > trace.states[0][0]
    assert 0.0 <= rec.collision_rate <= cfg.intersection.epsilon
