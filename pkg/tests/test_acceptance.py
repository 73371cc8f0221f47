"""Acceptance suite: one group of tests per criterion.

A summary line per criterion (PASS or FAIL, with observed values) is printed
at the end of the pytest run.
"""

import math
import time
from dataclasses import replace

import numpy as np
import pytest
from scipy import stats

from ccmpc.cli import main
from ccmpc.constraints import allocate_risk, nominal_value, robust_value
from ccmpc.dynamics import BicycleParams, bicycle_jacobians, bicycle_rhs, zoh_matrices
from ccmpc.gmm import GaussianMixture, gmm_var_cvar, inverse_normal_cdf, normal_cdf, sample
from ccmpc.misocp import SolveStatus, solve, solve_by_enumeration
from ccmpc.planners import (HorizonMode, HorizonPolicy, PlannerKind, build_contingency, build_nominal, run_mpc,
                            solve_built, verify_recursive_feasibility)
from ccmpc.risk_bench import BenchConfig, BenchMethod, run_bench, solve_cc_mta, solve_cvar_dr, solve_cvar_saa
from ccmpc.scenarios import (LaneChangeConfig, LaneChangeScene, TrialConfig, assumption_table,
                             gen_lane_change_predictions, run_trial)

from _instances import random_misocp

pytestmark = pytest.mark.slow

M = BenchMethod
CFG = LaneChangeConfig()
SHRINK = HorizonPolicy(HorizonMode.SHRINKING, CFG.T)
ORDER_PAIRS = [  # (left, relation, right) over per-repetition optima
    (M.CVAR_DR, ">", M.CVAR_SAA),
    (M.CVAR_SAA, "~", M.CVAR_CUT),
    (M.CVAR_SAA, ">", M.CC_SCENARIO),
    (M.CVAR_CUT, ">", M.CC_SCENARIO),
    (M.CC_SCENARIO, ">=", M.CC_MRA),
    (M.CC_MRA, ">=", M.CC_MTA),
]
NEAR = 0.1  # "approximately equal" band for x* in the bench ordering


def criterion(number, title):
    return pytest.mark.criterion(number, title)


# ---------------------------------------------------------------------------
# shared runs


@pytest.fixture(scope="module")
def bench():
    start = time.perf_counter()
    results = run_bench(BenchConfig())
    elapsed = time.perf_counter() - start
    xs = {m: np.array([r.x_star for r in sorted((r for r in results if r.method is m), key=lambda r: r.seed)])
          for m in M}
    return results, xs, elapsed


def _holds(a, rel, b):
    if rel == ">":
        return a > b
    if rel == ">=":
        return a >= b
    return np.abs(a - b) <= NEAR


@pytest.fixture(scope="module")
def lane_runs():
    """Lane-change trials for both OV intents and all planners: {(intent, kind): [(record, trace, scene)]}."""
    out = {}
    for intent in (0, 1):
        cfg = TrialConfig(lane_change=replace(CFG, true_mode=intent), n_trials=10, collision_samples=10_000)
        for kind in PlannerKind:
            out[intent, kind] = [run_trial(cfg, kind, trial) for trial in range(cfg.n_trials)]
    return out


def random_sequence(rng):
    cfg = replace(CFG, true_mode=int(rng.integers(2)), noise_scale=float(rng.uniform(0.1, 1.0)),
                  ov_p1=float(rng.uniform(4.0, 14.0)), sigma_accel=float(rng.uniform(0.5, 1.5)))
    return cfg, gen_lane_change_predictions(cfg.T - 1, cfg.T, int(rng.integers(2 ** 32)), cfg)


@pytest.fixture(scope="module")
def robust_sequences():
    start = time.perf_counter()
    rng = np.random.default_rng(20240)
    runs = []
    for _ in range(200):
        cfg, pred = random_sequence(rng)
        scene = LaneChangeScene(cfg, pred)
        runs.append((cfg, pred, scene, run_mpc(PlannerKind.ROBUST, SHRINK, scene)))
    return runs, time.perf_counter() - start


# ---------------------------------------------------------------------------
# 1. bench reproduction


@criterion(1, "bench reproduction")
def test_c1_mta_true_moments(record_property):
    x = solve_cc_mta(BenchConfig().truth(), 0.05)
    record_property("mta_x_star", f"{x:.6f}")
    assert x == pytest.approx(11.6449, abs=1e-3)


@criterion(1, "bench reproduction")
def test_c1_mean_violation(bench, record_property):
    results, _, _ = bench
    cfg = BenchConfig()
    n = cfg.n_test * cfg.repetitions
    band = cfg.epsilon + 1.96 * math.sqrt(cfg.epsilon * (1 - cfg.epsilon) / n)
    means = {m: float(np.mean([r.violation_rate for r in results if r.method is m])) for m in M}
    record_property("mean_violation", ", ".join(f"{m.value}={v:.4f}" for m, v in means.items()))
    assert all(v <= band for v in means.values())


@criterion(1, "bench reproduction")
def test_c1_ordering(bench, record_property):
    _, xs, _ = bench
    fractions = {f"{a.value}{rel}{b.value}": float(np.mean(_holds(xs[a], rel, xs[b]))) for a, rel, b in ORDER_PAIRS}
    joint = np.ones(len(xs[M.CC_MTA]), dtype=bool)
    for a, rel, b in ORDER_PAIRS:
        joint &= _holds(xs[a], rel, xs[b])
    record_property("pair_fractions", ", ".join(f"{k}:{v:.2f}" for k, v in fractions.items()))
    record_property("mean_x_star", ", ".join(f"{m.value}={xs[m].mean():.4f}" for m in M))
    record_property("full_order_reps", f"{int(joint.sum())}/{joint.size}")
    assert joint.sum() >= 90


@criterion(1, "bench reproduction")
def test_c1_runtime(bench, record_property):
    record_property("bench_seconds", f"{bench[2]:.1f}")
    assert bench[2] < 120.0


# ---------------------------------------------------------------------------
# 2. DR offset


@criterion(2, "DR offset gamma/epsilon")
def test_c2_dr_offset(record_property):
    cfg = BenchConfig()
    worst = 0.0
    for seed in range(20):
        s = sample(cfg.truth(), cfg.n_train, seed)
        worst = max(worst, abs(solve_cvar_dr(s, 0.05, 0.04) - solve_cvar_saa(s, 0.05) - 0.8))
    record_property("max_offset_error", f"{worst:.2e}")
    assert worst <= 1e-9


# ---------------------------------------------------------------------------
# 3. recursive feasibility


@criterion(3, "robust recursive feasibility over 200 sequences")
def test_c3_assumptions_hold(robust_sequences):
    for cfg, pred, _, _ in robust_sequences[0]:
        assert pred.modes_nonincreasing()
        assert assumption_table(pred, cfg.epsilon, cfg.T).passed


@criterion(3, "robust recursive feasibility over 200 sequences")
def test_c3_no_counterexample(robust_sequences, record_property):
    runs, elapsed = robust_sequences
    started = [r for r in runs if r[3].plans[0].feasible]
    bad = [n for n, r in enumerate(runs) if r[3].plans[0].feasible and not r[3].feasible]
    record_property("feasible_at_start", f"{len(started)}/{len(runs)}")
    record_property("counterexamples", len(bad))
    record_property("seconds", f"{elapsed:.1f}")
    assert len(started) > 0 and not bad
    assert elapsed < 600.0


@criterion(3, "robust recursive feasibility over 200 sequences")
def test_c3_certificate_margins(robust_sequences, record_property):
    worst = math.inf
    for cfg, pred, scene, trace in robust_sequences[0]:
        if not trace.feasible:
            continue
        alloc = allocate_risk(cfg.epsilon, cfg.T, 1)
        report = verify_recursive_feasibility(trace, pred, alloc, scene.state_set)
        worst = min(worst, report.min_margin)
    record_property("min_margin", f"{worst:.3e}")
    assert worst >= -1e-8


# ---------------------------------------------------------------------------
# 4. safety


@criterion(4, "empirical collision rate <= epsilon")
def test_c4_collision_rate(lane_runs, record_property):
    rates = {}
    for (intent, kind), runs in lane_runs.items():
        feasible = [rec for rec, _, _ in runs if rec.feasible]
        rates[f"{kind.value}/{'yield' if intent == 0 else 'accelerate'}"] = max(
            (r.collision_rate for r in feasible), default=0.0)
    record_property("max_rate", ", ".join(f"{k}={v:.5f}" for k, v in rates.items()))
    assert all(v <= CFG.epsilon for v in rates.values())


# ---------------------------------------------------------------------------
# 5. cost ordering


@criterion(5, "nominal cost < robust cost in both variants")
@pytest.mark.parametrize("intent", [0, 1], ids=["yield", "accelerate"])
def test_c5_cost_ordering(lane_runs, intent, record_property):
    nom = lane_runs[intent, PlannerKind.NOMINAL]
    rob = lane_runs[intent, PlannerKind.ROBUST]
    wins = sum(a[0].feasible and b[0].feasible and a[0].cost < b[0].cost for a, b in zip(nom, rob))
    mean = (lambda rs: np.mean([r[0].cost for r in rs if r[0].feasible]))
    record_property(f"variant_{intent}", f"nominal {mean(nom):.3f} vs robust {mean(rob):.3f}, {wins}/10")
    assert wins == 10


# ---------------------------------------------------------------------------
# 6. solver oracle


@criterion(6, "branch and bound equals enumeration")
def test_c6_oracle_equivalence(record_property):
    rng = np.random.default_rng(606)
    start = time.perf_counter()
    mismatches, optimal = 0, 0
    for _ in range(100):
        p = random_misocp(rng)
        a, b = solve(p), solve_by_enumeration(p)
        if a.status is not b.status:
            mismatches += 1
        elif a.status is SolveStatus.OPTIMAL:
            optimal += 1
            mismatches += abs(a.objective - b.objective) > 1e-6 or a.assignment != b.assignment
    elapsed = time.perf_counter() - start
    record_property("optimal_instances", optimal)
    record_property("seconds", f"{elapsed:.1f}")
    assert mismatches == 0 and elapsed < 120.0


# ---------------------------------------------------------------------------
# 7. tightening inclusion


@criterion(7, "robust rows dominate nominal rows")
def test_c7_random_rows():
    rng = np.random.default_rng(707)
    support = (0, 1, 4)
    for n in range(10_000):
        on_support = n % 2 == 0
        d = 3 if on_support else 5
        a = rng.normal(size=(d, d)) * rng.uniform(0.01, 3)
        cov = np.zeros((5, 5))
        idx = list(support) if on_support else list(range(5))
        cov[np.ix_(idx, idx)] = a @ a.T
        mu = rng.normal(size=5) * 5
        xt = np.r_[rng.normal(size=4) * 20, 1.0]
        gamma = rng.uniform(0.5, 5.0)
        sup = support if on_support else None
        assert robust_value(xt, mu, cov, gamma, sup) >= nominal_value(xt, mu, cov, gamma) - 1e-9


def _nominal_violation(scene, pred, plan):
    bp_r = plan.built
    lay = bp_r.layout
    sys = scene.system(lay.tau, lay.t_end, None)
    alloc = allocate_risk(scene.epsilon, scene.n_steps, 1)
    bp_n = build_nominal(lay.tau, lay.t_end, sys, pred.at_step(lay.tau), alloc, scene.cost(lay.tau), bp_r.x0)
    y = lay.pack(plan.states[0][1:], plan.inputs[0])
    asg = tuple(plan.assignment[k] for k in bp_n.group_keys)
    return bp_n.misocp.max_violation(y, asg)


@criterion(7, "robust rows dominate nominal rows")
def test_c7_robust_plans_nominal_feasible(robust_sequences, lane_runs, record_property):
    worst, count = -math.inf, 0
    traces = [(s, p, t) for _, p, s, t in robust_sequences[0]]
    traces += [(sc, sc.pred, tr) for intent in (0, 1) for _, tr, sc in lane_runs[intent, PlannerKind.ROBUST]]
    for scene, pred, trace in traces:
        for plan in trace.plans:
            if plan.feasible:
                worst = max(worst, _nominal_violation(scene, pred, plan))
                count += 1
    record_property("plans_checked", count)
    record_property("max_nominal_violation", f"{worst:.2e}")
    assert worst <= 1e-7


# ---------------------------------------------------------------------------
# 8. numerics


@criterion(8, "numerical accuracy")
def test_c8_jacobians(record_property):
    rng = np.random.default_rng(808)
    p = BicycleParams()
    worst = 0.0
    h = 1e-6
    for _ in range(100):
        x = np.array([rng.uniform(-50, 50), rng.uniform(-50, 50), rng.uniform(-math.pi, math.pi), rng.uniform(0, 10)])
        u = np.array([rng.uniform(-4, 7), rng.uniform(-0.6, 0.6)])
        fx, fu = bicycle_jacobians(x, u, p)
        ex, eu = np.eye(4) * h, np.eye(2) * h
        fx_ref = np.column_stack([(bicycle_rhs(x + e, u, p) - bicycle_rhs(x - e, u, p)) / (2 * h) for e in ex])
        fu_ref = np.column_stack([(bicycle_rhs(x, u + e, p) - bicycle_rhs(x, u - e, p)) / (2 * h) for e in eu])
        for j, ref in ((fx, fx_ref), (fu, fu_ref)):
            worst = max(worst, float(np.max(np.abs(j - ref) / np.maximum(np.abs(ref), 1.0))))
    record_property("jacobian_rel_error", f"{worst:.2e}")
    assert worst <= 1e-5


@criterion(8, "numerical accuracy")
def test_c8_zoh(record_property):
    worst = 0.0
    for dt in np.linspace(0.01, 2.0, 25):
        m = np.zeros((6, 6))
        m[0, 2] = m[1, 3] = m[2, 4] = m[3, 5] = 1.0
        total, term = np.eye(6), np.eye(6)
        for k in range(1, 40):
            term = term @ (m * dt) / k
            total = total + term
        a, b = zoh_matrices(dt)
        worst = max(worst, np.max(np.abs(a - total[:4, :4])), np.max(np.abs(b - total[:4, 4:])))
    record_property("zoh_error", f"{worst:.2e}")
    assert worst <= 1e-12


@criterion(8, "numerical accuracy")
def test_c8_inverse_normal_and_cvar(record_property):
    ps = np.concatenate([np.logspace(-12, -1, 60), np.linspace(0.1, 0.9, 41), 1 - np.logspace(-1, -9, 50)])
    trip = max(abs(normal_cdf(inverse_normal_cdf(p)) - p) for p in ps)
    rng = np.random.default_rng(809)
    cvar_err = 0.0
    for _ in range(200):
        mu, sigma, eps = rng.uniform(-5, 5), rng.uniform(0.1, 4), rng.uniform(0.001, 0.4)
        _, cvar = gmm_var_cvar(GaussianMixture.scalar([mu], [sigma], [1.0]), eps)
        z = stats.norm.ppf(1 - eps)
        cvar_err = max(cvar_err, abs(cvar - (mu + sigma * stats.norm.pdf(z) / eps)))
    record_property("round_trip_error", f"{trip:.2e}")
    record_property("cvar_error", f"{cvar_err:.2e}")
    assert trip <= 1e-8 and cvar_err <= 1e-6


# ---------------------------------------------------------------------------
# 9. contingency structure


@criterion(9, "contingency structure")
def test_c9_tied_inputs(lane_runs, record_property):
    worst, plans = 0.0, 0
    for intent in (0, 1):
        for _, trace, _ in lane_runs[intent, PlannerKind.CONTINGENCY]:
            for plan in trace.plans:
                if plan.feasible and plan.inputs.shape[0] > 1:
                    plans += 1
                    u0 = plan.inputs[0][0]
                    scale = max(1.0, float(np.max(np.abs(u0))))
                    worst = max(worst, float(np.max(np.abs(plan.inputs[1:, 0] - u0))) / scale)
    record_property("multi_branch_plans", plans)
    record_property("max_tie_gap", f"{worst:.2e}")
    assert plans > 0 and worst <= np.finfo(float).eps


@criterion(9, "contingency structure")
def test_c9_single_branch_equals_nominal(record_property):
    alloc = allocate_risk(CFG.epsilon, CFG.T, 1)
    worst = 0.0
    for seed in range(10):
        pred = gen_lane_change_predictions(0, CFG.T, seed, CFG).at_step(0)
        scene = LaneChangeScene(CFG, pred)
        args = (0, CFG.T, scene.system(0, CFG.T, None), pred, alloc, scene.cost(0), scene.x0)
        a = solve_built(build_nominal(*args))
        b = solve_built(build_contingency(*args, subsets=[{0: {0, 1}}]))
        worst = max(worst, abs(a.objective - b.objective))
    record_property("max_objective_gap", f"{worst:.2e}")
    assert worst <= 1e-6


# ---------------------------------------------------------------------------
# 10. determinism


@criterion(10, "byte-identical CSVs on rerun")
@pytest.mark.parametrize("argv", [
    ["riskbench", "-o", "repetitions=5"],
    ["lane-change", "-o", "n_trials=2", "-o", "collision_samples=2000"],
    ["intersection", "-o", "n_trials=1", "-o", 'planners=["robust"]', "-o", "intersection.n_steps=6",
     "-o", "collision_samples=1000"],
    ["check-assumptions"],
], ids=["riskbench", "lane-change", "intersection", "check-assumptions"])
def test_c10_determinism(tmp_path, argv):
    outs = [tmp_path / "a", tmp_path / "b"]
    codes = [main([argv[0], "--out-dir", str(o), "--seed", "7", *argv[1:]]) for o in outs]
    assert codes[0] == codes[1] and codes[0] in (0, 1)
    csvs = sorted(p.relative_to(outs[0]) for p in outs[0].rglob("*.csv"))
    assert csvs and csvs == sorted(p.relative_to(outs[1]) for p in outs[1].rglob("*.csv"))
    for rel in csvs:
        assert (outs[0] / rel).read_bytes() == (outs[1] / rel).read_bytes(), rel
