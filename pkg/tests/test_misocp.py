import math

import numpy as np
import pytest
from scipy import sparse

from _instances import random_misocp
from ccmpc.misocp import (ConeRow, Misocp, ProblemFormatError, SolveStatus, problem_from_dict, problem_to_dict,
                          solve, solve_by_enumeration, solve_convex)


def ball_box_problem(P, q, centre, radius, box):
    n = len(q)
    G = sparse.csc_matrix(np.vstack([np.eye(n), -np.eye(n)]))
    h = np.full(2 * n, box)
    row = ConeRow(((np.eye(n), -np.asarray(centre)),), np.zeros(n), -radius, 10.0)
    return Misocp(n, P, q, 0.0, None, None, G, h, [row], [[0]])


def project_ball_box(y, centre, radius, box):
    """Exact projection onto ball(centre, radius) intersected with [-box, box]^n.

    KKT gives x(lam) = clip((y + lam c) / (1 + lam)); ||x(lam) - c|| decreases
    in lam, so the multiplier is found by bisection.
    """
    x_of = lambda lam: np.clip((y + lam * centre) / (1.0 + lam), -box, box)
    if np.linalg.norm(x_of(0.0) - centre) <= radius:
        return x_of(0.0)
    lo, hi = 0.0, 1.0
    while np.linalg.norm(x_of(hi) - centre) > radius:
        hi *= 2.0
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if np.linalg.norm(x_of(mid) - centre) > radius else (lo, mid)
    return x_of(hi)


def projected_gradient(P, q, centre, radius, box, iters=1500):
    step = 1.0 / np.linalg.eigvalsh(P).max()
    y = project_ball_box(np.zeros_like(q), centre, radius, box)
    for _ in range(iters):
        y = project_ball_box(y - step * (P @ y + q), centre, radius, box)
    return y


@pytest.mark.parametrize("seed", range(12))
def test_convex_solve_matches_projected_gradient(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 4))
    a = rng.normal(size=(n, n))
    P = a @ a.T + np.eye(n)
    q = 5 * rng.normal(size=n)
    box = float(rng.uniform(0.3, 1.5))
    centre, radius = np.clip(0.5 * rng.normal(size=n), -box, box), float(rng.uniform(0.5, 2))
    p = ball_box_problem(P, q, centre, radius, box)
    res = solve_convex(p, (0,))
    y_ref = projected_gradient(P, q, centre, radius, box)
    assert res.status is SolveStatus.OPTIMAL
    assert res.objective == pytest.approx(p.objective(y_ref), abs=1e-7)
    assert np.allclose(res.primal, y_ref, atol=1e-4)


def test_infeasible_subproblem_is_reported():
    p = ball_box_problem(np.eye(2), np.zeros(2), np.array([5.0, 5.0]), 1.0, 1.0)
    assert solve_convex(p, (0,)).status is SolveStatus.INFEASIBLE
    assert solve(p).status is SolveStatus.INFEASIBLE


def test_branch_and_bound_matches_enumeration():
    rng = np.random.default_rng(7)
    for _ in range(15):
        p = random_misocp(rng)
        a, b = solve(p), solve_by_enumeration(p)
        assert a.status is b.status
        if a.status is SolveStatus.OPTIMAL:
            assert a.objective == pytest.approx(b.objective, abs=1e-6)
            assert a.assignment == b.assignment
            assert p.max_violation(a.primal, a.assignment) <= 1e-6


def test_hint_does_not_change_the_answer():
    rng = np.random.default_rng(3)
    p = random_misocp(rng)
    ref = solve(p)
    for hint in ((0,) * len(p.groups), tuple(len(g) - 1 for g in p.groups)):
        res = solve(p, hint=hint)
        assert res.objective == pytest.approx(ref.objective, abs=1e-7)
        assert res.assignment == ref.assignment


def test_tie_goes_to_lowest_satisfied_face():
    # both faces hold at the optimum (3, 3): the assignment names face 0
    rows = [ConeRow((), np.array([-1.0, 0.0]), 1.0, 50.0), ConeRow((), np.array([0.0, -1.0]), 1.0, 50.0)]
    p = Misocp(2, 2 * np.eye(2), np.array([-6.0, -6.0]), 18.0, rows=rows, groups=[[0, 1]])
    res = solve(p, hint=(1,))
    assert res.assignment == (0,)
    assert res.objective == pytest.approx(0.0, abs=1e-7)


def test_problem_without_groups():
    p = Misocp(2, np.eye(2), np.array([1.0, -1.0]))
    res = solve(p)
    assert res.status is SolveStatus.OPTIMAL and res.assignment == ()
    assert np.allclose(res.primal, [-1.0, 1.0], atol=1e-7)


def test_dump_round_trip_preserves_solution():
    p = random_misocp(np.random.default_rng(11))
    back = problem_from_dict(problem_to_dict(p))
    a, b = solve(p), solve(back)
    assert a.objective == b.objective and a.assignment == b.assignment


def test_malformed_dumps_are_rejected():
    d = problem_to_dict(random_misocp(np.random.default_rng(0)))
    with pytest.raises(ProblemFormatError):
        problem_from_dict({**d, "format": "other"})
    with pytest.raises(ProblemFormatError):
        problem_from_dict({k: v for k, v in d.items() if k != "q"})
    with pytest.raises(ProblemFormatError):
        problem_from_dict({**d, "groups": [[0]]})


def test_time_limit_reports_status():
    p = random_misocp(np.random.default_rng(5))
    res = solve(p, time_limit=0.0)
    assert res.status in (SolveStatus.TIME_LIMIT, SolveStatus.OPTIMAL)
    assert res.bound <= solve(p).objective + 1e-9 or math.isinf(res.bound)
