"""Chance-constrained MPC: problem builders, the closed-loop executor and certificates.

Decision vector layout for one planning step ``tau`` with end ``t_end``
(``H = t_end - tau`` steps) and ``L`` branches::

    [ x_{tau+1..t_end}^(0), u_{tau..t_end-1}^(0), x^(1), u^(1), ... ]

``x_tau`` is data.  Every branch carries its own copy of the dynamics; the
contingency planner ties the first ``T_c`` inputs of all branches.
"""

from __future__ import annotations

import enum
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .constraints import (BuildError, RiskAllocation, RowKind, SocRow, big_m_value, build_rows,
                          row_value, support_radius)
from .dynamics import ConvexSet, LtvSystem
from .geometry import GmmPrediction
from .misocp import ConeRow, Misocp, SolveResult, SolveStatus, solve

EIG_DROP = 1e-12


class PlannerKind(enum.Enum):
    NOMINAL = "nominal"
    ROBUST = "robust"
    CONTINGENCY = "contingency"


class HorizonMode(enum.Enum):
    SHRINKING = "shrinking"
    RECEDING = "receding"


@dataclass(frozen=True)
class HorizonPolicy:
    """Open-loop horizon rule.

    SHRINKING plans to the fixed end ``start + T``; RECEDING plans ``T_s``
    steps ahead of the current step.
    """

    mode: HorizonMode
    T: int
    T_s: int | None = None

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if self.mode is HorizonMode.RECEDING and (self.T_s is None or not 1 <= self.T_s < self.T):
            raise ValueError("receding horizon needs 1 <= T_s < T")

    def t_end(self, tau: int, start: int = 0) -> int:
        if self.mode is HorizonMode.SHRINKING:
            return start + self.T
        return tau + self.T_s


# ---------------------------------------------------------------------------
# costs


class Layout:
    def __init__(self, tau: int, t_end: int, n_x: int, n_u: int, n_branches: int = 1):
        if t_end <= tau:
            raise BuildError(f"empty horizon: tau={tau}, t_end={t_end}")
        self.tau, self.t_end, self.n_x, self.n_u, self.n_branches = tau, t_end, n_x, n_u, n_branches
        self.H = t_end - tau
        self.block = self.H * (n_x + n_u)
        self.n = self.block * n_branches

    def x(self, t: int, branch: int = 0) -> slice:
        if not self.tau < t <= self.t_end:
            raise IndexError(f"state index {t} outside ({self.tau}, {self.t_end}]")
        start = branch * self.block + (t - self.tau - 1) * self.n_x
        return slice(start, start + self.n_x)

    def u(self, t: int, branch: int = 0) -> slice:
        if not self.tau <= t < self.t_end:
            raise IndexError(f"input index {t} outside [{self.tau}, {self.t_end})")
        start = branch * self.block + self.H * self.n_x + (t - self.tau) * self.n_u
        return slice(start, start + self.n_u)

    def states(self, y, x0, branch: int = 0) -> np.ndarray:
        return np.vstack([x0] + [y[self.x(t, branch)] for t in range(self.tau + 1, self.t_end + 1)])

    def inputs(self, y, branch: int = 0) -> np.ndarray:
        return np.vstack([y[self.u(t, branch)] for t in range(self.tau, self.t_end)])

    def pack(self, states, inputs, branch: int = 0, y=None) -> np.ndarray:
        """Inverse of ``states``/``inputs``: states exclude x_tau."""
        y = np.zeros(self.n) if y is None else y
        for s, t in enumerate(range(self.tau + 1, self.t_end + 1)):
            y[self.x(t, branch)] = states[s]
        for s, t in enumerate(range(self.tau, self.t_end)):
            y[self.u(t, branch)] = inputs[s]
        return y


@dataclass(frozen=True)
class LaneChangeCost:
    """(x_{T_OH, lat} - goal)^2 - progress_weight * x_{T_OH, lon}."""

    goal: float
    lat_idx: int = 1
    lon_idx: int = 0
    progress_weight: float = 0.1

    def terms(self, lay: Layout, branch: int):
        n = lay.n
        xs = lay.x(lay.t_end, branch)
        lat, lon = xs.start + self.lat_idx, xs.start + self.lon_idx
        P = sparse.coo_matrix(([2.0], ([lat], [lat])), shape=(n, n))
        q = np.zeros(n)
        q[lat] = -2.0 * self.goal
        q[lon] = -self.progress_weight
        return P, q, self.goal ** 2

    def value(self, x_final) -> float:
        return float((x_final[self.lat_idx] - self.goal) ** 2 - self.progress_weight * x_final[self.lon_idx])


@dataclass(frozen=True)
class TrackingCost:
    """||p_T - goal||_P^2 + sum ||u_t||_R1^2 + sum ||u_{t+1} - u_t||_R2^2 (positions only in P)."""

    goal: tuple
    P: np.ndarray = field(default_factory=lambda: 300.0 * np.eye(2))
    R1: np.ndarray = field(default_factory=lambda: np.array([[0.05, 0.02], [0.02, 0.10]]))
    R2: np.ndarray = field(default_factory=lambda: np.array([[0.05, 0.01], [0.01, 0.20]]))
    pos_idx: tuple = (0, 1)

    def terms(self, lay: Layout, branch: int):
        n = lay.n
        H = sparse.lil_matrix((n, n))
        q = np.zeros(n)
        xs = lay.x(lay.t_end, branch)
        idx = [xs.start + i for i in self.pos_idx]
        goal = np.asarray(self.goal, dtype=float)
        for a, ia in enumerate(idx):
            for b, ib in enumerate(idx):
                H[ia, ib] += 2.0 * self.P[a, b]
        q[idx] = -2.0 * self.P @ goal
        r = float(goal @ self.P @ goal)
        for t in range(lay.tau, lay.t_end):
            us = lay.u(t, branch)
            ui = list(range(us.start, us.stop))
            for a, ia in enumerate(ui):
                for b, ib in enumerate(ui):
                    H[ia, ib] += 2.0 * self.R1[a, b]
            if t + 1 < lay.t_end:
                un = lay.u(t + 1, branch)
                vi = list(range(un.start, un.stop))
                for a in range(len(ui)):
                    for b in range(len(ui)):
                        w = 2.0 * self.R2[a, b]
                        H[vi[a], vi[b]] += w
                        H[ui[a], ui[b]] += w
                        H[vi[a], ui[b]] -= w
                        H[ui[a], vi[b]] -= w
        return H.tocoo(), q, r

    def value(self, x_final, inputs=()) -> float:
        e = np.asarray(x_final)[list(self.pos_idx)] - np.asarray(self.goal)
        total = float(e @ self.P @ e)
        inputs = np.asarray(inputs, dtype=float).reshape(-1, self.R1.shape[0])
        for s, u in enumerate(inputs):
            total += float(u @ self.R1 @ u)
            if s + 1 < len(inputs):
                d = inputs[s + 1] - u
                total += float(d @ self.R2 @ d)
        return total


# ---------------------------------------------------------------------------
# problem construction


@dataclass
class BuiltProblem:
    misocp: Misocp
    layout: Layout
    soc_rows: list          # SocRow per cone row, aligned with misocp.rows
    row_times: list         # (t, branch) per cone row
    group_keys: list        # group key per misocp group
    x0: np.ndarray
    kind: PlannerKind
    row_kind: RowKind


def _factor_rows(cov: np.ndarray) -> np.ndarray:
    """Rows R with R'R = cov, rank-revealing (zero rows dropped)."""
    w, v = np.linalg.eigh(0.5 * (cov + cov.T))
    keep = w > EIG_DROP * max(1.0, float(np.max(np.abs(w))) if w.size else 1.0)
    return (v[:, keep] * np.sqrt(w[keep])).T


def soc_to_cone(row: SocRow, lay: Layout, t: int, branch: int) -> ConeRow:
    """Express a chance row on x~ = [x_t, 1] in the decision vector."""
    sup = list(row.support)
    n_x = lay.n_x
    xs = lay.x(t, branch)
    has_one = n_x in sup
    D = len(sup)

    def embed(mat):
        """(m, D) coefficient block on x~_s -> (F, g)."""
        mat = np.atleast_2d(mat)
        f = np.zeros((mat.shape[0], lay.n))
        g = np.zeros(mat.shape[0])
        pos = 0
        for s in sup:
            if s < n_x:
                f[:, xs.start + s] = mat[:, pos]
            else:
                g = mat[:, pos].copy()
            pos += 1
        return f, g

    mean = np.asarray(row.mean)[sup]
    cov = np.asarray(row.cov)
    if cov.shape[0] != D:
        cov = cov[np.ix_(sup, sup)]
    a, c = embed(mean.reshape(1, -1))
    a, c = a[0], float(c[0]) if has_one else 0.0
    terms = []
    if row.kind is RowKind.NOMINAL or row.kind is RowKind.MOMENT_ROBUST:
        scale = row.gamma * (math.sqrt(1.0 + row.r2) if row.kind is RowKind.MOMENT_ROBUST else 1.0)
        fr = _factor_rows(cov)
        if fr.shape[0]:
            terms.append(embed(scale * fr))
    if row.kind is RowKind.ROBUST:
        kappa = row.gamma * math.sqrt(np.linalg.norm(cov, "fro"))
        if kappa > 0:
            terms.append(embed(kappa * np.eye(D)))
    if row.kind is RowKind.MOMENT_ROBUST and row.r1 > 0:
        terms.append(embed(row.r1 * np.eye(D)))
    return ConeRow(tuple(terms), a, c, row.big_m, (t, branch, row.face) + tuple(row.group))


def _set_rows(cset: ConvexSet, sl: slice, n: int):
    rows, rhs = [], []
    for i in range(cset.dim):
        if np.isfinite(cset.upper[i]):
            r = np.zeros(n); r[sl.start + i] = 1.0
            rows.append(r); rhs.append(cset.upper[i])
        if np.isfinite(cset.lower[i]):
            r = np.zeros(n); r[sl.start + i] = -1.0
            rows.append(r); rhs.append(-cset.lower[i])
    for nv, off in zip(cset.normals, cset.offsets):
        r = np.zeros(n); r[sl] = nv
        rows.append(r); rhs.append(off)
    return rows, rhs


def default_subsets(pred: GmmPrediction, tau: int, t_end: int) -> list:
    """S_l holds the l-th mode of every obstacle, padded with its last mode."""
    obstacles = pred.obstacles(tau)
    if not obstacles:
        return [{}]
    counts = {j: pred.mode_count(tau, j) for j in obstacles}
    L = max(counts.values())
    return [{j: {min(l, counts[j] - 1)} for j in obstacles} for l in range(L)]


def _check_cover(pred: GmmPrediction, tau: int, subsets):
    for j in pred.obstacles(tau):
        covered = set().union(*[s.get(j, set()) for s in subsets])
        if covered != set(range(pred.mode_count(tau, j))):
            raise BuildError(f"mode subsets do not cover every mode of obstacle {j}")


def _build(kind: PlannerKind, row_kind: RowKind, tau: int, t_end: int, system: LtvSystem, pred,
           alloc: RiskAllocation | None, cost, x0, subsets=None, t_c: int = 1, moment_bounds=None) -> BuiltProblem:
    if not system.covers(tau, t_end):
        raise BuildError(f"system does not cover steps [{tau}, {t_end})")
    if t_c < 1:
        raise BuildError("T_c must be >= 1")
    n_x, n_u = system.n_x, system.n_u
    branches = [None] if subsets is None else list(subsets)
    L = len(branches)
    lay = Layout(tau, t_end, n_x, n_u, L)
    n = lay.n
    x0 = np.asarray(x0, dtype=float)

    P = sparse.csc_matrix((n, n))
    q = np.zeros(n)
    r = 0.0
    for l in range(L):
        Pl, ql, rl = cost.terms(lay, l)
        P = P + sparse.csc_matrix(Pl)
        q += ql
        r += rl

    eq_rows, eq_rhs = [], []
    for l in range(L):
        for t in range(tau, t_end):
            k = t - system.start
            A, B, c = system.a_mats[k], system.b_mats[k], system.affine[k]
            block = np.zeros((n_x, n))
            block[:, lay.x(t + 1, l)] = np.eye(n_x)
            block[:, lay.u(t, l)] = -B
            rhs = c.copy()
            if t == tau:
                rhs = rhs + A @ x0
            else:
                block[:, lay.x(t, l)] = -A
            eq_rows.append(block)
            eq_rhs.append(rhs)
    for l in range(1, L):
        for t in range(tau, min(tau + t_c, t_end)):
            block = np.zeros((n_u, n))
            block[:, lay.u(t, l)] = np.eye(n_u)
            block[:, lay.u(t, 0)] = -np.eye(n_u)
            eq_rows.append(block)
            eq_rhs.append(np.zeros(n_u))

    g_rows, g_rhs = [], []
    for l in range(L):
        for t in range(tau + 1, t_end + 1):
            rr, hh = _set_rows(system.state_set, lay.x(t, l), n)
            g_rows += rr; g_rhs += hh
        for t in range(tau, t_end):
            rr, hh = _set_rows(system.input_set_at(t), lay.u(t, l), n)
            g_rows += rr; g_rhs += hh

    cone_rows, soc_rows, row_times, groups, keys = [], [], [], [], []
    has_obstacles = pred is not None and bool(pred.obstacles(tau))
    if has_obstacles:
        if alloc is None:
            raise BuildError("chance rows need a risk allocation")
        if subsets is not None:
            _check_cover(pred, tau, subsets)
        full, _ = build_rows(pred, alloc, row_kind, tau, t_end, system.state_set, None, moment_bounds)
        big_m = full[0].big_m if full else None
        for l, modes in enumerate(branches):
            rows, grps = build_rows(pred, alloc, row_kind, tau, t_end, system.state_set, modes,
                                    moment_bounds, big_m, None if subsets is None else l)
            base = len(cone_rows)
            for sr in rows:
                t = sr.group[0]
                cone_rows.append(soc_to_cone(sr, lay, t, l))
                soc_rows.append(sr)
                row_times.append((t, l))
            for grp in grps:
                groups.append([base + i for i in grp.rows])
                keys.append(grp.key)

    A_eq = sparse.csc_matrix(np.vstack(eq_rows)) if eq_rows else None
    b_eq = np.concatenate(eq_rhs) if eq_rhs else None
    G = sparse.csc_matrix(np.vstack(g_rows)) if g_rows else None
    h = np.array(g_rhs) if g_rows else None
    prob = Misocp(n, P, q, r, A_eq, b_eq, G, h, cone_rows, groups)
    return BuiltProblem(prob, lay, soc_rows, row_times, keys, x0, kind, row_kind)


def build_nominal(tau, t_end, system, pred, alloc, cost, x0) -> BuiltProblem:
    return _build(PlannerKind.NOMINAL, RowKind.NOMINAL, tau, t_end, system, pred, alloc, cost, x0)


def build_robust(tau, t_end, system, pred, alloc, cost, x0) -> BuiltProblem:
    return _build(PlannerKind.ROBUST, RowKind.ROBUST, tau, t_end, system, pred, alloc, cost, x0)


def build_moment_robust(tau, t_end, system, pred, alloc, cost, x0, moment_bounds) -> BuiltProblem:
    return _build(PlannerKind.NOMINAL, RowKind.MOMENT_ROBUST, tau, t_end, system, pred, alloc, cost, x0,
                  moment_bounds=moment_bounds)


def build_contingency(tau, t_end, system, pred, alloc, cost, x0, subsets=None, t_c: int = 1,
                      row_kind: RowKind = RowKind.NOMINAL) -> BuiltProblem:
    if subsets is None:
        subsets = default_subsets(pred, tau, t_end) if pred is not None else [{}]
    return _build(PlannerKind.CONTINGENCY, row_kind, tau, t_end, system, pred, alloc, cost, x0,
                  subsets, t_c)


def build_for(kind: PlannerKind, tau, t_end, system, pred, alloc, cost, x0, subsets=None, t_c=1):
    if kind is PlannerKind.NOMINAL:
        return build_nominal(tau, t_end, system, pred, alloc, cost, x0)
    if kind is PlannerKind.ROBUST:
        return build_robust(tau, t_end, system, pred, alloc, cost, x0)
    return build_contingency(tau, t_end, system, pred, alloc, cost, x0, subsets, t_c)


# ---------------------------------------------------------------------------
# results


@dataclass
class PlanResult:
    tau: int
    t_end: int
    status: SolveStatus
    objective: float
    states: np.ndarray | None       # (L, H + 1, n_x), row 0 is x_tau
    inputs: np.ndarray | None       # (L, H, n_u)
    assignment: dict | None         # group key -> active face
    solve_time: float
    node_count: int
    mode: HorizonMode
    with_obstacles: bool
    built: BuiltProblem | None = None

    @property
    def feasible(self) -> bool:
        return self.status is SolveStatus.OPTIMAL or (self.status is SolveStatus.TIME_LIMIT
                                                      and self.states is not None)

    def predicted_state(self, t: int, branch: int = 0) -> np.ndarray:
        return self.states[branch, t - self.tau]


@dataclass
class ClosedLoopTrace:
    states: list                    # executed x_t, t = 0..
    inputs: list
    plans: list
    infeasible_at: int | None = None
    kind: PlannerKind = PlannerKind.NOMINAL

    @property
    def feasible(self) -> bool:
        return self.infeasible_at is None


def guess_assignment(p: Misocp, y, tol: float = 1e-6):
    """Per group: lowest-index satisfied row at ``y``, else the least violated one."""
    out = []
    for g in p.groups:
        vals = [p.rows[ri].value(y) for ri in g]
        ok = [m for m, v in enumerate(vals) if v <= tol]
        out.append(ok[0] if ok else int(np.argmin(vals)))
    return tuple(out)


def solve_built(bp: BuiltProblem, time_limit: float = 60.0, guess=None, mode=HorizonMode.SHRINKING) -> PlanResult:
    """Solve a built step problem; ``guess`` is (states (H+1, n_x), inputs (H, n_u)) or None."""
    p, lay = bp.misocp, bp.layout
    hint = None
    if guess is not None and p.groups:
        gs, gu = guess
        y = np.zeros(p.n)
        for l in range(lay.n_branches):
            lay.pack(gs[1:], gu, l, y)
        hint = guess_assignment(p, y)
    res: SolveResult = solve(p, time_limit=time_limit, hint=hint)
    if not res.feasible:
        return PlanResult(lay.tau, lay.t_end, res.status, math.inf, None, None, None, res.solve_time,
                          res.node_count, mode, bool(p.groups))
    y = res.primal
    states = np.array([lay.states(y, bp.x0, l) for l in range(lay.n_branches)])
    inputs = np.array([lay.inputs(y, l) for l in range(lay.n_branches)])
    asg = {key: member for key, member in zip(bp.group_keys, res.assignment)} if res.assignment else {}
    return PlanResult(lay.tau, lay.t_end, res.status, res.objective, states, inputs, asg, res.solve_time,
                      res.node_count, mode, bool(p.groups))


def shifted_guess(plan: PlanResult, tau: int, t_end: int):
    """Previous plan re-indexed to start at ``tau``; missing tail repeats the last entries."""
    if plan is None or plan.states is None:
        return None
    s = plan.states[0][tau - plan.tau:]
    u = plan.inputs[0][tau - plan.tau:]
    H = t_end - tau
    if len(u) == 0:
        return None
    while len(u) < H:
        u = np.vstack([u, u[-1:]])
        s = np.vstack([s, s[-1:]])
    return s[:H + 1], u[:H]


# ---------------------------------------------------------------------------
# closed loop


class Scene:
    """Interface consumed by ``run_mpc``.  Subclasses provide the data."""

    n_steps: int
    x0: np.ndarray
    epsilon: float

    def system(self, tau: int, t_end: int, previous: PlanResult | None) -> LtvSystem:
        raise NotImplementedError

    def prediction(self, tau: int) -> GmmPrediction | None:
        raise NotImplementedError

    def cost(self, tau: int):
        raise NotImplementedError

    def n_obstacles(self) -> int:
        return 1

    def interacting(self, tau: int, planned_states) -> bool:
        """Interaction trigger evaluated on a planned open-loop trajectory."""
        return True

    def initial_guess(self, tau: int, t_end: int, x):
        return None

    # nonlinear scenes: re-linearise around the latest solution a few times
    relinearize_iters: int = 0
    relinearize_tol: float = 1e-3

    def linearize(self, tau: int, t_end: int, x, inputs) -> LtvSystem:
        raise NotImplementedError

    def advance(self, tau: int, x, u, planned_next) -> np.ndarray:
        """State reached by applying ``u``; linear scenes execute the plan exactly."""
        return planned_next


def _allocation(scene: Scene, horizon: int):
    from .constraints import allocate_risk
    return allocate_risk(scene.epsilon, horizon, max(scene.n_obstacles(), 1))


def run_mpc(kind: PlannerKind, policy: HorizonPolicy, scene: Scene, time_limit: float = 60.0,
            subsets=None, t_c: int = 1) -> ClosedLoopTrace:
    """Closed loop over ``scene.n_steps`` steps with the receding/shrinking state machine.

    SHRINKING policies interact from the first step.  RECEDING policies plan
    without obstacle rows until the trigger fires on the receding plan and the
    shrinking problem with obstacle rows is feasible; they return to receding
    mode once the shrinking horizon has been executed.
    """
    x = np.asarray(scene.x0, dtype=float)
    trace = ClosedLoopTrace([x.copy()], [], [], None, kind)
    mode = HorizonMode.SHRINKING if policy.mode is HorizonMode.SHRINKING else HorizonMode.RECEDING
    start = 0
    previous = None
    for tau in range(scene.n_steps):
        if mode is HorizonMode.SHRINKING and tau >= start + policy.T:
            mode = HorizonMode.RECEDING
        plan = None
        if mode is HorizonMode.RECEDING:
            t_end = tau + policy.T_s
            plan = _plan(kind, tau, t_end, scene, None, x, previous, time_limit, subsets, t_c,
                         HorizonMode.RECEDING, policy.T)
            if plan.feasible and scene.interacting(tau, plan.states[0]):
                t_sh = tau + policy.T
                trial = _plan(kind, tau, t_sh, scene, scene.prediction(tau), x, previous, time_limit,
                              subsets, t_c, HorizonMode.SHRINKING, policy.T)
                if trial.feasible:
                    mode, start, plan = HorizonMode.SHRINKING, tau, trial
        else:
            t_end = start + policy.T
            plan = _plan(kind, tau, t_end, scene, scene.prediction(tau), x, previous, time_limit, subsets,
                         t_c, HorizonMode.SHRINKING, policy.T)
        trace.plans.append(plan)
        if not plan.feasible:
            trace.infeasible_at = tau
            break
        u = plan.inputs[0][0]
        x = np.asarray(scene.advance(tau, x, u, plan.states[0][1]), dtype=float).copy()
        trace.inputs.append(u.copy())
        trace.states.append(x.copy())
        previous = plan
    return trace


def _plan(kind, tau, t_end, scene, pred, x, previous, time_limit, subsets, t_c, mode, horizon):
    system = scene.system(tau, t_end, previous)
    alloc = _allocation(scene, horizon) if pred is not None and pred.obstacles(tau) else None
    cost = scene.cost(tau)
    subs = subsets(pred, tau, t_end) if callable(subsets) else subsets
    bp = build_for(kind, tau, t_end, system, pred, alloc, cost, x, subs, t_c)
    guess = shifted_guess(previous, tau, t_end) or scene.initial_guess(tau, t_end, x)
    plan = solve_built(bp, time_limit, guess, mode)
    plan.built = bp
    for _ in range(scene.relinearize_iters):
        if not plan.feasible:
            break
        system = scene.linearize(tau, t_end, x, plan.inputs[0])
        bp = build_for(kind, tau, t_end, system, pred, alloc, cost, x, subs, t_c)
        nxt = solve_built(bp, time_limit, (plan.states[0], plan.inputs[0]), mode)
        if not nxt.feasible:
            break
        nxt.built = bp
        nxt.solve_time += plan.solve_time
        nxt.node_count += plan.node_count
        step = float(np.max(np.abs(nxt.inputs - plan.inputs)))
        plan = nxt
        if step <= scene.relinearize_tol:
            break
    return plan


# ---------------------------------------------------------------------------
# certificates


@dataclass
class FeasibilityStep:
    tau: int
    margin: float               # best-face margin of the shifted plan, min over groups
    certificate_margin: float   # margin on the face active in the previous plan


@dataclass
class FeasibilityReport:
    steps: list

    @property
    def min_margin(self) -> float:
        return min((s.margin for s in self.steps), default=math.inf)

    def passed(self, tol: float = 1e-8) -> bool:
        return self.min_margin >= -tol


def verify_recursive_feasibility(trace: ClosedLoopTrace, pred: GmmPrediction, alloc: RiskAllocation,
                                 state_set: ConvexSet) -> FeasibilityReport:
    """Re-check that each plan, shifted by one step, satisfies the next step's robust rows."""
    steps = []
    for a, b in zip(trace.plans, trace.plans[1:]):
        if not (a.feasible and b.feasible) or not pred.obstacles(b.tau):
            continue
        rows, groups = build_rows(pred, alloc, RowKind.ROBUST, b.tau, a.t_end, state_set)
        worst, worst_cert = math.inf, math.inf
        for grp in groups:
            t, j, k = grp.key[:3]
            x = a.predicted_state(t)
            xt = np.append(x, 1.0)
            vals = [row_value(xt, rows[ri]) for ri in grp.rows]
            worst = min(worst, -min(vals))
            parent = pred.get(b.tau, t, j).parents[k]
            face = (a.assignment or {}).get((t, j, parent))
            if face is not None:
                worst_cert = min(worst_cert, -vals[face])
        steps.append(FeasibilityStep(b.tau, worst, worst_cert))
    return FeasibilityReport(steps)


def executed_row_violation(trace: ClosedLoopTrace, pred: GmmPrediction, alloc: RiskAllocation,
                           state_set: ConvexSet, kind: RowKind = RowKind.NOMINAL, modes_all: bool = True) -> float:
    """Largest violation (best face per group) of step rows at the executed states.

    Each executed state x_{t|t-1} is checked against the rows built at step
    t - 1 for time t, covering every mode of every obstacle.
    """
    worst = -math.inf
    for t in range(1, len(trace.states)):
        tau = t - 1
        if not pred.obstacles(tau):
            continue
        rows, groups = build_rows(pred, alloc, kind, tau, t, state_set)
        xt = np.append(trace.states[t], 1.0)
        for grp in groups:
            worst = max(worst, min(row_value(xt, rows[ri]) for ri in grp.rows))
    return worst
