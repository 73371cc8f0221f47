"""Scenes, synthetic predictions, collision-rate evaluation and metrics.

Two scenes are provided:

* ``LANE_CHANGE``: planar double integrator changing into a lane occupied by
  one OV that either yields (decelerates) or accelerates.  Predictions are
  synthetic and satisfy the mode-count and mean-shift conditions used by the
  robust planner's recursive-feasibility argument.
* ``T_INTERSECTION_LITE``: kinematic bicycle crossing an intersection with
  two OVs on straight crossing paths with scripted intents.  Predictions are
  fitted to sampled OV poses.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .constraints import allocate_risk
from .dynamics import BicycleParams, ConvexSet, bicycle_rollout, euler_step, lane_change_sets, linearize_bicycle, \
    zoh_double_integrator
from .geometry import GmmPrediction, ObstacleModes, PolytopeObstacle, check_mean_shift, fit_prediction, \
    pose_to_faces
from .planners import (ClosedLoopTrace, HorizonMode, HorizonPolicy, LaneChangeCost, PlannerKind, Scene,
                       TrackingCost, run_mpc)


class SceneKind(enum.Enum):
    LANE_CHANGE = "lane_change"
    T_INTERSECTION_LITE = "t_intersection_lite"


# ---------------------------------------------------------------------------
# lane change


@dataclass(frozen=True)
class LaneChangeConfig:
    dt: float = 0.4
    T: int = 10
    epsilon: float = 0.05
    lane_width: float = 3.5
    goal: float = 3.5
    ev_x0: tuple = (0.0, 0.0, 5.56, 0.0)
    ev_half: tuple = (2.25, 0.9)
    ov_half: tuple = (2.25, 0.9)
    ov_p1: float = 8.0
    ov_speed: float = 5.56
    mode_accels: tuple = (-2.0, 2.0)       # yield, accelerate
    mode_weights: tuple = (0.5, 0.5)
    sigma_accel: float = 1.0
    cov_decay: float = 0.5
    noise_scale: float = 0.3               # std of a mean step, as a fraction of its bound
    noise_margin: float = 0.8              # mean step <= noise_margin * gamma * g
    true_mode: int = 0
    p1_bounds: tuple = (-10.0, 120.0)
    coupling: str = "diamond"

    def __post_init__(self):
        if self.T < 2:
            raise ValueError("T must be >= 2")
        if not 0.0 < self.epsilon < 0.5:
            raise ValueError("epsilon must lie in (0, 0.5)")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if not 0 <= self.true_mode < len(self.mode_accels):
            raise ValueError("true_mode out of range")

    @property
    def p2_bounds(self) -> tuple:
        road_lo = -0.5 * self.lane_width
        road_hi = 1.5 * self.lane_width
        return road_lo + self.ev_half[1], road_hi - self.ev_half[1]

    def obstacle(self) -> PolytopeObstacle:
        """OV footprint grown by the EV footprint, so the EV is a point."""
        return PolytopeObstacle.rectangle(self.ov_half[0] + self.ev_half[0], self.ov_half[1] + self.ev_half[1])


def _ov_longitudinal(p0: float, v0: float, a: float, s: float) -> float:
    """Position after time ``s`` under constant acceleration, stopping at zero speed."""
    if a < 0 and v0 + a * s < 0:
        s_stop = -v0 / a
        return p0 + v0 * s_stop + 0.5 * a * s_stop ** 2
    return p0 + v0 * s + 0.5 * a * s ** 2


def _face_block(cfg: LaneChangeConfig, p1: float, sigma: float, n_x: int = 4):
    """Means (I, n_x+1) and joint covariance for an OV centred at (p1, lane)."""
    obs = cfg.obstacle()
    mean = pose_to_faces((p1, cfg.lane_width, 0.0), obs, n_x)
    d = n_x + 1
    v = np.zeros(obs.face_count * d)
    # the offset of a face moves with n . c; only p1 is uncertain
    for i, nrm in enumerate(obs.normals):
        v[i * d + n_x] = nrm[0]
    return mean, sigma ** 2 * np.outer(v, v)


def gen_lane_change_predictions(tau_max: int, T: int, seed: int, cfg: LaneChangeConfig | None = None,
                                n_x: int = 4) -> GmmPrediction:
    """Synthetic OV predictions for planning steps 0..tau_max covering times tau+1..T.

    Two modes at tau = 0, one (the true mode) afterwards.  The covariance of
    every face is multiplied by ``cov_decay`` per step, and the mean of the
    surviving mode drifts by a clipped Gaussian step whose size never exceeds
    ``noise_margin * gamma * g``.
    """
    cfg = cfg or LaneChangeConfig()
    cfg = replace(cfg, T=T)
    rng = np.random.default_rng(seed)
    gamma = allocate_risk(cfg.epsilon, T, 1).gamma()
    pred = GmmPrediction(n_x)
    root = math.sqrt(cfg.cov_decay)
    drift = np.zeros(T + 1)
    for tau in range(tau_max + 1):
        if tau > 0:
            for t in range(tau + 1, T + 1):
                sigma_prev = 0.5 * cfg.sigma_accel * (t * cfg.dt) ** 2 * root ** (tau - 1)
                bound = cfg.noise_margin * gamma * sigma_prev * (1.0 - root)
                step = float(np.clip(rng.normal(0.0, cfg.noise_scale * bound), -bound, bound)) if bound > 0 else 0.0
                drift[t] += step
        for t in range(tau + 1, T + 1):
            sigma = 0.5 * cfg.sigma_accel * (t * cfg.dt) ** 2 * root ** tau
            modes = range(len(cfg.mode_accels)) if tau == 0 else [cfg.true_mode]
            means, covs, weights = [], [], []
            for k in modes:
                p1 = _ov_longitudinal(cfg.ov_p1, cfg.ov_speed, cfg.mode_accels[k], t * cfg.dt)
                m, c = _face_block(cfg, p1 + (drift[t] if tau > 0 else 0.0), sigma, n_x)
                means.append(m)
                covs.append(c)
                weights.append(cfg.mode_weights[k] if tau == 0 else 1.0)
            parents = tuple(range(len(means))) if tau == 0 else ((cfg.true_mode,) if tau == 1 else (0,))
            pred.add(tau, t, 0, ObstacleModes(np.array(weights), np.array(means), np.array(covs), parents))
    return pred


class LaneChangeScene(Scene):
    def __init__(self, cfg: LaneChangeConfig, pred: GmmPrediction):
        self.cfg = cfg
        self.pred = pred
        self.n_steps = cfg.T
        self.x0 = np.asarray(cfg.ev_x0, dtype=float)
        self.epsilon = cfg.epsilon
        self.state_set, self.input_set = lane_change_sets(cfg.p1_bounds, cfg.p2_bounds, cfg.coupling)
        self._cost = LaneChangeCost(cfg.goal)

    def system(self, tau, t_end, previous):
        return zoh_double_integrator(self.cfg.dt, t_end - tau, self.state_set, self.input_set, start=tau)

    def prediction(self, tau):
        return self.pred.at_step(tau)

    def cost(self, tau):
        return self._cost

    def initial_guess(self, tau, t_end, x):
        u = np.zeros((t_end - tau, 2))
        return self.system(tau, t_end, None).rollout(x, u, tau), u

    def travel_time(self, trace: ClosedLoopTrace) -> float:
        """Time until the EV centre first reaches the target lane (within 0.1 m)."""
        for t, x in enumerate(trace.states):
            if abs(x[1] - self.cfg.goal) <= 0.1:
                return t * self.cfg.dt
        return len(trace.states) * self.cfg.dt

    def closed_loop_cost(self, trace: ClosedLoopTrace) -> float:
        return self._cost.value(trace.states[-1])


# ---------------------------------------------------------------------------
# intersection (simplified)


@dataclass(frozen=True)
class OvSpec:
    start: tuple            # (x, y, heading)
    speed: float
    mode_accels: tuple      # one acceleration per intent
    mode_weights: tuple
    commit_step: int        # planning step from which the intent is known
    half: tuple = (2.25, 0.9)


@dataclass(frozen=True)
class IntersectionConfig:
    dt: float = 0.5
    T: int = 8
    T_s: int = 5
    n_steps: int = 14
    epsilon: float = 0.05
    ev_x0: tuple = (-30.0, -1.75, 0.0, 6.0)
    ev_half: tuple = (2.25, 0.9)
    goal: tuple = (30.0, -1.75)
    region: tuple = (-8.0, 8.0, -8.0, 8.0)      # x_lo, x_hi, y_lo, y_hi
    x_bounds: tuple = (-40.0, 80.0)
    y_bounds: tuple = (-3.2, -0.3)
    heading_bounds: tuple = (-0.35, 0.35)       # lane keeping; the scene has no turns
    steer_trust: float = 0.1                    # |u2 - nominal u2| per linearisation
    ovs: tuple[OvSpec, ...] = (
        OvSpec((1.75, -22.0, math.pi / 2), 6.0, (-1.5, 1.0), (0.5, 0.5), 3),
        OvSpec((35.0, 1.75, math.pi), 6.0, (-1.0, 0.5), (0.5, 0.5), 3),
    )
    sigma_accel: float = 0.3
    n_pose_samples: int = 200
    true_modes: tuple | None = None         # None: drawn per trial from the mode weights

    def __post_init__(self):
        if self.T < 2 or self.T_s < 1:
            raise ValueError("need T >= 2 and T_s >= 1")
        if not 0.0 < self.epsilon < 0.5:
            raise ValueError("epsilon must lie in (0, 0.5)")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.true_modes is not None and len(self.true_modes) != len(self.ovs):
            raise ValueError("one true mode per OV")


def _ov_pose(spec: OvSpec, a: float, s: float):
    d = _ov_longitudinal(0.0, spec.speed, a, s)
    x0, y0, th = spec.start
    return x0 + d * math.cos(th), y0 + d * math.sin(th), th


class IntersectionScene(Scene):
    """EV drives east along its lane; OVs cross or oncome on straight paths."""

    relinearize_iters = 5

    def __init__(self, cfg: IntersectionConfig, seed: int):
        self.cfg = cfg
        self.seed = seed
        self.n_steps = cfg.n_steps
        self.x0 = np.asarray(cfg.ev_x0, dtype=float)
        self.epsilon = cfg.epsilon
        self.params = BicycleParams()
        self.state_set = self.params.state_set(cfg.x_bounds, cfg.y_bounds).with_box(2, *cfg.heading_bounds)
        self.input_set = self.params.input_set()
        self._cost = TrackingCost(cfg.goal)
        rng = np.random.default_rng(seed)
        if cfg.true_modes is None:
            self.true_modes = tuple(int(rng.choice(len(spec.mode_weights), p=np.asarray(spec.mode_weights)
                                                   / np.sum(spec.mode_weights))) for spec in cfg.ovs)
        else:
            self.true_modes = tuple(cfg.true_modes)
        # realised accelerations of each OV for this trial
        self.true_accels = [float(spec.mode_accels[m] + cfg.sigma_accel * rng.normal())
                            for spec, m in zip(cfg.ovs, self.true_modes)]
        self._preds = {}

    def n_obstacles(self) -> int:
        return len(self.cfg.ovs)

    def obstacle(self, j: int) -> PolytopeObstacle:
        spec = self.cfg.ovs[j]
        return PolytopeObstacle.rectangle(spec.half[0] + self.cfg.ev_half[0], spec.half[1] + self.cfg.ev_half[1],
                                          obstacle_id=j)

    def system(self, tau, t_end, previous):
        H = t_end - tau
        if previous is not None and previous.states is not None and previous.t_end > tau:
            u = previous.inputs[0][tau - previous.tau:]
            while len(u) < H:
                u = np.vstack([u, u[-1:]])
            x = previous.states[0][tau - previous.tau]
        else:
            u, x = np.zeros((H, 2)), self.x0
        return self.linearize(tau, t_end, x, u)

    def linearize(self, tau, t_end, x, inputs):
        """LTV model around the rollout of ``inputs`` with a steering trust region."""
        u = np.asarray(inputs, dtype=float)[:t_end - tau]
        nominal = bicycle_rollout(x, u, self.cfg.dt, self.params)
        sys = linearize_bicycle(nominal, u, self.cfg.dt, self.params, self.state_set, self.input_set, start=tau)
        lo, hi = self.input_set.lower, self.input_set.upper
        d = self.cfg.steer_trust
        sys.input_sets = [self.input_set.with_box(1, max(lo[1], ub[1] - d), min(hi[1], ub[1] + d)) for ub in u]
        return sys

    def advance(self, tau, x, u, planned_next):
        return euler_step(x, u, self.cfg.dt, self.params)

    def prediction(self, tau):
        if tau not in self._preds:
            self._preds[tau] = self._predict(tau)
        return self._preds[tau]

    def _predict(self, tau: int) -> GmmPrediction:
        cfg = self.cfg
        rng = np.random.default_rng([self.seed, tau])
        pred = GmmPrediction(4)
        t_end = tau + cfg.T
        for j, spec in enumerate(cfg.ovs):
            committed = tau >= spec.commit_step
            modes = [self.true_modes[j]] if committed else list(range(len(spec.mode_accels)))
            samples = {}
            for t in range(tau + 1, t_end + 1):
                groups = []
                for k in modes:
                    a_mean = self.true_accels[j] if committed else spec.mode_accels[k]
                    spread = cfg.sigma_accel * (0.5 if committed else 1.0)
                    acc = a_mean + spread * rng.standard_normal(cfg.n_pose_samples)
                    poses = np.array([_ov_pose(spec, a, t * cfg.dt) for a in acc])
                    groups.append(poses)
                samples[(tau, t)] = groups
            weights_parent = None
            if committed:
                prev_modes = 1 if tau - 1 >= spec.commit_step else len(spec.mode_accels)
                parent = 0 if prev_modes == 1 else self.true_modes[j]
                weights_parent = {tau: (parent,)}
            sub = fit_prediction(samples, self.obstacle(j), 4, (0, 1), weights_parent)
            if not committed:
                w = np.array(spec.mode_weights, dtype=float)
                for key, m in sub.entries.items():
                    m.weights = w / w.sum()
            pred.entries.update(sub.entries)
        return pred

    def cost(self, tau):
        return self._cost

    def interacting(self, tau, planned_states) -> bool:
        x_lo, x_hi, y_lo, y_hi = self.cfg.region
        pts = np.asarray(planned_states)
        inside = (pts[:, 0] >= x_lo) & (pts[:, 0] <= x_hi) & (pts[:, 1] >= y_lo) & (pts[:, 1] <= y_hi)
        return bool(np.any(inside))

    def initial_guess(self, tau, t_end, x):
        u = np.zeros((t_end - tau, 2))
        return bicycle_rollout(x, u, self.cfg.dt, self.params), u

    def travel_time(self, trace: ClosedLoopTrace) -> float:
        for t, x in enumerate(trace.states):
            if x[0] >= self.cfg.region[1]:
                return t * self.cfg.dt
        return len(trace.states) * self.cfg.dt

    def closed_loop_cost(self, trace: ClosedLoopTrace) -> float:
        return self._cost.value(trace.states[-1], trace.inputs)

    def ground_truth_pose(self, j: int, t: int):
        return _ov_pose(self.cfg.ovs[j], self.true_accels[j], t * self.cfg.dt)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class CollisionReport:
    rate: float
    per_step: list


CONTACT_TOL = 1e-6


def evaluate_collision_rate(trace: ClosedLoopTrace, pred_at, n_samples: int = 10_000, seed: int = 0,
                            contact_tol: float = CONTACT_TOL) -> CollisionReport:
    """Empirical collision rate of the executed states.

    ``pred_at(tau)`` returns the prediction made at step ``tau``.  The state
    executed at time t is tested against ``n_samples`` joint face draws from
    the step t - 1 prediction for time t; a draw collides when every face
    value exceeds ``contact_tol`` (touching within solver tolerance is not a
    collision).
    """
    rng = np.random.default_rng(seed)
    per_step = []
    total = 0
    steps = len(trace.states) - 1
    for t in range(1, steps + 1):
        pred = pred_at(t - 1)
        xt = np.append(trace.states[t], 1.0)
        hit = np.zeros(n_samples, dtype=bool)
        if pred is not None:
            for j in pred.obstacles(t - 1):
                if not pred.has(t - 1, t, j):
                    continue
                _, deltas = pred.get(t - 1, t, j).sample(n_samples, rng)
                hit |= np.all(deltas @ xt > contact_tol, axis=1)
        per_step.append(float(hit.mean()))
        total += int(hit.sum())
    rate = total / (n_samples * steps) if steps else 0.0
    return CollisionReport(rate, per_step)


@dataclass(frozen=True)
class TrialRecord:
    seed: int
    planner: PlannerKind
    feasible: bool
    infeasible_at: int | None
    cost: float
    travel_time: float
    collision_rate: float
    worst_solve_time: float


@dataclass(frozen=True)
class MetricsRow:
    planner: PlannerKind
    n_trials: int
    feasibility: float
    travel_time: float
    cost: float
    collision_rate: float
    worst_solve_time: float


def aggregate(records) -> list:
    """Pure fold of trial records into one metrics row per planner (seed order)."""
    out = []
    for kind in PlannerKind:
        rs = sorted((r for r in records if r.planner is kind), key=lambda r: r.seed)
        if not rs:
            continue
        ok = [r for r in rs if r.feasible]
        mean = (lambda xs: float(np.mean(xs)) if xs else math.nan)
        out.append(MetricsRow(kind, len(rs), len(ok) / len(rs), mean([r.travel_time for r in ok]),
                              mean([r.cost for r in ok]), mean([r.collision_rate for r in ok]),
                              mean([r.worst_solve_time for r in rs])))
    return out


@dataclass(frozen=True)
class TrialConfig:
    scene: SceneKind = SceneKind.LANE_CHANGE
    planners: tuple[PlannerKind, ...] = (PlannerKind.NOMINAL, PlannerKind.ROBUST, PlannerKind.CONTINGENCY)
    lane_change: LaneChangeConfig = field(default_factory=LaneChangeConfig)
    intersection: IntersectionConfig = field(default_factory=IntersectionConfig)
    n_trials: int = 10
    seed: int = 0
    collision_samples: int = 10_000
    time_limit: float = 60.0


def make_scene(cfg: TrialConfig, seed: int) -> Scene:
    if cfg.scene is SceneKind.LANE_CHANGE:
        lc = cfg.lane_change
        return LaneChangeScene(lc, gen_lane_change_predictions(lc.T - 1, lc.T, seed, lc))
    return IntersectionScene(cfg.intersection, seed)


def policy_for(cfg: TrialConfig) -> HorizonPolicy:
    if cfg.scene is SceneKind.LANE_CHANGE:
        return HorizonPolicy(HorizonMode.SHRINKING, cfg.lane_change.T)
    ic = cfg.intersection
    return HorizonPolicy(HorizonMode.RECEDING, ic.T, ic.T_s)


def run_trial(cfg: TrialConfig, kind: PlannerKind, trial: int):
    """One closed-loop run; returns (record, trace, scene)."""
    seed = int(np.random.SeedSequence([cfg.seed, trial]).generate_state(1)[0])
    scene = make_scene(cfg, seed)
    trace = run_mpc(kind, policy_for(cfg), scene, cfg.time_limit)
    report = evaluate_collision_rate(trace, scene.prediction, cfg.collision_samples, seed)
    worst = max((p.solve_time for p in trace.plans), default=0.0)
    record = TrialRecord(trial, kind, trace.feasible, trace.infeasible_at,
                         scene.closed_loop_cost(trace) if trace.feasible else math.nan,
                         scene.travel_time(trace), report.rate, worst)
    return record, trace, scene


def run_trials(cfg: TrialConfig, n_trials: int | None = None):
    """All planners over ``n_trials`` seeds; returns (metrics rows, records)."""
    n = cfg.n_trials if n_trials is None else n_trials
    if n < 1:
        raise ValueError("n_trials must be >= 1")
    records = []
    for kind in cfg.planners:
        for trial in range(n):
            records.append(run_trial(cfg, kind, trial)[0])
    return aggregate(records), records


def assumption_table(pred: GmmPrediction, epsilon: float, T: int):
    """Mean-shift check with the uniform allocation; returns the report."""
    return check_mean_shift(pred, allocate_risk(epsilon, T, max(len(pred.obstacles()), 1)))
