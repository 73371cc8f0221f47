"""Ego-vehicle models: ZOH double integrator, kinematic bicycle, constraint sets."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class LinearizationError(ValueError):
    pass


@dataclass
class ConvexSet:
    """Intersection of a box and a list of half-planes ``normal @ x <= offset``."""

    lower: np.ndarray
    upper: np.ndarray
    normals: np.ndarray = None
    offsets: np.ndarray = None

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=float)
        self.upper = np.asarray(self.upper, dtype=float)
        if self.lower.shape != self.upper.shape:
            raise ValueError("box bounds must have matching shapes")
        if np.any(self.lower > self.upper):
            raise ValueError("box lower bound exceeds upper bound")
        n = self.lower.size
        self.normals = np.zeros((0, n)) if self.normals is None else np.atleast_2d(np.asarray(self.normals, float))
        self.offsets = np.zeros(0) if self.offsets is None else np.asarray(self.offsets, float).ravel()
        if self.normals.shape != (self.offsets.size, n):
            raise ValueError("half-plane normals/offsets have inconsistent shapes")

    @classmethod
    def free(cls, n: int) -> "ConvexSet":
        return cls(np.full(n, -np.inf), np.full(n, np.inf))

    @property
    def dim(self) -> int:
        return self.lower.size

    def row_values(self, x) -> np.ndarray:
        """Signed residuals of every row; the point is a member iff all are <= 0."""
        x = np.asarray(x, dtype=float)
        return np.concatenate([self.lower - x, x - self.upper, self.normals @ x - self.offsets])

    def contains(self, x, tol: float = 0.0) -> bool:
        return bool(np.all(self.row_values(x) <= tol))

    def with_box(self, index: int, lower: float, upper: float) -> "ConvexSet":
        lo, hi = self.lower.copy(), self.upper.copy()
        lo[index], hi[index] = lower, upper
        return ConvexSet(lo, hi, self.normals.copy(), self.offsets.copy())


@dataclass
class LtvSystem:
    """x[t+1] = A[t] x[t] + B[t] u[t] + c[t] for t = start .. start + horizon - 1."""

    a_mats: list
    b_mats: list
    state_set: ConvexSet
    input_set: ConvexSet
    affine: list | None = None
    start: int = 0
    input_sets: list | None = None      # optional per-step sets (e.g. trust regions)

    def __post_init__(self):
        self.a_mats = [np.asarray(a, dtype=float) for a in self.a_mats]
        self.b_mats = [np.asarray(b, dtype=float) for b in self.b_mats]
        if len(self.a_mats) != len(self.b_mats):
            raise ValueError("A and B lists differ in length")
        nx, nu = self.b_mats[0].shape
        for a, b in zip(self.a_mats, self.b_mats):
            if a.shape != (nx, nx) or b.shape != (nx, nu):
                raise ValueError("inconsistent system matrix dimensions")
        if self.affine is None:
            self.affine = [np.zeros(nx) for _ in self.a_mats]
        self.affine = [np.asarray(c, dtype=float) for c in self.affine]
        if len(self.affine) != len(self.a_mats):
            raise ValueError("affine list length differs from horizon")
        if self.state_set.dim != nx or self.input_set.dim != nu:
            raise ValueError("constraint sets do not match system dimensions")
        if self.input_sets is not None:
            if len(self.input_sets) != len(self.a_mats) or any(u.dim != nu for u in self.input_sets):
                raise ValueError("need one input set of matching dimension per step")

    def input_set_at(self, t: int) -> ConvexSet:
        return self.input_set if self.input_sets is None else self.input_sets[t - self.start]

    @property
    def horizon(self) -> int:
        return len(self.a_mats)

    @property
    def n_x(self) -> int:
        return self.a_mats[0].shape[0]

    @property
    def n_u(self) -> int:
        return self.b_mats[0].shape[1]

    def covers(self, t0: int, t1: int) -> bool:
        """True when matrices exist for every step t0 <= t < t1."""
        return self.start <= t0 and t1 <= self.start + self.horizon

    def step(self, t: int, x, u) -> np.ndarray:
        k = t - self.start
        return self.a_mats[k] @ x + self.b_mats[k] @ u + self.affine[k]

    def rollout(self, x0, inputs, t0: int | None = None) -> np.ndarray:
        t0 = self.start if t0 is None else t0
        xs = [np.asarray(x0, dtype=float)]
        for s, u in enumerate(inputs):
            xs.append(self.step(t0 + s, xs[-1], u))
        return np.array(xs)


def zoh_matrices(dt: float) -> tuple[np.ndarray, np.ndarray]:
    if dt < 0:
        raise ValueError("dt must be non-negative")
    a = np.eye(4)
    a[0, 2] = a[1, 3] = dt
    b = np.array([[dt * dt / 2, 0.0], [0.0, dt * dt / 2], [dt, 0.0], [0.0, dt]])
    return a, b


def zoh_double_integrator(dt: float, horizon: int = 1, state_set: ConvexSet | None = None,
                          input_set: ConvexSet | None = None, start: int = 0) -> LtvSystem:
    """Exact zero-order-hold discretisation of the planar double integrator.

    State ``(p1, p2, v1, v2)``, input ``(u1, u2)`` (accelerations).
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    a, b = zoh_matrices(dt)
    return LtvSystem([a] * horizon, [b] * horizon,
                     state_set or ConvexSet.free(4), input_set or ConvexSet.free(2), start=start)


# Lane-change constants: input box, velocity box, coupling centres.
LC_INPUT_BOX = ((-10.0, 3.0), (-5.0, 5.0))
LC_VELOCITY_BOX = ((0.0, 22.2), (-5.56, 5.56))
LC_T = (-5.56, 5.56)
LC_C = (0.0, 22.2)
LC_U_SLOPE = 1.3
LC_V_SLOPE = 2.0


def lane_change_sets(p1_bounds=(-np.inf, np.inf), p2_bounds=(-np.inf, np.inf),
                     coupling: str = "literal") -> tuple[ConvexSet, ConvexSet]:
    """State and input sets of the lane-change scene.

    ``coupling="literal"`` expands ``|u1 - t_i| + 1.3 u2 <= 0`` and
    ``|v1 - c_i| + 2 v2 <= 0`` into two linear rows each.  Read literally
    these rows force u2 <= -4.28 and v1 = 11.1, so the scene itself uses
    ``coupling="diamond"``: ``1.3 |u2| <= u1 - t1``, ``1.3 |u2| <= t2 - u1``
    and ``2 |v2| <= v1 - c1``, ``2 |v2| <= c2 - v1``, which keeps the same
    constants and bounds lateral motion by longitudinal motion.
    ``coupling="none"`` keeps only the boxes.
    """
    u_lo = [b[0] for b in LC_INPUT_BOX]
    u_hi = [b[1] for b in LC_INPUT_BOX]
    x_lo = [p1_bounds[0], p2_bounds[0]] + [b[0] for b in LC_VELOCITY_BOX]
    x_hi = [p1_bounds[1], p2_bounds[1]] + [b[1] for b in LC_VELOCITY_BOX]
    u_rows, u_off, x_rows, x_off = [], [], [], []
    if coupling == "literal":
        for t in LC_T:
            # |u1 - t| + k u2 <= 0  <=>  +-(u1 - t) + k u2 <= 0
            u_rows += [[1.0, LC_U_SLOPE], [-1.0, LC_U_SLOPE]]
            u_off += [t, -t]
        for c in LC_C:
            x_rows += [[0, 0, 1.0, LC_V_SLOPE], [0, 0, -1.0, LC_V_SLOPE]]
            x_off += [c, -c]
    elif coupling == "diamond":
        t1, t2 = LC_T
        c1, c2 = LC_C
        for s in (1.0, -1.0):
            u_rows += [[-1.0, s * LC_U_SLOPE], [1.0, s * LC_U_SLOPE]]
            u_off += [-t1, t2]
            x_rows += [[0, 0, -1.0, s * LC_V_SLOPE], [0, 0, 1.0, s * LC_V_SLOPE]]
            x_off += [-c1, c2]
    elif coupling != "none":
        raise ValueError(f"unknown coupling mode {coupling!r}")
    state = ConvexSet(x_lo, x_hi, np.array(x_rows).reshape(-1, 4), np.array(x_off))
    inputs = ConvexSet(u_lo, u_hi, np.array(u_rows).reshape(-1, 2), np.array(u_off))
    return state, inputs


# ---------------------------------------------------------------------------
# Kinematic bicycle
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BicycleParams:
    length: float = 1.0
    rear_length: float = 0.5
    v_bounds: tuple = (0.0, 10.0)
    accel_bounds: tuple = (-4.0, 7.0)
    steer_bounds: tuple = (-math.radians(35.0), math.radians(35.0))

    def __post_init__(self):
        if not 0.0 < self.rear_length < self.length:
            raise ValueError("need 0 < rear_length < length")
        for lo, hi in (self.v_bounds, self.accel_bounds, self.steer_bounds):
            if lo > hi:
                raise ValueError("bounds must be ordered")

    def input_set(self) -> ConvexSet:
        return ConvexSet([self.accel_bounds[0], self.steer_bounds[0]],
                         [self.accel_bounds[1], self.steer_bounds[1]])

    def state_set(self, x_bounds=(-np.inf, np.inf), y_bounds=(-np.inf, np.inf)) -> ConvexSet:
        return ConvexSet([x_bounds[0], y_bounds[0], -np.inf, self.v_bounds[0]],
                         [x_bounds[1], y_bounds[1], np.inf, self.v_bounds[1]])


def _slip(u2: float, p: BicycleParams) -> tuple[float, float]:
    """Slip angle and its derivative with respect to the steering angle."""
    k = p.rear_length / p.length
    t = math.tan(u2)
    gamma = math.atan(k * t)
    dgamma = k * (1.0 + t * t) / (1.0 + k * k * t * t)
    return gamma, dgamma


def bicycle_rhs(x, u, params: BicycleParams = BicycleParams()) -> np.ndarray:
    _, _, psi, v = x
    u1, u2 = u
    gamma, _ = _slip(u2, params)
    return np.array([
        v * math.cos(psi + gamma),
        v * math.sin(psi + gamma),
        v / params.length * math.cos(gamma) * math.tan(u2),
        u1,
    ])


def bicycle_jacobians(x, u, params: BicycleParams = BicycleParams()) -> tuple[np.ndarray, np.ndarray]:
    """Continuous-time Jacobians of ``bicycle_rhs`` with respect to x and u."""
    _, _, psi, v = x
    _, u2 = u
    gamma, dg = _slip(u2, params)
    c, s = math.cos(psi + gamma), math.sin(psi + gamma)
    tan_u2 = math.tan(u2)
    sec2 = 1.0 + tan_u2 * tan_u2
    L = params.length
    fx = np.zeros((4, 4))
    fx[0, 2], fx[0, 3] = -v * s, c
    fx[1, 2], fx[1, 3] = v * c, s
    fx[2, 3] = math.cos(gamma) * tan_u2 / L
    fu = np.zeros((4, 2))
    fu[0, 1] = -v * s * dg
    fu[1, 1] = v * c * dg
    fu[2, 1] = v / L * (-math.sin(gamma) * dg * tan_u2 + math.cos(gamma) * sec2)
    fu[3, 0] = 1.0
    return fx, fu


def euler_step(x, u, dt: float, params: BicycleParams = BicycleParams()) -> np.ndarray:
    return np.asarray(x, dtype=float) + dt * bicycle_rhs(x, u, params)


def bicycle_rollout(x0, inputs, dt: float, params: BicycleParams = BicycleParams()) -> np.ndarray:
    xs = [np.asarray(x0, dtype=float)]
    for u in inputs:
        xs.append(euler_step(xs[-1], u, dt, params))
    return np.array(xs)


MAX_STEER = math.radians(89.0)


def linearize_bicycle(states, inputs, dt: float, params: BicycleParams = BicycleParams(),
                      state_set: ConvexSet | None = None, input_set: ConvexSet | None = None,
                      start: int = 0) -> LtvSystem:
    """Linearise the forward-Euler bicycle map around a nominal trajectory.

    ``states`` holds horizon + 1 states and ``inputs`` horizon inputs.  The
    affine term is chosen so the LTV map sends each nominal pair
    ``(states[t], inputs[t])`` exactly to ``euler_step(states[t], inputs[t])``.
    """
    xs = np.asarray(states, dtype=float)
    us = np.asarray(inputs, dtype=float)
    if xs.shape[0] != us.shape[0] + 1:
        raise ValueError("need one more nominal state than nominal inputs")
    a_mats, b_mats, affine = [], [], []
    for x, u in zip(xs[:-1], us):
        if abs(u[1]) >= MAX_STEER:
            raise LinearizationError(f"steering angle {math.degrees(u[1]):.1f} deg is at the tan singularity")
        fx, fu = bicycle_jacobians(x, u, params)
        a = np.eye(4) + dt * fx
        b = dt * fu
        a_mats.append(a)
        b_mats.append(b)
        affine.append(euler_step(x, u, dt, params) - a @ x - b @ u)
    return LtvSystem(a_mats, b_mats, state_set or params.state_set(), input_set or params.input_set(),
                     affine=affine, start=start)
