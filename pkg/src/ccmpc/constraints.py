"""Deterministic reformulation of the collision chance constraints.

Every (t, obstacle j, face i, mode k) contributes one second-order-cone row

    value(x~) <= M z_{ijk}^t,      sum_i z_{ijk}^t = I_j - 1,

where ``x~ = [x, 1]`` and ``value`` is one of

* NOMINAL         gamma * sqrt(x~' S x~) + x~' mu
* ROBUST          gamma * sqrt(||S||_F) * ||x~_s|| + x~' mu
* MOMENT_ROBUST   gamma * sqrt((1 + r2) x~' S x~) + r1 * ||x~_s|| + x~' mu

``x~_s`` restricts ``x~`` to the coordinates face parameters are supported
on (positions and the homogeneous entry); on that support the Frobenius
bound still dominates the nominal term, and it does not grow with speed.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .gmm import inverse_normal_cdf
from .geometry import GmmPrediction, PredictionLookupError

EPSILON_FLOOR = 1e-6
BIG_M_SAFETY = 2.0


class AllocationError(ValueError):
    pass


class BuildError(ValueError):
    pass


class RowKind(enum.Enum):
    NOMINAL = "nominal"
    ROBUST = "robust"
    MOMENT_ROBUST = "moment_robust"


@dataclass(frozen=True)
class RiskAllocation:
    """Uniform allocation of the joint risk budget over time and obstacles.

    Each (t, j) receives epsilon / (T J); every mode of every face receives the
    same value, which satisfies sum_k pi_k eps_k = eps / (T J) because the mode
    weights sum to one.
    """

    epsilon_total: float
    horizon: int
    n_obstacles: int
    per_row: float
    gamma_value: float

    def epsilon(self, t=None, j=None, i=None, k=None) -> float:
        return self.per_row

    def gamma(self, t=None, j=None, i=None, k=None) -> float:
        return self.gamma_value

    def mode_sum(self, weights) -> float:
        """sum_k pi_k eps_k for the given mode weights."""
        weights = np.asarray(weights, dtype=float)
        return float(np.sum(weights * self.per_row))


def allocate_risk(epsilon: float, horizon: int, n_obstacles: int, mode_weights=None) -> RiskAllocation:
    if not 0.0 < epsilon < 0.5:
        raise AllocationError(f"epsilon must lie in (0, 0.5), got {epsilon}")
    if horizon < 1 or n_obstacles < 1:
        raise AllocationError("horizon and obstacle count must be >= 1")
    per = epsilon / (horizon * n_obstacles)
    if per >= 0.5:
        raise AllocationError("per-row risk must be below 0.5")
    per = max(per, EPSILON_FLOOR)
    if mode_weights is not None and abs(float(np.sum(mode_weights)) - 1.0) > 1e-9:
        raise AllocationError("mode weights must sum to one")
    return RiskAllocation(epsilon, horizon, n_obstacles, per, inverse_normal_cdf(1.0 - per))


@dataclass(frozen=True)
class SocRow:
    kind: RowKind
    mean: np.ndarray
    cov: np.ndarray
    gamma: float
    big_m: float
    group: tuple          # (t, j, k) plus optional branch suffix
    face: int
    support: tuple
    r1: float = 0.0
    r2: float = 0.0

    def __post_init__(self):
        if self.gamma <= 0 or self.big_m <= 0:
            raise ValueError("gamma and big_m must be positive")


@dataclass(frozen=True)
class BinaryGroup:
    key: tuple            # (t, j, k) plus optional branch suffix
    rows: tuple           # indices into the row list, ordered by face

    @property
    def size(self) -> int:
        return len(self.rows)


def nominal_value(xt, mean, cov, gamma) -> float:
    xt = np.asarray(xt, dtype=float)
    q = max(float(xt @ cov @ xt), 0.0)
    return gamma * math.sqrt(q) + float(xt @ mean)


def robust_value(xt, mean, cov, gamma, support=None) -> float:
    xt = np.asarray(xt, dtype=float)
    xs = xt if support is None else xt[list(support)]
    return gamma * math.sqrt(np.linalg.norm(cov, "fro")) * float(np.linalg.norm(xs)) + float(xt @ mean)


def moment_robust_value(xt, mean, cov, gamma, r1, r2, support=None) -> float:
    if r1 < 0 or r2 < 0:
        raise ValueError("r1 and r2 must be non-negative")
    xt = np.asarray(xt, dtype=float)
    xs = xt if support is None else xt[list(support)]
    q = max(float(xt @ cov @ xt), 0.0)
    return gamma * math.sqrt((1.0 + r2) * q) + r1 * float(np.linalg.norm(xs)) + float(xt @ mean)


def nominal_row(xt, row: SocRow) -> float:
    return nominal_value(xt, row.mean, row.cov, row.gamma)


def robust_row(xt, row: SocRow) -> float:
    return robust_value(xt, row.mean, row.cov, row.gamma, row.support)


def moment_robust_row(xt, row: SocRow) -> float:
    return moment_robust_value(xt, row.mean, row.cov, row.gamma, row.r1, row.r2, row.support)


def row_value(xt, row: SocRow) -> float:
    if row.kind is RowKind.NOMINAL:
        return nominal_row(xt, row)
    if row.kind is RowKind.ROBUST:
        return robust_row(xt, row)
    return moment_robust_row(xt, row)


def support_radius(state_set, support) -> float:
    """Largest attainable ||[x, 1]_s|| over the box of ``state_set``."""
    n_x = state_set.dim
    total = 0.0
    for idx in support:
        if idx == n_x:
            total += 1.0
            continue
        lim = max(abs(state_set.lower[idx]), abs(state_set.upper[idx]))
        if not np.isfinite(lim):
            raise BuildError(f"big-M needs finite bounds on state coordinate {idx}")
        total += lim * lim
    return math.sqrt(total)


def big_m_value(entries, radius: float) -> float:
    """Big-M from (gamma, ||S||_F, ||mu||, r1, r2) tuples and a state radius.

    M = 2 * (gamma_max * sqrt((1 + r2_max) ||S||_F,max) * R + r1_max * R + ||mu||_max * R),
    kept at least 1.
    """
    g = max(e[0] for e in entries)
    s = max(e[1] for e in entries)
    mu = max(e[2] for e in entries)
    r1 = max(e[3] for e in entries)
    r2 = max(e[4] for e in entries)
    return max(BIG_M_SAFETY * (g * math.sqrt((1.0 + r2) * s) * radius + r1 * radius + mu * radius), 1.0)


def build_rows(pred: GmmPrediction, alloc: RiskAllocation, kind: RowKind, tau: int, horizon: int,
               state_set, modes: dict | None = None, moment_bounds=None, big_m: float | None = None,
               branch: int | None = None):
    """Rows and binary groups for every t in (tau, horizon].

    ``modes`` optionally restricts each obstacle to a subset of its mode
    indices (contingency branches).  ``moment_bounds(t, j, i, k)`` returns
    ``(r1, r2)`` for MOMENT_ROBUST rows.
    """
    support = pred.support
    specs = []
    for t in range(tau + 1, horizon + 1):
        obstacles = pred.obstacles(tau)
        for j in obstacles:
            try:
                m = pred.get(tau, t, j)
            except PredictionLookupError as exc:
                raise BuildError(str(exc)) from None
            ks = range(m.n_modes) if modes is None else sorted(k for k in modes.get(j, ()) if k < m.n_modes)
            for k in ks:
                for i in range(m.n_faces):
                    r1 = r2 = 0.0
                    if kind is RowKind.MOMENT_ROBUST:
                        if moment_bounds is None:
                            raise BuildError("moment-robust rows need concentration bounds")
                        r1, r2 = moment_bounds(t, j, i, k)
                    specs.append((t, j, k, i, m.means[k, i], m.face_cov(k, i), alloc.gamma(t, j, i, k), r1, r2))
    if big_m is None and specs:
        radius = support_radius(state_set, support)
        big_m = big_m_value([(s[6], np.linalg.norm(s[5], "fro"), np.linalg.norm(s[4]), s[7], s[8])
                             for s in specs], radius)
    rows, groups, index = [], [], {}
    for t, j, k, i, mu, cov, gamma, r1, r2 in specs:
        key = (t, j, k) if branch is None else (t, j, k, branch)
        rows.append(SocRow(kind, mu, cov, gamma, big_m, key, i, support, r1, r2))
        index.setdefault(key, []).append(len(rows) - 1)
    for key, members in index.items():
        groups.append(BinaryGroup(key, tuple(members)))
    return rows, groups
