"""Polytopic obstacles and GMM predictions over face parameters.

A face parameter ``delta`` lives in R^{n_x + 1}: the negated outward unit
normal on the position coordinates, zeros on every other state coordinate,
and a scalar offset last.  A point is on the safe side of face ``i`` when
``delta_i @ [x, 1] <= 0``; it is outside the obstacle when at least one face
is safe.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .gmm import EstimationError, psd_factor, repair_psd

POSITION_INDICES = (0, 1)


class PredictionLookupError(KeyError):
    pass


@dataclass(frozen=True)
class PolytopeObstacle:
    """Convex polygon described by body-frame outward normals and offsets.

    ``rectangle`` builds the usual four-face vehicle footprint; faces are
    ordered front, left, rear, right.
    """

    normals: np.ndarray
    offsets: np.ndarray
    obstacle_id: int = 0
    inflation: float = 0.0

    def __post_init__(self):
        normals = np.atleast_2d(np.asarray(self.normals, dtype=float))
        offsets = np.asarray(self.offsets, dtype=float).ravel()
        if normals.shape[0] < 3 or normals.shape != (offsets.size, 2):
            raise ValueError("a polytope needs at least 3 faces with 2-D normals")
        normals = normals / np.linalg.norm(normals, axis=1, keepdims=True)
        if np.any(offsets + self.inflation <= 0):
            raise ValueError("face offsets must be positive (origin strictly inside)")
        object.__setattr__(self, "normals", normals)
        object.__setattr__(self, "offsets", offsets)

    @classmethod
    def rectangle(cls, half_length: float, half_width: float, obstacle_id: int = 0,
                  inflation: float = 0.0) -> "PolytopeObstacle":
        if half_length <= 0 or half_width <= 0:
            raise ValueError("extents must be positive")
        normals = [[1, 0], [0, 1], [-1, 0], [0, -1]]
        offsets = [half_length, half_width, half_length, half_width]
        return cls(np.array(normals, float), np.array(offsets, float), obstacle_id, inflation)

    @classmethod
    def regular(cls, n_faces: int, apothem: float, obstacle_id: int = 0) -> "PolytopeObstacle":
        ang = 2 * math.pi * np.arange(n_faces) / n_faces
        return cls(np.c_[np.cos(ang), np.sin(ang)], np.full(n_faces, apothem), obstacle_id)

    @property
    def face_count(self) -> int:
        return self.offsets.size

    def world_faces(self, pose) -> tuple[np.ndarray, np.ndarray]:
        """World-frame outward normals and offsets (``n @ p <= b`` inside)."""
        x, y, heading = pose
        c, s = math.cos(heading), math.sin(heading)
        rot = np.array([[c, -s], [s, c]])
        normals = self.normals @ rot.T
        offsets = normals @ np.array([x, y]) + self.offsets + self.inflation
        return normals, offsets

    def contains_point(self, pose, point) -> bool:
        normals, offsets = self.world_faces(pose)
        return bool(np.all(normals @ np.asarray(point, float) < offsets))

    def corners(self, pose) -> np.ndarray:
        """Polygon vertices in counter-clockwise order (for plotting)."""
        normals, offsets = self.world_faces(pose)
        n = len(offsets)
        pts = []
        for i in range(n):
            j = (i + 1) % n
            pts.append(np.linalg.solve(np.vstack([normals[i], normals[j]]), [offsets[i], offsets[j]]))
        return np.array(pts)


def pose_to_faces(pose, obstacle: PolytopeObstacle, n_x: int = 4,
                  pos_idx=POSITION_INDICES) -> np.ndarray:
    """Face parameters (one row per face) for an obstacle at ``pose``."""
    normals, offsets = obstacle.world_faces(pose)
    delta = np.zeros((obstacle.face_count, n_x + 1))
    delta[:, pos_idx[0]] = -normals[:, 0]
    delta[:, pos_idx[1]] = -normals[:, 1]
    delta[:, -1] = offsets
    return delta


def poses_to_faces(poses, obstacle: PolytopeObstacle, n_x: int = 4,
                   pos_idx=POSITION_INDICES) -> np.ndarray:
    """Vectorised ``pose_to_faces`` for an (N, 3) pose array -> (N, I, n_x + 1)."""
    poses = np.atleast_2d(np.asarray(poses, dtype=float))
    c, s = np.cos(poses[:, 2]), np.sin(poses[:, 2])
    bn = obstacle.normals
    nx_w = c[:, None] * bn[None, :, 0] - s[:, None] * bn[None, :, 1]
    ny_w = s[:, None] * bn[None, :, 0] + c[:, None] * bn[None, :, 1]
    out = np.zeros((poses.shape[0], obstacle.face_count, n_x + 1))
    out[:, :, pos_idx[0]] = -nx_w
    out[:, :, pos_idx[1]] = -ny_w
    out[:, :, -1] = nx_w * poses[:, :1] + ny_w * poses[:, 1:2] + obstacle.offsets + obstacle.inflation
    return out


# ---------------------------------------------------------------------------
# Predictions
# ---------------------------------------------------------------------------

@dataclass
class ObstacleModes:
    """Mixture over stacked face parameters of one obstacle at one (tau, t).

    ``means`` has shape (K, I, D); ``joint_covs`` (K, I*D, I*D) couples the
    faces of one mode.  ``parents[k]`` names the mode at the previous planning
    step that mode ``k`` descends from.
    """

    weights: np.ndarray
    means: np.ndarray
    joint_covs: np.ndarray
    parents: tuple | None = None

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float).ravel()
        self.means = np.asarray(self.means, dtype=float)
        self.joint_covs = np.asarray(self.joint_covs, dtype=float)
        k, i, d = self.means.shape
        if self.weights.size != k or self.joint_covs.shape != (k, i * d, i * d):
            raise ValueError("inconsistent mode arrays")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValueError("mode weights must sum to one")
        if self.parents is None:
            self.parents = tuple(range(k))
        self.parents = tuple(int(p) for p in self.parents)
        if len(self.parents) != k:
            raise ValueError("one parent index per mode is required")

    @property
    def n_modes(self) -> int:
        return self.means.shape[0]

    @property
    def n_faces(self) -> int:
        return self.means.shape[1]

    @property
    def dim(self) -> int:
        return self.means.shape[2]

    def face_cov(self, k: int, i: int) -> np.ndarray:
        d = self.dim
        return self.joint_covs[k, i * d:(i + 1) * d, i * d:(i + 1) * d]

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Draw joint face parameters; returns (labels (n,), deltas (n, I, D))."""
        labels = rng.choice(self.n_modes, size=n, p=self.weights)
        z = rng.standard_normal((n, self.n_faces * self.dim))
        out = np.empty((n, self.n_faces * self.dim))
        for k in range(self.n_modes):
            idx = labels == k
            out[idx] = self.means[k].ravel() + z[idx] @ psd_factor(self.joint_covs[k]).T
        return labels, out.reshape(n, self.n_faces, self.dim)


@dataclass
class GmmPrediction:
    """Predicted face-parameter mixtures keyed by (tau, t, obstacle)."""

    n_x: int
    entries: dict = field(default_factory=dict)
    pos_idx: tuple = POSITION_INDICES

    @property
    def support(self) -> tuple:
        """Coordinates of [x, 1] that face parameters can be non-zero on."""
        return tuple(self.pos_idx) + (self.n_x,)

    def add(self, tau: int, t: int, j: int, modes: ObstacleModes):
        if modes.dim != self.n_x + 1:
            raise ValueError("face parameter dimension must be n_x + 1")
        self.entries[(int(tau), int(t), int(j))] = modes

    def get(self, tau: int, t: int, j: int) -> ObstacleModes:
        try:
            return self.entries[(tau, t, j)]
        except KeyError:
            raise PredictionLookupError(f"no prediction for tau={tau}, t={t}, obstacle={j}") from None

    def has(self, tau: int, t: int, j: int) -> bool:
        return (tau, t, j) in self.entries

    def taus(self) -> list:
        return sorted({k[0] for k in self.entries})

    def times(self, tau: int) -> list:
        return sorted({k[1] for k in self.entries if k[0] == tau})

    def obstacles(self, tau: int | None = None) -> list:
        return sorted({k[2] for k in self.entries if tau is None or k[0] == tau})

    def mode_count(self, tau: int, j: int) -> int:
        ts = [k[1] for k in self.entries if k[0] == tau and k[2] == j]
        if not ts:
            raise PredictionLookupError(f"no prediction for tau={tau}, obstacle={j}")
        return self.entries[(tau, min(ts), j)].n_modes

    def at_step(self, tau: int) -> "GmmPrediction":
        sub = GmmPrediction(self.n_x, pos_idx=self.pos_idx)
        sub.entries = {k: v for k, v in self.entries.items() if k[0] == tau}
        return sub

    def merged(self, other: "GmmPrediction") -> "GmmPrediction":
        out = GmmPrediction(self.n_x, dict(self.entries), self.pos_idx)
        out.entries.update(other.entries)
        return out

    def modes_nonincreasing(self) -> bool:
        taus = self.taus()
        for j in self.obstacles():
            counts = [self.mode_count(tau, j) for tau in taus if j in self.obstacles(tau)]
            if any(b > a for a, b in zip(counts, counts[1:])):
                return False
        return True


def fit_prediction(pose_samples: dict, obstacle: PolytopeObstacle, n_x: int = 4,
                   pos_idx=POSITION_INDICES, parents: dict | None = None) -> GmmPrediction:
    """Estimate per-mode face moments from labelled OV pose samples.

    ``pose_samples`` maps ``(tau, t)`` to a list over modes of (N_k, 3) pose
    arrays.  Weights are the group fractions; moments are sample moments of
    the pushed-forward face parameters (unbiased covariance).
    """
    pred = GmmPrediction(n_x, pos_idx=tuple(pos_idx))
    for (tau, t), groups in sorted(pose_samples.items()):
        counts = np.array([len(g) for g in groups])
        means, covs = [], []
        for k, poses in enumerate(groups):
            if len(poses) < 2:
                raise EstimationError(f"tau={tau}, t={t}, mode {k}: need at least 2 pose samples, got {len(poses)}")
            deltas = poses_to_faces(poses, obstacle, n_x, pos_idx)
            flat = deltas.reshape(len(poses), -1)
            means.append(deltas.mean(axis=0))
            covs.append(repair_psd(np.cov(flat, rowvar=False, ddof=1)))
        par = None if parents is None else parents.get(tau)
        pred.add(tau, t, obstacle.obstacle_id,
                 ObstacleModes(counts / counts.sum(), np.array(means), np.array(covs), par))
    return pred


# ---------------------------------------------------------------------------
# Propagation statistics and the mean-shift condition
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PropagationStat:
    t: int
    tau: int
    j: int
    i: int
    k: int
    parent: int
    g: float
    h: float


def propagation_stats(pred: GmmPrediction, t: int, tau: int) -> list:
    """Covariance shrinkage g and mean shift h between steps tau and tau + 1.

    Mode ``k`` at tau + 1 is compared with its parent mode at tau.
    """
    out = []
    for j in pred.obstacles(tau + 1):
        if not pred.has(tau + 1, t, j):
            continue
        before = pred.get(tau, t, j)
        after = pred.get(tau + 1, t, j)
        for k in range(after.n_modes):
            p = after.parents[k]
            if p >= before.n_modes:
                raise PredictionLookupError(f"mode {k} at tau={tau + 1} names missing parent {p}")
            for i in range(after.n_faces):
                g = math.sqrt(np.linalg.norm(before.face_cov(p, i), "fro")) - \
                    math.sqrt(np.linalg.norm(after.face_cov(k, i), "fro"))
                h = float(np.linalg.norm(before.means[p, i] - after.means[k, i]))
                out.append(PropagationStat(t, tau, j, i, k, p, g, h))
    return out


@dataclass
class MeanShiftReport:
    rows: list
    violations: list

    @property
    def passed(self) -> bool:
        return not self.violations

    def table(self) -> list:
        """Records (t, tau, j, i, k, gamma, gamma_g, h, ok) for Fig.-4-style curves."""
        return [dict(t=r["stat"].t, tau=r["stat"].tau, j=r["stat"].j, i=r["stat"].i, k=r["stat"].k,
                     gamma=r["gamma"], gamma_g=r["gamma_g"], h=r["stat"].h, ok=r["ok"]) for r in self.rows]


def check_mean_shift(pred: GmmPrediction, alloc, tol: float = 1e-12) -> MeanShiftReport:
    """Flag every (t, tau, j, i, k) with mean shift above gamma * shrinkage.

    ``alloc`` must expose ``gamma(t, j, i, k)``.
    """
    rows, bad = [], []
    taus = pred.taus()
    for tau in taus:
        if tau + 1 not in taus:
            continue
        for t in pred.times(tau):
            if t < tau + 2:
                continue
            for st in propagation_stats(pred, t, tau):
                gamma = alloc.gamma(st.t, st.j, st.i, st.k)
                ok = st.h <= gamma * st.g + tol
                row = dict(stat=st, gamma=gamma, gamma_g=gamma * st.g, ok=ok)
                rows.append(row)
                if not ok:
                    bad.append(row)
    return MeanShiftReport(rows, bad)


# ---------------------------------------------------------------------------
# Exchange format
# ---------------------------------------------------------------------------

PREDICTION_FORMAT = "ccmpc-prediction/1"


def prediction_to_dict(pred: GmmPrediction) -> dict:
    entries = []
    for (tau, t, j), m in sorted(pred.entries.items()):
        for k in range(m.n_modes):
            entries.append({
                "tau": tau, "t": t, "obstacle": j, "mode": k,
                "weight": float(m.weights[k]), "parent": m.parents[k],
                "faces": [{"mean": m.means[k, i].tolist()} for i in range(m.n_faces)],
                "joint_cov": m.joint_covs[k].tolist(),
            })
    return {"format": PREDICTION_FORMAT, "n_x": pred.n_x, "position_indices": list(pred.pos_idx),
            "entries": entries}


def prediction_from_dict(data: dict) -> GmmPrediction:
    if data.get("format") != PREDICTION_FORMAT:
        raise ValueError(f"unsupported prediction format {data.get('format')!r}")
    n_x = int(data["n_x"])
    pos_idx = tuple(data.get("position_indices", POSITION_INDICES))
    obstacles = {o["id"]: PolytopeObstacle.rectangle(*o["half_extents"], obstacle_id=o["id"],
                                                     inflation=o.get("inflation", 0.0))
                 for o in data.get("obstacles", [])}
    grouped: dict = {}
    for e in data["entries"]:
        grouped.setdefault((e["tau"], e["t"], e["obstacle"]), []).append(e)
    pred = GmmPrediction(n_x, pos_idx=pos_idx)
    d = n_x + 1
    for key, items in sorted(grouped.items()):
        items = sorted(items, key=lambda e: e["mode"])
        if [e["mode"] for e in items] != list(range(len(items))):
            raise ValueError(f"modes of {key} must be numbered 0..K-1")
        parents = tuple(e.get("parent", e["mode"]) if e.get("parent") is not None else e["mode"] for e in items)
        if all("pose_samples" in e for e in items):
            tau, t, j = key
            if j not in obstacles:
                raise ValueError(f"pose samples for obstacle {j} need an 'obstacles' entry")
            groups = [np.asarray(e["pose_samples"], float) for e in items]
            sub = fit_prediction({(tau, t): groups}, obstacles[j], n_x, pos_idx, {tau: parents})
            pred.entries.update(sub.entries)
            continue
        means, covs, weights = [], [], []
        for e in items:
            faces = e["faces"]
            mu = np.array([f["mean"] for f in faces], float)
            if "joint_cov" in e:
                cov = np.array(e["joint_cov"], float)
            else:
                cov = np.zeros((len(faces) * d, len(faces) * d))
                for i, f in enumerate(faces):
                    cov[i * d:(i + 1) * d, i * d:(i + 1) * d] = np.array(f["cov"], float)
            means.append(mu)
            covs.append(repair_psd(cov))
            weights.append(e["weight"])
        pred.add(*key, ObstacleModes(np.array(weights), np.array(means), np.array(covs), parents))
    return pred


def save_prediction(pred: GmmPrediction, path):
    with open(path, "w") as fh:
        json.dump(prediction_to_dict(pred), fh, indent=1)


def load_prediction(path) -> GmmPrediction:
    with open(path) as fh:
        return prediction_from_dict(json.load(fh))
