import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ccmpc.constraints import allocate_risk
from ccmpc.geometry import (GmmPrediction, ObstacleModes, PolytopeObstacle, PredictionLookupError,
                            check_mean_shift, fit_prediction, pose_to_faces, poses_to_faces,
                            prediction_from_dict, prediction_to_dict, propagation_stats)

coord = st.floats(-20, 20)


@given(coord, coord, st.floats(-math.pi, math.pi), coord, coord)
def test_faces_agree_with_point_in_polygon(x, y, th, px, py):
    obs = PolytopeObstacle.rectangle(2.0, 1.0)
    faces = pose_to_faces((x, y, th), obs)
    vals = faces @ np.array([px, py, 0.0, 0.0, 1.0])
    if np.all(np.abs(vals) > 1e-9):
        assert obs.contains_point((x, y, th), (px, py)) == bool(np.all(vals > 0))


def test_vectorised_faces_match_loop():
    obs = PolytopeObstacle.regular(6, 1.5)
    poses = np.random.default_rng(1).normal(size=(20, 3))
    batch = poses_to_faces(poses, obs)
    for pose, faces in zip(poses, batch):
        assert np.allclose(faces, pose_to_faces(pose, obs), atol=1e-12)


def test_polytope_validation():
    with pytest.raises(ValueError):
        PolytopeObstacle.rectangle(-1.0, 1.0)
    with pytest.raises(ValueError):
        PolytopeObstacle(np.eye(2), np.ones(2))


def test_corners_of_rectangle():
    c = PolytopeObstacle.rectangle(2.0, 1.0).corners((1.0, 0.0, 0.0))
    assert np.allclose(sorted(map(tuple, c)), [(-1, -1), (-1, 1), (3, -1), (3, 1)])


def two_step_prediction(shift: float) -> GmmPrediction:
    obs = PolytopeObstacle.rectangle(1.0, 1.0)
    pred = GmmPrediction(4)
    d = 5
    for tau, scale in ((0, 1.0), (1, 0.5)):
        mean = pose_to_faces((10.0 + (shift if tau else 0.0), 0.0, 0.0), obs)
        cov = scale * np.eye(4 * d)
        pred.add(tau, 3, 0, ObstacleModes([1.0], mean[None], cov[None]))
    return pred


def test_assumption_check_flags_large_shift():
    alloc = allocate_risk(0.05, 3, 1)
    stats = propagation_stats(two_step_prediction(0.0), 3, 0)
    g = stats[0].g
    assert g == pytest.approx(math.sqrt(math.sqrt(5)) - math.sqrt(math.sqrt(5) * 0.5))
    limit = alloc.gamma() * g
    assert check_mean_shift(two_step_prediction(0.9 * limit), alloc).passed
    report = check_mean_shift(two_step_prediction(1.1 * limit), alloc)
    assert not report.passed and report.violations


def test_prediction_round_trip_is_exact():
    pred = two_step_prediction(0.3)
    back = prediction_from_dict(prediction_to_dict(pred))
    for key, m in pred.entries.items():
        b = back.get(*key)
        assert np.array_equal(b.means, m.means) and np.array_equal(b.joint_covs, m.joint_covs)
        assert b.parents == m.parents


def test_lookup_errors():
    pred = two_step_prediction(0.0)
    with pytest.raises(PredictionLookupError):
        pred.get(0, 9, 0)
    with pytest.raises(PredictionLookupError):
        pred.mode_count(5, 0)
    assert pred.modes_nonincreasing()


def test_fit_prediction_moments():
    obs = PolytopeObstacle.rectangle(2.0, 1.0, obstacle_id=3)
    rng = np.random.default_rng(0)
    g0 = np.c_[rng.normal(5, 1, 300), rng.normal(0, 0.1, 300), np.zeros(300)]
    g1 = np.c_[rng.normal(9, 1, 100), rng.normal(0, 0.1, 100), np.zeros(100)]
    pred = fit_prediction({(0, 1): [g0, g1]}, obs)
    m = pred.get(0, 1, 3)
    assert m.weights == pytest.approx([0.75, 0.25])
    assert np.allclose(m.means[0], poses_to_faces(g0, obs).mean(axis=0))


def test_mode_sampling_matches_moments():
    mean = np.arange(10, dtype=float).reshape(2, 5)
    cov = np.diag(np.linspace(0.5, 2.0, 10))
    modes = ObstacleModes([1.0], mean[None], cov[None])
    _, deltas = modes.sample(40_000, np.random.default_rng(0))
    assert np.allclose(deltas.mean(axis=0), mean, atol=0.05)
    assert np.allclose(np.var(deltas.reshape(-1, 10), axis=0), np.diag(cov), rtol=0.05)


def test_obstacle_modes_validation():
    with pytest.raises(ValueError):
        ObstacleModes([0.5, 0.6], np.zeros((2, 4, 5)), np.zeros((2, 20, 20)))
    with pytest.raises(ValueError):
        ObstacleModes([1.0], np.zeros((1, 4, 5)), np.zeros((1, 5, 5)))
