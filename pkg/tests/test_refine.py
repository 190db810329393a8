from __future__ import annotations

import numpy as np
import pytest

from mcloc.pose import Pose
from mcloc.refine import cauchy_cost, refine_pose
from mcloc.rig import bearing_residuals, default_rig


@pytest.fixture
def scene(rng):
    rig = default_rig()
    truth = Pose.from_rotvec([0.0, 0.0, 0.7], [3.0, -2.0, 1.5])
    cams = np.repeat(np.arange(4), 10)
    b = rng.normal(size=(40, 3))
    b[:, 2] = np.abs(b[:, 2]) + 1.0
    b /= np.linalg.norm(b, axis=1, keepdims=True)
    depth = rng.uniform(4, 20, size=40)
    pc = b * depth[:, None]
    Rrc = rig.rotations[cams]
    prig = np.einsum("nij,nj->ni", Rrc, pc) + rig.offsets[cams]
    pts = truth.transform(prig)
    return rig, truth, cams, b, pts


def _cost(pose, rig, cams, b, pts, thr):
    r = bearing_residuals(pose.R, pose.t, rig, rig.indices_of(cams), b, pts)
    return cauchy_cost(np.sum(r * r, axis=1), thr)


def test_exact_truth_is_returned_unchanged(scene):
    rig, truth, cams, b, pts = scene
    res = refine_pose(truth, (cams, b, pts), rig, np.radians(10))
    assert res.pose == truth
    assert res.cost < 1e-20


def test_perturbed_start_is_recovered(scene):
    rig, truth, cams, b, pts = scene
    start = truth.retract(np.r_[np.radians(0.5) * np.array([0.6, -0.8, 0.0]), 0.1 / np.sqrt(3) * np.ones(3)])
    res = refine_pose(start, (cams, b, pts), rig, np.radians(10))
    assert res.refined
    assert res.pose.rotation_to(truth) < 1e-6
    assert res.pose.distance_to(truth) < 1e-6
    assert res.iterations <= 20


def test_cost_never_increases(scene, rng):
    rig, truth, cams, b, pts = scene
    noisy = b + rng.normal(scale=0.01, size=b.shape)
    noisy /= np.linalg.norm(noisy, axis=1, keepdims=True)
    thr = np.radians(10)
    for _ in range(10):
        start = truth.retract(rng.normal(scale=0.05, size=6))
        res = refine_pose(start, (cams, noisy, pts), rig, thr)
        assert res.cost <= _cost(start, rig, cams, noisy, pts, thr) + 1e-15


def test_three_inliers_is_a_precondition_error(scene):
    rig, truth, cams, b, pts = scene
    with pytest.raises(ValueError):
        refine_pose(truth, (cams[:3], b[:3], pts[:3]), rig, np.radians(10))


def test_rank_deficient_returns_initial_unrefined():
    rig = default_rig()
    # four observations of the same point from one camera: translation along the ray is free
    pose = Pose.from_rotvec([0, 0, 0.1], [1, 2, 3])
    cams = np.zeros(4, dtype=int)
    b = np.tile([0.1, 0.0, 1.0], (4, 1))
    b /= np.linalg.norm(b, axis=1, keepdims=True)
    pts = np.tile([20.0, 5.0, 3.0], (4, 1))
    res = refine_pose(pose, (cams, b, pts), rig, np.radians(10))
    assert not res.refined
    assert res.pose == pose
