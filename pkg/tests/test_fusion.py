from __future__ import annotations

import numpy as np
import pytest

from mcloc.fusion import (FusionConfig, FusionEngine, OdometryIncrement, PoseNode, RelativeConstraint,
                          SlidingWindow, match_residual, query_pose, relative_residual)
from mcloc.pose import Pose
from mcloc.refine import refine_pose
from mcloc.rig import angular_error, default_rig
from mcloc.sim import simulate_odometry, straight_trajectory

from conftest import random_pose
from fusion_oracle import solve_window

SIGMA = np.radians(0.3)


def _observations(rng, rig, pose, n=24, noise=0.0):
    """Camera ids, noisy bearings and world points seen from ``pose``."""
    cams = np.resize(rig.camera_ids, n)
    idx = rig.indices_of(cams)
    b = rng.normal(size=(n, 3)) * [0.3, 0.3, 1]
    b[:, 2] = np.abs(b[:, 2]) + 0.5
    b /= np.linalg.norm(b, axis=1, keepdims=True)
    pc = b * rng.uniform(4, 20, (n, 1))
    pts = pose.transform(np.einsum("nij,nj->ni", rig.rotations[idx], pc) + rig.offsets[idx])
    if noise:
        b = b + rng.normal(scale=noise, size=b.shape)
        b /= np.linalg.norm(b, axis=1, keepdims=True)
    return cams, b, pts


def test_identity_residual_is_zero():
    I = Pose.identity()
    assert np.array_equal(relative_residual(I, I, I), np.zeros(6))


def test_consistent_chain_has_zero_residual(rng):
    for _ in range(20):
        T, D = random_pose(rng), random_pose(rng)
        assert np.allclose(relative_residual(T, T.compose(D), D), 0, atol=1e-12)


def test_unit_translation_mismatch():
    I = Pose.identity()
    r = relative_residual(I, Pose.from_rotvec([0, 0, 0], [1.0, 0, 0]), I)
    assert np.linalg.norm(r) == pytest.approx(1.0, abs=1e-15)


def test_relative_jacobians_match_finite_differences(rng):
    eps = 1e-6
    for _ in range(10):
        Ta, Tb, D = random_pose(rng), random_pose(rng), random_pose(rng)
        _, Ja, Jb = relative_residual(Ta, Tb, D, jacobians=True)
        for J, which in ((Ja, 0), (Jb, 1)):
            num = np.zeros((6, 6))
            for i in range(6):
                d = np.zeros(6)
                d[i] = eps
                args_p = [Ta, Tb]
                args_m = [Ta, Tb]
                args_p[which] = args_p[which].retract(d)
                args_m[which] = args_m[which].retract(-d)
                num[:, i] = (relative_residual(*args_p, D) - relative_residual(*args_m, D)) / (2 * eps)
            assert np.linalg.norm(J - num) <= 1e-5 * max(np.linalg.norm(num), 1.0)


def test_match_residual_examples(rng):
    rig = default_rig()
    c = rig.camera(0).rig_from_camera
    on_ray = c.R @ np.array([0, 0, 5.0]) + c.t
    assert np.allclose(match_residual(Pose.identity(), rig, 0, [0, 0, 1.0], on_ray), 0)
    side = c.R @ np.array([5.0, 0, 0]) + c.t
    assert np.linalg.norm(match_residual(Pose.identity(), rig, 0, [0, 0, 1.0], side)) == pytest.approx(np.pi / 2, abs=1e-9)
    pose = random_pose(rng)
    cams, b, pts = _observations(rng, rig, pose, noise=0.02)
    for cam, bb, p in zip(cams, b, pts):
        err = angular_error(pose, rig, int(cam), bb, p)
        assert abs(np.linalg.norm(match_residual(pose, rig, int(cam), bb, p)) - err) < 1e-6


def _node(k, pose, obs=None):
    if obs is None:
        return PoseNode(k, float(k), pose)
    return PoseNode(k, float(k), pose, *obs)


def _chain(rng, n=3, step=2.0):
    truth = [Pose.from_rotvec([0, 0, 0.1 * k], [step * k, 0.3 * k, 1.5]) for k in range(n)]
    return truth


def test_perfect_data_needs_no_iterations(rng):
    rig = default_rig()
    truth = _chain(rng)
    w = SlidingWindow(rig)
    cov = np.eye(6) * 1e-4
    for k, T in enumerate(truth):
        rel = None if k == 0 else RelativeConstraint(k - 1, k, truth[k - 1].inverse().compose(T), cov)
        rep = w.add_localization(_node(k, T, _observations(rng, rig, T)), rel)
        assert rep.success and rep.iterations == 0 and rep.final_cost < 1e-20


def _toy_problem(rng, cov_scale=1e-3):
    rig = default_rig()
    truth = _chain(rng)
    obs = [_observations(rng, rig, T, n=12, noise=SIGMA) for T in truth]
    cov = np.diag([1e-4] * 3 + [1e-2] * 3) * cov_scale / 1e-3
    deltas = [truth[k].inverse().compose(truth[k + 1]).retract(rng.normal(scale=0.05, size=6))
              for k in range(2)]
    starts = [T.retract(rng.normal(scale=0.02, size=6)) for T in truth]
    return rig, truth, obs, cov, deltas, starts


def _window(rig, obs, cov, deltas, starts, match_nodes=(0, 1, 2)):
    w = SlidingWindow(rig, FusionConfig(max_iterations=200, cost_tolerance=1e-16))
    for k, T in enumerate(starts):
        rel = None if k == 0 else RelativeConstraint(k - 1, k, deltas[k - 1], cov)
        w.add_localization(_node(k, T, obs[k] if k in match_nodes else None), rel, optimize=False)
    return w


def test_three_node_window_matches_nlls_oracle(rng):
    rig, truth, obs, cov, deltas, starts = _toy_problem(rng)
    w = _window(rig, obs, cov, deltas, starts)
    before = w.cost()
    rep = w.optimize()
    assert rep.success and rep.final_cost <= before
    matches = [(k, int(c), b, p) for k in range(3) for c, b, p in zip(*obs[k])]
    ref = solve_window(starts, [(0, 1, deltas[0], cov), (1, 2, deltas[1], cov)], matches, rig, SIGMA)
    for n, R in zip(w.nodes, ref):
        assert n.pose.distance_to(R) < 1e-6
        assert n.pose.rotation_to(R) < 1e-6


def test_matches_on_first_node_only_propagate_by_odometry(rng):
    rig, truth, obs, cov, deltas, starts = _toy_problem(rng)
    w = _window(rig, obs, cov, deltas, starts, match_nodes=(0,))
    w.optimize()
    p0 = w.nodes[0].pose
    assert w.nodes[1].pose.allclose(p0.compose(deltas[0]), 1e-8, 1e-8)
    assert w.nodes[2].pose.allclose(p0.compose(deltas[0]).compose(deltas[1]), 1e-8, 1e-8)
    alone = refine_pose(starts[0], obs[0], rig, 1e4, max_iterations=100, min_decrease=0)
    assert p0.allclose(alone.pose, 1e-8, 1e-8)


def test_ignored_odometry_reduces_to_refine_pose(rng):
    rig, truth, obs, cov, deltas, starts = _toy_problem(rng, cov_scale=1e9)
    w = _window(rig, obs, cov, deltas, starts)
    w.optimize()
    for n, s, o in zip(w.nodes, starts, obs):
        alone = refine_pose(s, o, rig, 1e4, max_iterations=100, min_decrease=0)
        assert n.pose.distance_to(alone.pose) < 1e-8
        assert n.pose.rotation_to(alone.pose) < 1e-8


def test_cost_is_gauge_invariant(rng):
    rig, truth, obs, cov, deltas, starts = _toy_problem(rng)
    w = _window(rig, obs, cov, deltas, starts)
    c1 = w.cost()
    G = random_pose(rng, 50.0)
    moved = [G.compose(s) for s in starts]
    obs2 = [(c, b, G.transform(p)) for c, b, p in obs]
    c2 = _window(rig, obs2, cov, deltas, moved).cost()
    assert abs(c1 - c2) <= 1e-9 * max(c1, 1.0)


def test_window_slides():
    rig = default_rig()
    w = SlidingWindow(rig, FusionConfig(window_size=5))
    cov = np.eye(6) * 1e-2
    for k in range(7):
        T = Pose.from_rotvec([0, 0, 0], [k, 0, 0])
        rel = None if k == 0 else RelativeConstraint(k - 1, k, Pose.from_rotvec([0, 0, 0], [1.0, 0, 0]), cov)
        w.add_localization(_node(k, T), rel)
        assert len(w) <= 5
    # 1-based nodes 3..7
    assert w.node_ids == [2, 3, 4, 5, 6]
    assert w.anchor.node_id == 1


def test_dropped_nodes_stay_fixed(rng):
    rig = default_rig()
    truth = [Pose.from_rotvec([0, 0, 0], [2.0 * k, 0, 1.5]) for k in range(8)]
    w = SlidingWindow(rig, FusionConfig(window_size=3))
    cov = np.eye(6) * 1e-3
    frozen = {}
    for k, T in enumerate(truth):
        delta = Pose.from_rotvec([0, 0, 0.01], [2.1, 0, 0])
        rel = None if k == 0 else RelativeConstraint(k - 1, k, delta, cov)
        w.add_localization(_node(k, T.retract(rng.normal(scale=0.05, size=6)),
                                 _observations(rng, rig, T, noise=SIGMA)), rel)
        if w.anchor is not None:
            frozen.setdefault(w.anchor.node_id, w.anchor.pose)
            assert w.anchor.pose == frozen[w.anchor.node_id]


def test_rejects_bad_odometry_and_time():
    rig = default_rig()
    w = SlidingWindow(rig)
    cov = np.eye(6)
    for k in range(3):
        w.add_localization(_node(k, Pose.identity()), optimize=False)
    with pytest.raises(ValueError):
        w.add_odometry(RelativeConstraint(0, 2, Pose.identity(), cov))
    w.add_odometry(RelativeConstraint(1, 2, Pose.identity(), cov))
    with pytest.raises(ValueError):
        w.add_localization(PoseNode(9, 1.5, Pose.identity()))
    with pytest.raises(ValueError):
        RelativeConstraint(0, 1, Pose.identity(), -np.eye(6))


def test_empty_match_node_is_allowed():
    rig = default_rig()
    w = SlidingWindow(rig)
    w.add_localization(_node(0, Pose.identity()))
    rep = w.add_localization(_node(1, Pose.from_rotvec([0, 0, 0], [1, 0, 0])),
                             RelativeConstraint(0, 1, Pose.from_rotvec([0, 0, 0], [1, 0, 0]), np.eye(6)))
    assert rep.success


def test_singular_system_leaves_poses_unchanged():
    rig = default_rig()
    w = SlidingWindow(rig)
    c = rig.camera(0).rig_from_camera
    point = c.R @ np.array([1.0, 0, 5.0]) + c.t
    start = Pose.identity()
    rep = w.add_localization(PoseNode(0, 0.0, start, [0], [[0, 0, 1.0]], [point]))
    assert not rep.success and "positive definite" in rep.message
    assert w.nodes[0].pose == start


def _inc(t0, t1, delta, var=1e-4):
    return OdometryIncrement(t0, t1, delta, np.eye(6) * var)


def test_query_at_newest_node_and_identity_increment():
    node = PoseNode(0, 5.0, Pose.from_rotvec([0, 0, 0.3], [1, 2, 3]))
    assert query_pose(node, [], 5.0) == node.pose
    assert query_pose(node, [_inc(5.0, 6.0, Pose.identity())], 6.0).allclose(node.pose, 1e-15, 1e-15)
    with pytest.raises(ValueError):
        query_pose(node, [], 4.0)


def test_engine_rejects_gaps():
    eng = FusionEngine(default_rig())
    eng.add_odometry(_inc(0.0, 1.0, Pose.identity()))
    with pytest.raises(ValueError):
        eng.add_odometry(_inc(1.5, 2.0, Pose.identity()))


def test_queried_trajectory_is_continuous(rng):
    rig = default_rig()
    traj = straight_trajectory(120, step=1.0)
    odo = simulate_odometry(traj, drift_rate=0.01, rotation_sigma=1e-4, translation_sigma=0.01, seed=2)
    eng = FusionEngine(rig)
    for inc in odo:
        eng.add_odometry(inc)
    queried = []
    for k in range(121):
        if k % 30 == 0:
            T = traj[k].retract(np.r_[np.zeros(3), rng.normal(scale=0.1, size=3)])
            eng.add_localization(float(k), T, *_observations(rng, rig, traj[k], noise=SIGMA))
            continue
        queried.append((k, eng.query_pose(float(k))))
    for (k0, a), (k1, b) in zip(queried, queried[1:]):
        if k1 == k0 + 1:
            assert a.distance_to(b) < 1.0 * 1.01 + 0.1


def test_odometry_dict_roundtrip():
    inc = _inc(0.0, 1.0, Pose.from_rotvec([0, 0, 0.1], [1, 0, 0]), var=2e-3)
    back = OdometryIncrement.from_dict(inc.to_dict())
    assert back.delta == inc.delta and np.array_equal(back.covariance, inc.covariance)
