from __future__ import annotations

import numpy as np
import pytest

from mcloc.pose import Pose
from mcloc.rig import (Camera, CameraRig, DegeneratePointError, angular_error, angular_errors,
                       bearing_residuals, default_rig, tangent_basis)

from conftest import random_pose


@pytest.fixture
def mono_rig() -> CameraRig:
    return CameraRig((Camera(0, Pose.identity(), np.radians(60)),))


def test_point_on_ray_has_zero_error(mono_rig):
    assert angular_error(Pose.identity(), mono_rig, 0, np.array([0, 0, 1.0]), np.array([0, 0, 5.0])) == 0.0


def test_orthogonal_point_error_is_right_angle(mono_rig):
    err = angular_error(Pose.identity(), mono_rig, 0, np.array([0, 0, 1.0]), np.array([0, 5.0, 0]))
    assert abs(err - np.pi / 2) < 1e-15


def test_point_at_camera_center_raises(mono_rig):
    with pytest.raises(DegeneratePointError):
        angular_error(Pose.identity(), mono_rig, 0, np.array([0, 0, 1.0]), np.zeros(3))


def _explicit_error(pose, cam, bearing, point):
    # independent path: build the world camera center and bearing by hand
    c_world = pose.R @ cam.rig_from_camera.t + pose.t
    b_world = pose.R @ (cam.rig_from_camera.R @ bearing)
    d = point - c_world
    cosang = np.dot(b_world, d) / (np.linalg.norm(b_world) * np.linalg.norm(d))
    return np.arccos(np.clip(cosang, -1, 1))


def test_angular_error_matches_explicit_world_frame_computation(rng):
    rig = default_rig()
    for _ in range(200):
        pose = random_pose(rng)
        cam = rig.cameras[rng.integers(len(rig))]
        b = rng.normal(size=3)
        b[2] = abs(b[2])
        b /= np.linalg.norm(b)
        p = rng.normal(scale=10, size=3)
        ours = angular_error(pose, rig, cam.camera_id, b, p)
        ref = _explicit_error(pose, cam, b, p)
        # arccos loses precision near 0 and pi; compare where it is well-conditioned
        if 1e-3 < ref < np.pi - 1e-3:
            assert abs(ours - ref) < 1e-12 / max(np.sin(ref), 1e-3) + 1e-13


def test_angular_error_invariant_under_common_rigid_motion(rng):
    rig = default_rig()
    for _ in range(50):
        pose = random_pose(rng)
        G = random_pose(rng)
        b = np.array([0.1, -0.2, 1.0])
        b /= np.linalg.norm(b)
        p = rng.normal(scale=10, size=3)
        e1 = angular_error(pose, rig, 1, b, p)
        e2 = angular_error(G.compose(pose), rig, 1, b, G.transform(p))
        assert abs(e1 - e2) < 1e-9


def test_batched_errors_match_scalar(rng):
    rig = default_rig()
    poses = [random_pose(rng) for _ in range(4)]
    cam_idx = rng.integers(0, 4, size=20)
    b = rng.normal(size=(20, 3))
    b[:, 2] = np.abs(b[:, 2])
    b /= np.linalg.norm(b, axis=1, keepdims=True)
    pts = rng.normal(scale=10, size=(20, 3))
    o, d = rig.rays_in_rig(cam_idx, b)
    E = angular_errors(np.stack([p.R for p in poses]), np.stack([p.t for p in poses]), o, d, pts)
    for k, pose in enumerate(poses):
        for m in range(20):
            ref = angular_error(pose, rig, int(rig.camera_ids[cam_idx[m]]), b[m], pts[m])
            assert abs(E[k, m] - ref) < 1e-12


def test_tangent_basis_is_orthonormal(rng):
    u = rng.normal(size=(100, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    B = tangent_basis(u)
    assert np.allclose(np.einsum("nij,nik->njk", B, B), np.eye(2), atol=1e-12)
    assert np.allclose(np.einsum("ni,nij->nj", u, B), 0, atol=1e-12)


def test_residual_norm_equals_angular_error(rng):
    rig = default_rig()
    pose = random_pose(rng)
    pts = rng.normal(scale=10, size=(50, 3))
    cam_idx = rng.integers(0, 4, size=50)
    # bearings toward the points, then perturbed by up to ~20 degrees
    Rrc = rig.rotations[cam_idx]
    pc = np.einsum("nji,nj->ni", Rrc, (pts - pose.t) @ pose.R - rig.offsets[cam_idx])
    b = pc / np.linalg.norm(pc, axis=1, keepdims=True) + rng.normal(scale=0.2, size=(50, 3))
    b /= np.linalg.norm(b, axis=1, keepdims=True)
    r = bearing_residuals(pose.R, pose.t, rig, cam_idx, b, pts)
    ref = [angular_error(pose, rig, int(c), bb, p) for c, bb, p in zip(cam_idx, b, pts)]
    assert np.allclose(np.linalg.norm(r, axis=1), ref, atol=1e-12)


def test_residual_jacobian_matches_finite_differences(rng):
    rig = default_rig()
    pose = random_pose(rng)
    pts = rng.normal(scale=10, size=(10, 3))
    cam_idx = rng.integers(0, 4, size=10)
    b = rng.normal(size=(10, 3))
    b /= np.linalg.norm(b, axis=1, keepdims=True)
    _, J = bearing_residuals(pose.R, pose.t, rig, cam_idx, b, pts, jacobian=True)
    eps = 1e-6
    num = np.zeros_like(J)
    for i in range(6):
        d = np.zeros(6)
        d[i] = eps
        pp, pm = pose.retract(d), pose.retract(-d)
        rp = bearing_residuals(pp.R, pp.t, rig, cam_idx, b, pts)
        rm = bearing_residuals(pm.R, pm.t, rig, cam_idx, b, pts)
        num[:, :, i] = (rp - rm) / (2 * eps)
    assert np.allclose(J, num, rtol=1e-5, atol=1e-7)


def test_default_rig_layout():
    rig = default_rig()
    assert list(rig.camera_ids) == [0, 1, 2, 3]
    fwd = np.array([c.rig_from_camera.R[:, 2] for c in rig.cameras])
    # optical axes 90 degrees apart, all horizontal
    assert np.allclose(fwd @ fwd.T, [[1, 0, -1, 0], [0, 1, 0, -1], [-1, 0, 1, 0], [0, -1, 0, 1]], atol=1e-12)
    assert np.allclose(fwd[:, 2], 0)
    assert CameraRig.from_dict(rig.to_dict()).to_dict() == rig.to_dict()


def test_rig_rejects_duplicate_ids():
    cam = Camera(0, Pose.identity(), 1.0)
    with pytest.raises(ValueError):
        CameraRig((cam, cam))
