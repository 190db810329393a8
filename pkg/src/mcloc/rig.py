"""Multi-camera rig model and bearing-vector geometry."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

from mcloc.pose import Pose, hat


class DegeneratePointError(ValueError):
    """The 3D point coincides with the camera center."""


@dataclass(frozen=True)
class Camera:
    camera_id: int
    rig_from_camera: Pose
    fov_half_angle: float

    def __post_init__(self) -> None:
        if not 0.0 < self.fov_half_angle < np.pi:
            raise ValueError(f"camera {self.camera_id}: fov_half_angle must lie in (0, pi)")

    def to_dict(self) -> dict:
        return {
            "camera_id": int(self.camera_id),
            "rig_from_camera": self.rig_from_camera.to_dict(),
            "fov_half_angle_deg": float(np.degrees(self.fov_half_angle)),
        }

    @classmethod
    def from_dict(cls, d: dict) -> Camera:
        return cls(int(d["camera_id"]), Pose.from_dict(d["rig_from_camera"]),
                   float(np.radians(d["fov_half_angle_deg"])))


@dataclass(frozen=True)
class CameraRig:
    """Rigid set of cameras with known extrinsics.

    Camera frames use the usual optical convention (z forward).  Vectorized
    routines index cameras by position in ``cameras``; ``index_of`` maps a
    camera id to that position.
    """

    cameras: tuple[Camera, ...]

    def __post_init__(self) -> None:
        cams = tuple(self.cameras)
        object.__setattr__(self, "cameras", cams)
        if not cams:
            raise ValueError("a rig needs at least one camera")
        ids = [c.camera_id for c in cams]
        if len(set(ids)) != len(ids):
            raise ValueError("camera ids must be unique")

    def __len__(self) -> int:
        return len(self.cameras)

    @cached_property
    def camera_ids(self) -> np.ndarray:
        return np.array([c.camera_id for c in self.cameras], dtype=np.int64)

    @cached_property
    def _index(self) -> dict[int, int]:
        return {c.camera_id: i for i, c in enumerate(self.cameras)}

    def index_of(self, camera_id: int) -> int:
        try:
            return self._index[int(camera_id)]
        except KeyError:
            raise KeyError(f"unknown camera id {camera_id}") from None

    def indices_of(self, camera_ids: Sequence[int] | np.ndarray) -> np.ndarray:
        return np.array([self._index[int(c)] for c in camera_ids], dtype=np.int64)

    def camera(self, camera_id: int) -> Camera:
        return self.cameras[self.index_of(camera_id)]

    @cached_property
    def offsets(self) -> np.ndarray:
        """Camera centers in the rig frame, shape (C, 3)."""
        return np.array([c.rig_from_camera.t for c in self.cameras])

    @cached_property
    def rotations(self) -> np.ndarray:
        """Rig-from-camera rotations, shape (C, 3, 3)."""
        return np.array([c.rig_from_camera.R for c in self.cameras])

    @cached_property
    def fov_half_angles(self) -> np.ndarray:
        return np.array([c.fov_half_angle for c in self.cameras])

    def rays_in_rig(self, cam_idx: np.ndarray, bearings: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Ray origins and unit directions in the rig frame for camera-frame bearings."""
        cam_idx = np.asarray(cam_idx, dtype=np.int64)
        dirs = np.einsum("nij,nj->ni", self.rotations[cam_idx], bearings)
        return self.offsets[cam_idx], dirs

    def to_dict(self) -> dict:
        return {"cameras": [c.to_dict() for c in self.cameras]}

    @classmethod
    def from_dict(cls, d: dict) -> CameraRig:
        return cls(tuple(Camera.from_dict(c) for c in d["cameras"]))


def default_rig(fov_half_angle_deg: float = 50.0) -> CameraRig:
    """Four cameras looking front, left, back and right of a vehicle.

    Rig frame: x forward, y left, z up.
    """
    cams = []
    layout = [(0.0, (1.5, 0.0, 0.0)), (90.0, (0.0, 0.8, 0.0)),
              (180.0, (-1.0, 0.0, 0.0)), (270.0, (0.0, -0.8, 0.0))]
    for cid, (yaw_deg, offset) in enumerate(layout):
        yaw = np.radians(yaw_deg)
        forward = np.array([np.cos(yaw), np.sin(yaw), 0.0])
        up = np.array([0.0, 0.0, 1.0])
        right = np.cross(forward, up)
        # camera axes x=right, y=down, z=forward expressed in the rig frame
        R = np.column_stack([right, -up, forward])
        cams.append(Camera(cid, Pose.from_matrix(R, offset), np.radians(fov_half_angle_deg)))
    return CameraRig(tuple(cams))


def _angle_between(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    cross = np.linalg.norm(np.cross(a, b), axis=-1)
    dot = np.sum(a * b, axis=-1)
    return np.arctan2(cross, dot)


def world_from_camera(rig_pose: Pose, camera: Camera) -> Pose:
    return rig_pose.compose(camera.rig_from_camera)


def angular_error(rig_pose: Pose, rig: CameraRig, camera_id: int,
                  bearing: np.ndarray, point: np.ndarray) -> float:
    """Angle between an observed bearing and the direction to a world point."""
    T_wc = world_from_camera(rig_pose, rig.camera(camera_id))
    center = T_wc.t
    direction = np.asarray(point, dtype=float) - center
    if np.linalg.norm(direction) <= 1e-12:
        raise DegeneratePointError("point coincides with the camera center")
    world_bearing = T_wc.R @ np.asarray(bearing, dtype=float)
    return float(_angle_between(world_bearing, direction))


def angular_errors(R: np.ndarray, t: np.ndarray, origins: np.ndarray,
                   directions: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Angular errors of rig-frame rays against world points for many poses.

    ``R`` (K, 3, 3) and ``t`` (K, 3) are world-from-rig hypotheses; rays and
    points have shape (M, 3).  Returns (K, M).
    """
    R = np.asarray(R).reshape(-1, 3, 3)
    t = np.asarray(t).reshape(-1, 3)
    # rig-frame point: R^T (P - t)
    y = np.einsum("kji,kmj->kmi", R, points[None, :, :] - t[:, None, :])
    v = y - origins[None]
    return _angle_between(directions[None], v)


def tangent_basis(u: np.ndarray) -> np.ndarray:
    """Orthonormal basis (n, 3, 2) of the tangent plane at each unit vector."""
    u = np.atleast_2d(u)
    helper = np.zeros_like(u)
    use_x = np.abs(u[:, 0]) < 0.9
    helper[use_x, 0] = 1.0
    helper[~use_x, 1] = 1.0
    e1 = np.cross(u, helper)
    e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
    e2 = np.cross(u, e1)
    return np.stack([e1, e2], axis=2)


def bearing_residuals(R: np.ndarray, t: np.ndarray, rig: CameraRig, cam_idx: np.ndarray,
                      bearings: np.ndarray, points: np.ndarray, jacobian: bool = False):
    """Tangent-plane angular residuals of observed bearings.

    The residual is the logarithm map at the observed bearing of the
    predicted direction, expressed in ``tangent_basis(bearing)``; its norm is
    exactly the angular error.  The Jacobian is taken w.r.t. the pose
    increment of :meth:`Pose.retract`.

    Returns ``r`` (n, 2) and optionally ``J`` (n, 2, 6).
    """
    cam_idx = np.asarray(cam_idx, dtype=np.int64)
    Rrc = rig.rotations[cam_idx]
    o = rig.offsets[cam_idx]
    y = (points - t) @ R  # R^T (P - t) row-wise
    pc = np.einsum("nji,nj->ni", Rrc, y - o)
    dist = np.linalg.norm(pc, axis=1)
    if np.any(dist <= 1e-12):
        raise DegeneratePointError("point coincides with the camera center")
    v = pc / dist[:, None]
    B = tangent_basis(bearings)
    w = np.einsum("nij,ni->nj", B, v)
    c = np.sum(bearings * v, axis=1)
    s = np.linalg.norm(w, axis=1)
    theta = np.arctan2(s, c)
    tiny = s < 1e-9
    s_safe = np.where(tiny, 1.0, s)
    f = np.where(tiny, 1.0, theta / s_safe)
    r = f[:, None] * w
    if not jacobian:
        return r
    # dr/dv = f B^T + (c - f)/s^2 w w^T B^T - w u^T
    small = s < 1e-4
    g = np.where(small, -2.0 / 3.0, (c - f) / np.where(small, 1.0, s) ** 2)
    Bt = np.transpose(B, (0, 2, 1))
    wwT = w[:, :, None] * w[:, None, :]
    dr_dv = (f[:, None, None] * Bt + g[:, None, None] * (wwT @ Bt)
             - w[:, :, None] * bearings[:, None, :])
    dv_dpc = (np.eye(3)[None] - v[:, :, None] * v[:, None, :]) / dist[:, None, None]
    dpc_dy = np.transpose(Rrc, (0, 2, 1))
    dy = np.concatenate([hat(y), np.broadcast_to(-R.T, (len(y), 3, 3))], axis=2)
    J = dr_dv @ dv_dpc @ dpc_dy @ dy
    return r, J
