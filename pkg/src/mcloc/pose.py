"""Rigid-body poses and SO(3) helpers.

Convention: a ``Pose`` maps points from its child frame into its parent
frame, ``x_parent = R @ x_child + t``.  A rig pose is world-from-rig.
Tangent vectors are ordered rotation first, then translation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.spatial.transform import Rotation

_SMALL_ANGLE = 1e-8


def hat(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix of a 3-vector (supports leading batch dims)."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def so3_exp(phi: np.ndarray) -> np.ndarray:
    """Rodrigues formula; ``phi`` may carry leading batch dimensions."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1)[..., None, None]
    K = hat(phi)
    K2 = K @ K
    small = theta < _SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta**2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta**2 / 24.0, (1.0 - np.cos(safe)) / safe**2)
    return np.eye(3) + a * K + b * K2


def so3_log(R: np.ndarray) -> np.ndarray:
    """Rotation vector of a rotation matrix, robust near 0 and pi."""
    R = np.asarray(R, dtype=float)
    if R.ndim == 2:
        return Rotation.from_matrix(R).as_rotvec()
    return Rotation.from_matrix(R.reshape(-1, 3, 3)).as_rotvec().reshape(R.shape[:-2] + (3,))


def so3_right_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    """Inverse right Jacobian of SO(3): Log(R Exp(d)) ~ Log(R) + Jr^-1 d."""
    phi = np.asarray(phi, dtype=float)
    theta = float(np.linalg.norm(phi))
    K = hat(phi)
    if theta < 1e-6:
        return np.eye(3) + 0.5 * K + (K @ K) / 12.0
    coef = 1.0 / theta**2 - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta))
    return np.eye(3) + 0.5 * K + coef * (K @ K)


def rotation_angle(R: np.ndarray) -> np.ndarray:
    """Angle of a rotation matrix in [0, pi]."""
    return np.linalg.norm(so3_log(R), axis=-1)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    q = Rotation.from_matrix(R).as_quat(scalar_first=True)
    return _canonical(q)


def _canonical(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q)
    if q[0] < 0 or (q[0] == 0 and q[np.nonzero(q)[0][0]] < 0):
        q = -q
    return q


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform stored as unit quaternion ``q = (w, x, y, z)`` and ``t``."""

    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        q = np.asarray(self.q, dtype=float).reshape(4)
        t = np.asarray(self.t, dtype=float).reshape(3)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n < 1e-12:
            raise ValueError("pose quaternion must be finite and non-zero")
        if not np.all(np.isfinite(t)):
            raise ValueError("pose translation must be finite")
        q = _canonical(q)
        q.flags.writeable = False
        t = t.copy()
        t.flags.writeable = False
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> Pose:
        return cls()

    @classmethod
    def from_matrix(cls, R: np.ndarray, t: np.ndarray) -> Pose:
        return cls(matrix_to_quat(np.asarray(R, dtype=float)), t)

    @classmethod
    def from_rotvec(cls, rotvec: np.ndarray, t: np.ndarray) -> Pose:
        return cls.from_matrix(so3_exp(rotvec), t)

    @cached_property
    def R(self) -> np.ndarray:
        R = quat_to_matrix(self.q)
        R.flags.writeable = False
        return R

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def compose(self, other: Pose) -> Pose:
        """``self * other``: apply ``other`` first, then ``self``."""
        return Pose.from_matrix(self.R @ other.R, self.R @ other.t + self.t)

    def __matmul__(self, other: Pose) -> Pose:
        return self.compose(other)

    def inverse(self) -> Pose:
        Rt = self.R.T
        return Pose.from_matrix(Rt, -Rt @ self.t)

    def transform(self, x: np.ndarray) -> np.ndarray:
        """Map points (..., 3) from child to parent frame."""
        return np.asarray(x, dtype=float) @ self.R.T + self.t

    def retract(self, delta: np.ndarray) -> Pose:
        """Apply a tangent increment: ``R Exp(dphi)``, ``t + dt``."""
        delta = np.asarray(delta, dtype=float)
        return Pose.from_matrix(self.R @ so3_exp(delta[:3]), self.t + delta[3:])

    def rotation_to(self, other: Pose) -> float:
        """Angle of the relative rotation between two poses."""
        return float(rotation_angle(self.R.T @ other.R))

    def distance_to(self, other: Pose) -> float:
        return float(np.linalg.norm(self.t - other.t))

    def allclose(self, other: Pose, rot_tol: float = 1e-9, trans_tol: float = 1e-9) -> bool:
        return self.rotation_to(other) <= rot_tol and self.distance_to(other) <= trans_tol

    def to_dict(self) -> dict:
        return {"q": [float(v) for v in self.q], "t": [float(v) for v in self.t]}

    @classmethod
    def from_dict(cls, d: dict) -> Pose:
        return cls(np.array(d["q"], dtype=float), np.array(d["t"], dtype=float))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Pose):
            return NotImplemented
        return bool(np.array_equal(self.q, other.q) and np.array_equal(self.t, other.t))

    def __hash__(self) -> int:
        return hash((self.q.tobytes(), self.t.tobytes()))

    def __repr__(self) -> str:
        q = np.array2string(self.q, precision=6)
        t = np.array2string(self.t, precision=4)
        return f"Pose(q={q}, t={t})"
