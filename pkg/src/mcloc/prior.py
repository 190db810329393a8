"""Geometric candidate filtering with an uncertain pose prior.

A map point can only match a feature if it lies in the cone around the
feature's world ray.  With a prior known up to a position radius ``d`` and
a heading half-angle ``theta``, the cone opening grows to ``alpha + 2 theta``
and each point is replaced by a ball of radius ``d``; a point survives iff
its ball touches the widened cone.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from mcloc.pose import Pose
from mcloc.rig import CameraRig

DEFAULT_RADIUS_M = 50.0
DEFAULT_HEADING_DEG = 10.0


@dataclass(frozen=True)
class PosePrior:
    prior_pose: Pose
    position_radius: float = DEFAULT_RADIUS_M
    heading_half_angle: float = float(np.radians(DEFAULT_HEADING_DEG))

    def __post_init__(self) -> None:
        if self.position_radius < 0:
            raise ValueError("position_radius must be >= 0")
        if not 0.0 <= self.heading_half_angle < np.pi / 2:
            raise ValueError("heading_half_angle must lie in [0, pi/2)")


@dataclass(frozen=True)
class FilterConfig:
    base_inlier_angle: float = float(np.radians(1.0))

    def __post_init__(self) -> None:
        if self.base_inlier_angle <= 0:
            raise ValueError("base_inlier_angle must be positive")


def expanded_cone_angle(alpha: float, theta: float) -> float:
    out = alpha + 2.0 * theta
    if not out < np.pi / 2:
        raise ValueError(f"widened cone angle {out} rad must stay below pi/2")
    return out


def distance_to_cone(apex, axis, half_angle: float, points) -> np.ndarray:
    """Euclidean distance from points (..., 3) to a solid one-sided cone.

    Reduces to the (axial, radial) half-plane: inside the cone the distance
    is 0; when the nearest point of the boundary generator would lie behind
    the apex the apex itself is nearest; otherwise it is the distance to
    the generator line.
    """
    apex = np.asarray(apex, dtype=float)
    axis = np.asarray(axis, dtype=float)
    v = np.asarray(points, dtype=float) - apex
    h = v @ axis
    rho = np.sqrt(np.maximum(np.sum(v * v, axis=-1) - h * h, 0.0))
    sin_b, cos_b = np.sin(half_angle), np.cos(half_angle)
    along = h * cos_b + rho * sin_b
    lateral = rho * cos_b - h * sin_b
    dist = np.where(along <= 0.0, np.sqrt(h * h + rho * rho), np.maximum(lateral, 0.0))
    return dist


def sphere_intersects_cone(apex, axis, half_angle: float, center, radius: float):
    """True iff the ball of ``radius`` around ``center`` meets the cone."""
    d = distance_to_cone(apex, axis, half_angle, center)
    out = d <= radius
    return bool(out) if np.ndim(out) == 0 else out


def camera_radius(prior: PosePrior, offset: np.ndarray) -> float:
    """Position radius for a camera displaced ``offset`` from the rig origin.

    A rig rotation of at most ``theta`` moves the camera center by the
    chord ``2 |offset| sin(theta / 2)``.
    """
    return prior.position_radius + 2.0 * float(np.linalg.norm(offset)) * np.sin(prior.heading_half_angle / 2)


def feature_cones(prior: PosePrior, cfg: FilterConfig, rig: CameraRig, cam_idx: np.ndarray,
                  bearings: np.ndarray):
    """Per-feature (apex, axis, radius) under the prior plus the shared half-angle."""
    cam_idx = np.asarray(cam_idx, dtype=np.int64)
    T = prior.prior_pose
    apexes = T.transform(rig.offsets)[cam_idx]
    axes = np.einsum("ij,njk,nk->ni", T.R, rig.rotations[cam_idx], bearings)
    radii = np.array([camera_radius(prior, o) for o in rig.offsets])[cam_idx]
    half = expanded_cone_angle(cfg.base_inlier_angle, prior.heading_half_angle)
    return apexes, axes, radii, half


def filter_candidates(prior: PosePrior, cfg: FilterConfig, rig: CameraRig, camera_id: int,
                      bearing, candidates):
    """Keep candidates ``[(point_id, position), ...]`` whose ball meets the feature cone."""
    if len(candidates) == 0:
        return []
    apex, axis, radius, half = feature_cones(prior, cfg, rig, np.array([rig.index_of(camera_id)]),
                                             np.asarray(bearing, dtype=float)[None, :])
    positions = np.array([c[1] for c in candidates], dtype=float).reshape(-1, 3)
    keep = distance_to_cone(apex[0], axis[0], half, positions) <= radius[0]
    return [c for c, k in zip(candidates, keep) if k]


def candidate_mask(apex: np.ndarray, axis: np.ndarray, radius: float, half_angle: float,
                   positions: np.ndarray) -> np.ndarray:
    return distance_to_cone(apex, axis, half_angle, positions) <= radius


def load_priors(path: str | Path) -> dict[int, PosePrior]:
    """Read the per-frame prior JSON array keyed by frame id."""
    records = json.loads(Path(path).read_text())
    if not isinstance(records, list):
        raise ValueError("prior file must hold a JSON array")
    out = {}
    for i, rec in enumerate(records):
        try:
            pose = Pose(np.array(rec["heading_quaternion"], dtype=float),
                        np.array(rec["position"], dtype=float))
            out[int(rec["frame_id"])] = PosePrior(
                pose, float(rec.get("position_radius_m", DEFAULT_RADIUS_M)),
                float(np.radians(rec.get("heading_half_angle_deg", DEFAULT_HEADING_DEG))))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"prior record {i}: {exc}") from exc
    return out


def save_priors(priors: dict[int, PosePrior], path: str | Path) -> None:
    records = []
    for fid in sorted(priors):
        p = priors[fid]
        records.append({
            "frame_id": int(fid),
            "position": [float(v) for v in p.prior_pose.t],
            "heading_quaternion": [float(v) for v in p.prior_pose.q],
            "position_radius_m": float(p.position_radius),
            "heading_half_angle_deg": float(np.degrees(p.heading_half_angle)),
        })
    Path(path).write_text(json.dumps(records, indent=1) + "\n")
