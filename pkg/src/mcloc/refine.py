"""Robust pose polish on an accepted inlier set."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mcloc.pose import Pose
from mcloc.rig import CameraRig, bearing_residuals


@dataclass(frozen=True)
class RefineResult:
    pose: Pose
    refined: bool
    initial_cost: float
    cost: float
    iterations: int


def cauchy_cost(sq: np.ndarray, scale: float) -> float:
    c2 = scale * scale
    return float(np.sum(c2 * np.log1p(sq / c2)))


def refine_pose(initial: Pose, inliers, rig: CameraRig, robust_threshold: float,
                max_iterations: int = 20, min_decrease: float = 1e-12) -> RefineResult:
    """Levenberg-damped IRLS on Cauchy-robustified angular residuals.

    ``inliers`` is ``(camera_ids, bearings, points)``: camera ids (n,),
    camera-frame unit bearings (n, 3) and world points (n, 3).  A step is
    only accepted if it lowers the robust cost, so the cost never grows.
    """
    camera_ids, bearings, points = inliers
    bearings = np.asarray(bearings, dtype=float).reshape(-1, 3)
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(bearings) < 4:
        raise ValueError("refine_pose needs at least 4 inliers")
    if robust_threshold <= 0:
        raise ValueError("robust_threshold must be positive")
    cam_idx = rig.indices_of(camera_ids)

    def cost_of(pose: Pose) -> float:
        r = bearing_residuals(pose.R, pose.t, rig, cam_idx, bearings, points)
        return cauchy_cost(np.sum(r * r, axis=1), robust_threshold)

    pose = initial
    cost = cost_of(pose)
    initial_cost = cost
    if cost <= 1e-24:
        # already exact up to rounding
        return RefineResult(initial, False, cost, cost, 0)

    c2 = robust_threshold**2
    mu = 1e-4
    it = 0
    for it in range(1, max_iterations + 1):
        r, J = bearing_residuals(pose.R, pose.t, rig, cam_idx, bearings, points, jacobian=True)
        w = 1.0 / (1.0 + np.sum(r * r, axis=1) / c2)
        H = np.einsum("n,nki,nkj->ij", w, J, J)
        g = np.einsum("n,nki,nk->i", w, J, r)
        if np.linalg.matrix_rank(H) < 6:
            return RefineResult(initial, False, initial_cost, initial_cost, it)
        improved = False
        while mu < 1e8:
            A = H + mu * np.diag(np.diag(H))
            try:
                delta = -np.linalg.solve(A, g)
            except np.linalg.LinAlgError:
                mu *= 10.0
                continue
            candidate = pose.retract(delta)
            new_cost = cost_of(candidate)
            if new_cost < cost:
                improved = True
                break
            mu *= 10.0
        if not improved:
            break
        decrease = cost - new_cost
        pose, cost = candidate, new_cost
        mu = max(mu / 10.0, 1e-10)
        if decrease < min_decrease:
            break
    return RefineResult(pose, True, initial_cost, cost, it)
