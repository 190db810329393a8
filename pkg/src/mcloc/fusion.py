"""Sliding-window fusion of odometry with localization matches.

Each localization creates a pose node carrying its 2D-3D matches.  Nodes
are chained by relative constraints integrated from odometry, and the
window of the newest ``N`` nodes is re-optimized whenever a node arrives.
A node that leaves the window is frozen and keeps anchoring its successor
through their relative constraint.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from mcloc.pose import Pose, hat, so3_log, so3_right_jacobian_inv
from mcloc.rig import CameraRig, bearing_residuals

_TIME_EPS = 1e-9


class FusionError(RuntimeError):
    pass


def _check_spd(cov: np.ndarray, n: int, name: str) -> np.ndarray:
    cov = np.asarray(cov, dtype=float)
    if cov.shape != (n, n) or not np.allclose(cov, cov.T, rtol=0, atol=1e-15 + 1e-12 * np.abs(cov).max()):
        raise ValueError(f"{name} must be a symmetric {n}x{n} matrix")
    try:
        np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise ValueError(f"{name} must be positive definite") from None
    return cov


@dataclass(frozen=True, eq=False)
class OdometryIncrement:
    t_from: float
    t_to: float
    delta: Pose
    covariance: np.ndarray

    def __post_init__(self) -> None:
        if not self.t_to > self.t_from:
            raise ValueError("odometry increment must move forward in time")
        object.__setattr__(self, "covariance", _check_spd(self.covariance, 6, "odometry covariance"))

    def to_dict(self) -> dict:
        return {"t_from": float(self.t_from), "t_to": float(self.t_to), "delta": self.delta.to_dict(),
                "sigma0_diag": [float(v) for v in np.diag(self.covariance)]}

    @classmethod
    def from_dict(cls, d: dict) -> OdometryIncrement:
        diag = np.asarray(d["sigma0_diag"], dtype=float)
        if diag.shape != (6,):
            raise ValueError("sigma0_diag needs 6 entries")
        return cls(float(d["t_from"]), float(d["t_to"]), Pose.from_dict(d["delta"]), np.diag(diag))


@dataclass(frozen=True, eq=False)
class RelativeConstraint:
    from_id: int
    to_id: int
    delta: Pose
    covariance: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "covariance", _check_spd(self.covariance, 6, "relative covariance"))


@dataclass(eq=False)
class PoseNode:
    node_id: int
    timestamp: float
    pose: Pose
    camera_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    bearings: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    def __post_init__(self) -> None:
        self.camera_ids = np.asarray(self.camera_ids, dtype=np.int64).reshape(-1)
        self.bearings = np.asarray(self.bearings, dtype=float).reshape(-1, 3)
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if not len(self.camera_ids) == len(self.bearings) == len(self.points):
            raise ValueError("match arrays differ in length")

    @property
    def num_matches(self) -> int:
        return len(self.camera_ids)


@dataclass(frozen=True)
class FusionConfig:
    window_size: int = 10
    match_sigma: float = float(np.radians(0.3))
    match_covariance: np.ndarray | None = None  # 2x2, overrides match_sigma
    max_iterations: int = 50
    cost_tolerance: float = 1e-10

    def __post_init__(self) -> None:
        if self.window_size < 2:
            raise ValueError("window_size must be >= 2")
        if self.match_covariance is None and self.match_sigma <= 0:
            raise ValueError("match_sigma must be positive")
        if self.match_covariance is not None:
            _check_spd(self.match_covariance, 2, "match covariance")

    def match_cov(self) -> np.ndarray:
        if self.match_covariance is not None:
            return np.asarray(self.match_covariance, dtype=float)
        return self.match_sigma**2 * np.eye(2)


@dataclass(frozen=True)
class OptimizationReport:
    success: bool
    iterations: int
    initial_cost: float
    final_cost: float
    message: str = ""


def relative_residual(T_a: Pose, T_b: Pose, delta: Pose, jacobians: bool = False):
    """Log of ``T_b^-1 T_a delta`` as (rotation vector, translation).

    Zero exactly when ``T_b = T_a delta``.  With ``jacobians`` also returns
    the 6x6 derivatives w.r.t. the retraction increments of ``T_a`` and ``T_b``.
    """
    RbT = T_b.R.T
    R_e = RbT @ T_a.R @ delta.R
    t_e = RbT @ (T_a.R @ delta.t + T_a.t - T_b.t)
    phi = so3_log(R_e)
    r = np.concatenate([phi, t_e])
    if not jacobians:
        return r
    Jri = so3_right_jacobian_inv(phi)
    Ja = np.zeros((6, 6))
    Jb = np.zeros((6, 6))
    Ja[:3, :3] = Jri @ delta.R.T
    Jb[:3, :3] = -Jri @ R_e.T
    Ja[3:, :3] = -RbT @ T_a.R @ hat(delta.t)
    Ja[3:, 3:] = RbT
    Jb[3:, 3:] = -RbT
    Jb[3:, :3] = hat(t_e)
    return r, Ja, Jb


def match_residual(T: Pose, rig: CameraRig, camera_id: int, bearing, point) -> np.ndarray:
    """Tangent-plane angular deviation (2,) of one observed bearing."""
    r = bearing_residuals(T.R, T.t, rig, np.array([rig.index_of(camera_id)]),
                          np.asarray(bearing, dtype=float)[None], np.asarray(point, dtype=float)[None])
    return r[0]


def _whitener(cov: np.ndarray) -> np.ndarray:
    return np.linalg.inv(np.linalg.cholesky(cov))


class SlidingWindow:
    """The active nodes, their constraints and the frozen anchor."""

    def __init__(self, rig: CameraRig, config: FusionConfig | None = None):
        self.rig = rig
        self.config = config or FusionConfig()
        self.nodes: list[PoseNode] = []
        self.relatives: dict[tuple[int, int], RelativeConstraint] = {}
        self.anchor: PoseNode | None = None
        self._match_w = _whitener(self.config.match_cov())

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def node_ids(self) -> list[int]:
        return [n.node_id for n in self.nodes]

    @property
    def newest(self) -> PoseNode | None:
        return self.nodes[-1] if self.nodes else None

    def add_odometry(self, constraint: RelativeConstraint) -> None:
        ids = self.node_ids
        ok = (constraint.from_id in ids and ids.index(constraint.from_id) + 1 < len(ids)
              and ids[ids.index(constraint.from_id) + 1] == constraint.to_id)
        if not ok:
            raise ValueError("odometry constraints must link consecutive in-window nodes")
        self.relatives[(constraint.from_id, constraint.to_id)] = constraint

    def add_localization(self, node: PoseNode, odometry: RelativeConstraint | None = None,
                         optimize: bool = True) -> OptimizationReport | None:
        if self.nodes:
            last = self.nodes[-1]
            if not node.timestamp > last.timestamp:
                raise ValueError("node timestamps must strictly increase")
            if any(n.node_id == node.node_id for n in self.nodes):
                raise ValueError(f"duplicate node id {node.node_id}")
        if odometry is not None:
            if not self.nodes or odometry.from_id != self.nodes[-1].node_id or odometry.to_id != node.node_id:
                raise ValueError("odometry constraints must link consecutive in-window nodes")
        self.nodes.append(node)
        if odometry is not None:
            self.relatives[(odometry.from_id, odometry.to_id)] = odometry
        while len(self.nodes) > self.config.window_size:
            dropped = self.nodes.pop(0)
            if self.anchor is not None:
                self.relatives.pop((self.anchor.node_id, dropped.node_id), None)
            self.anchor = dropped
        return self.optimize() if optimize else None

    # -- least squares -----------------------------------------------------------

    def _blocks(self):
        """(residual, whitened jacobian blocks) terms for the current state."""
        index = {n.node_id: k for k, n in enumerate(self.nodes)}
        pairs = []
        if self.anchor is not None:
            pairs.append((self.anchor, self.nodes[0]))
        pairs += list(zip(self.nodes[:-1], self.nodes[1:]))
        terms = []
        for a, b in pairs:
            c = self.relatives.get((a.node_id, b.node_id))
            if c is None:
                continue
            W = _whitener(c.covariance)
            r, Ja, Jb = relative_residual(a.pose, b.pose, c.delta, jacobians=True)
            blocks = []
            if a.node_id in index and a is not self.anchor:
                blocks.append((index[a.node_id], W @ Ja))
            blocks.append((index[b.node_id], W @ Jb))
            terms.append((W @ r, blocks))
        for k, n in enumerate(self.nodes):
            if n.num_matches == 0:
                continue
            cam_idx = self.rig.indices_of(n.camera_ids)
            r, J = bearing_residuals(n.pose.R, n.pose.t, self.rig, cam_idx, n.bearings, n.points,
                                     jacobian=True)
            rw = (r @ self._match_w.T).reshape(-1)
            Jw = np.einsum("ij,njk->nik", self._match_w, J).reshape(-1, 6)
            terms.append((rw, [(k, Jw)]))
        return terms

    def cost(self) -> float:
        return float(sum(np.dot(r, r) for r, _ in self._blocks()))

    def _normal_equations(self):
        n = len(self.nodes)
        H = np.zeros((6 * n, 6 * n))
        g = np.zeros(6 * n)
        cost = 0.0
        for r, blocks in self._blocks():
            cost += float(np.dot(r, r))
            for i, Ji in blocks:
                g[6 * i:6 * i + 6] += Ji.T @ r
                for j, Jj in blocks:
                    H[6 * i:6 * i + 6, 6 * j:6 * j + 6] += Ji.T @ Jj
        return H, g, cost

    def _apply(self, delta: np.ndarray) -> list[Pose]:
        return [n.pose.retract(delta[6 * k:6 * k + 6]) for k, n in enumerate(self.nodes)]

    def optimize(self) -> OptimizationReport:
        """Damped Gauss-Newton over the in-window poses; only cost-reducing steps are kept."""
        if not self.nodes:
            raise FusionError("window is empty")
        cfg = self.config
        saved = [n.pose for n in self.nodes]
        H, g, cost = self._normal_equations()
        initial = cost
        if cost <= 1e-20:
            # already at the optimum up to rounding
            return OptimizationReport(True, 0, cost, cost)
        try:
            np.linalg.cholesky(H)
        except np.linalg.LinAlgError:
            return OptimizationReport(False, 0, cost, cost,
                                      "normal equations are not positive definite; poses unchanged")
        mu = 1e-6
        it = 0
        for it in range(1, cfg.max_iterations + 1):
            improved = False
            while mu < 1e10:
                A = H + mu * np.diag(np.diag(H))
                try:
                    step = -np.linalg.solve(A, g)
                except np.linalg.LinAlgError:
                    mu *= 10.0
                    continue
                old = [n.pose for n in self.nodes]
                for n, p in zip(self.nodes, self._apply(step)):
                    n.pose = p
                new_cost = self.cost()
                if new_cost < cost:
                    improved = True
                    break
                for n, p in zip(self.nodes, old):
                    n.pose = p
                mu *= 10.0
            if not improved:
                break
            decrease = cost - new_cost
            mu = max(mu / 10.0, 1e-12)
            H, g, cost = self._normal_equations()
            if decrease < cfg.cost_tolerance or np.linalg.norm(step) < 1e-14:
                break
        if not np.isfinite(cost):
            for n, p in zip(self.nodes, saved):
                n.pose = p
            return OptimizationReport(False, it, initial, initial, "optimization diverged")
        return OptimizationReport(True, it, initial, cost)


def integrate_odometry(increments: list[OdometryIncrement], t_from: float, t_to: float):
    """Compose the increments covering ``[t_from, t_to]``; covariances add up."""
    delta = Pose.identity()
    cov = np.zeros((6, 6))
    for inc in increments:
        if inc.t_from >= t_from - _TIME_EPS and inc.t_to <= t_to + _TIME_EPS:
            delta = delta.compose(inc.delta)
            cov = cov + inc.covariance
    return delta, cov


def query_pose(node: PoseNode, increments: list[OdometryIncrement], timestamp: float) -> Pose:
    if timestamp < node.timestamp - _TIME_EPS:
        raise ValueError("cannot query a pose before the newest node")
    covered = [inc for inc in increments
               if inc.t_from >= node.timestamp - _TIME_EPS and inc.t_to <= timestamp + _TIME_EPS]
    if not covered:
        return node.pose
    delta, _ = integrate_odometry(covered, node.timestamp, timestamp)
    return node.pose.compose(delta)


class FusionEngine:
    """Streams odometry and localizations into a window and answers pose queries.

    Queries read an immutable snapshot of the newest node published after
    each optimization, so they can run concurrently with the writer.
    """

    def __init__(self, rig: CameraRig, config: FusionConfig | None = None):
        self.window = SlidingWindow(rig, config)
        self.increments: list[OdometryIncrement] = []
        self._lock = threading.Lock()
        self._snapshot: PoseNode | None = None
        self._next_id = 0
        self.reports: list[OptimizationReport] = []

    def add_odometry(self, inc: OdometryIncrement) -> None:
        if self.increments and abs(inc.t_from - self.increments[-1].t_to) > _TIME_EPS:
            raise ValueError(f"odometry gap or overlap at t={inc.t_from}")
        self.increments.append(inc)

    def add_localization(self, timestamp: float, pose: Pose, camera_ids=(), bearings=(), points=()) -> OptimizationReport:
        node = PoseNode(self._next_id, float(timestamp), pose, np.asarray(camera_ids),
                        np.asarray(bearings), np.asarray(points))
        rel = None
        prev = self.window.newest
        if prev is not None:
            delta, cov = integrate_odometry(self.increments, prev.timestamp, timestamp)
            if np.any(np.diag(cov) > 0):
                rel = RelativeConstraint(prev.node_id, node.node_id, delta, cov)
        report = self.window.add_localization(node, rel)
        self._next_id += 1
        self.reports.append(report)
        newest = self.window.newest
        with self._lock:
            self._snapshot = PoseNode(newest.node_id, newest.timestamp, newest.pose)
        return report

    @property
    def ready(self) -> bool:
        return self._snapshot is not None

    def query_pose(self, timestamp: float) -> Pose:
        with self._lock:
            node = self._snapshot
        if node is None:
            raise FusionError("no localization has been fused yet")
        return query_pose(node, self.increments, timestamp)
