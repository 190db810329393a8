"""Synthetic worlds for exercising the localizer end to end.

Points are scattered uniformly in a box.  Mapping frames are square xy
windows of side ``cell_size`` laid out at half-cell stride, so every point
lies in exactly four of them and two points can only share a frame when
both their x and y offsets are below ``cell_size``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from mcloc.fusion import OdometryIncrement
from mcloc.mapstore import GlobalMap
from mcloc.matcher import QueryFrame
from mcloc.pose import Pose, so3_exp
from mcloc.prior import PosePrior
from mcloc.rig import CameraRig
from mcloc.vocabulary import assign_words, build_vocabulary, normalize_descriptors, pq_train

VEHICLE_HEIGHT = 1.5


@dataclass(frozen=True)
class SceneSpec:
    num_points: int = 50_000
    extent: tuple[float, float] = (500.0, 500.0)
    height: tuple[float, float] = (0.0, 10.0)
    descriptor_dim: int = 128
    descriptor_noise: float = 0.25
    outlier_fraction: float = 0.3
    bearing_noise_deg: float = 0.1
    cell_size: float = 10.0
    max_range: float = 20.0
    min_range: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        checks = [
            ("num_points", self.num_points >= 1),
            ("extent", len(self.extent) == 2 and min(self.extent) > 0),
            ("height", len(self.height) == 2 and self.height[1] >= self.height[0]),
            ("descriptor_dim", self.descriptor_dim >= 1),
            ("descriptor_noise", self.descriptor_noise >= 0),
            ("outlier_fraction", 0.0 <= self.outlier_fraction < 1.0),
            ("bearing_noise_deg", self.bearing_noise_deg >= 0),
            ("cell_size", self.cell_size > 0),
            ("max_range", self.max_range > self.min_range >= 0),
        ]
        for name, ok in checks:
            if not ok:
                raise ValueError(f"invalid scene parameter '{name}'")

    @classmethod
    def from_dict(cls, d: dict) -> SceneSpec:
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown scene parameter(s): {', '.join(sorted(unknown))}")
        d = dict(d)
        for key in ("extent", "height"):
            if key in d:
                d[key] = tuple(float(v) for v in d[key])
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


@dataclass(frozen=True, eq=False)
class Scene:
    spec: SceneSpec
    positions: np.ndarray      # (P, 3)
    templates: np.ndarray      # (P, D) float32 unit rows
    obs_point: np.ndarray      # (O,) point index of each mapping observation
    obs_frame: np.ndarray      # (O,) mapping frame id
    obs_desc: np.ndarray       # (O, D) float32

    @property
    def num_points(self) -> int:
        return len(self.positions)


def _noisy(templates: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Template plus isotropic noise of expected norm ~sigma, back on the sphere."""
    if sigma == 0:
        return np.array(templates, dtype=np.float32)
    D = templates.shape[1]
    noise = rng.normal(0.0, sigma / np.sqrt(D), size=templates.shape)
    return normalize_descriptors(templates.astype(np.float64) + noise)


def _random_unit(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    return normalize_descriptors(rng.normal(size=(n, dim)))


def frame_windows(spec: SceneSpec, xy: np.ndarray) -> np.ndarray:
    """The four mapping frame ids (n, 4) containing each xy position."""
    h = spec.cell_size / 2.0
    ny = int(np.ceil(spec.extent[1] / h)) + 2
    ix = np.floor(xy[:, 0] / h).astype(np.int64)
    iy = np.floor(xy[:, 1] / h).astype(np.int64)
    out = []
    for dx in (-1, 0):
        for dy in (-1, 0):
            out.append((ix + dx + 1) * ny + (iy + dy + 1))
    return np.stack(out, axis=1)


def generate_scene(spec: SceneSpec) -> Scene:
    rng = np.random.default_rng(spec.seed)
    P = spec.num_points
    pos = np.empty((P, 3))
    pos[:, 0] = rng.uniform(0.0, spec.extent[0], P)
    pos[:, 1] = rng.uniform(0.0, spec.extent[1], P)
    pos[:, 2] = rng.uniform(spec.height[0], spec.height[1], P)
    templates = _random_unit(rng, P, spec.descriptor_dim)
    frames = frame_windows(spec, pos[:, :2])
    obs_point = np.repeat(np.arange(P), frames.shape[1])
    obs_frame = frames.reshape(-1)
    obs_desc = _noisy(templates[obs_point], spec.descriptor_noise, rng)
    return Scene(spec, pos, templates, obs_point, obs_frame, obs_desc)


def build_map(scene: Scene, vocab_size: int = 1024, training_samples: int | None = None,
              use_pq: bool = False, seed: int = 0) -> GlobalMap:
    """Train a vocabulary on a subsample of the mapping descriptors and index the scene."""
    rng = np.random.default_rng(seed)
    n = len(scene.obs_desc)
    k = min(n, training_samples or 20 * vocab_size)
    train = scene.obs_desc[np.sort(rng.choice(n, size=k, replace=False))]
    vocab = build_vocabulary(train, vocab_size, seed)
    pq = pq_train(train, seed=seed) if use_pq else None
    gmap = GlobalMap(vocab, pq)
    gmap.add_points(np.arange(scene.num_points), scene.positions)
    words = assign_words(vocab, scene.obs_desc)
    gmap.add_observations(scene.obs_point, words, scene.obs_desc, scene.obs_frame)
    return gmap.freeze()


def random_query_poses(spec: SceneSpec, n: int, rng: np.random.Generator,
                       margin: float | None = None) -> list[Pose]:
    """Vehicle poses at fixed height with uniform position and yaw."""
    margin = spec.max_range if margin is None else margin
    lo = np.array([margin, margin])
    hi = np.array(spec.extent) - margin
    if np.any(hi <= lo):
        lo, hi = np.zeros(2), np.array(spec.extent)
    out = []
    for _ in range(n):
        xy = rng.uniform(lo, hi)
        yaw = rng.uniform(-np.pi, np.pi)
        out.append(Pose.from_rotvec(np.array([0.0, 0.0, yaw]), np.array([xy[0], xy[1], VEHICLE_HEIGHT])))
    return out


def _perturb_bearings(b: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma == 0 or len(b) == 0:
        return b
    helper = np.where(np.abs(b[:, :1]) < 0.9, [[1.0, 0.0, 0.0]], [[0.0, 1.0, 0.0]])
    e1 = np.cross(b, helper)
    e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
    e2 = np.cross(b, e1)
    w = rng.normal(0.0, sigma / np.sqrt(2.0), size=(len(b), 2))
    ang = np.linalg.norm(w, axis=1)
    axis_t = w[:, :1] * e1 + w[:, 1:] * e2
    with np.errstate(invalid="ignore", divide="ignore"):
        unit_t = np.where(ang[:, None] > 0, axis_t / ang[:, None], 0.0)
    out = np.cos(ang)[:, None] * b + np.sin(ang)[:, None] * unit_t
    return out / np.linalg.norm(out, axis=1, keepdims=True)


def _cap_bearings(rng: np.random.Generator, n: int, half_angle: float) -> np.ndarray:
    cos_t = rng.uniform(np.cos(half_angle), 1.0, n)
    sin_t = np.sqrt(1.0 - cos_t**2)
    phi = rng.uniform(0.0, 2 * np.pi, n)
    return np.column_stack([sin_t * np.cos(phi), sin_t * np.sin(phi), cos_t])


@dataclass
class RenderOptions:
    outlier_fraction: float | None = None
    descriptor_noise: float | None = None
    bearing_noise_deg: float | None = None
    max_range: float | None = None


def visible_points(rig: CameraRig, pose: Pose, scene: Scene, max_range: float | None = None,
                   min_range: float | None = None) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """Per camera id: (point indices, exact camera-frame bearings) of visible points."""
    spec = scene.spec
    max_range = spec.max_range if max_range is None else max_range
    min_range = spec.min_range if min_range is None else min_range
    reach = max_range + float(np.max(np.linalg.norm(rig.offsets, axis=1)))
    near = np.nonzero(np.sum((scene.positions - pose.t) ** 2, axis=1) <= reach**2)[0]
    out = {}
    for cam in rig.cameras:
        T = pose.compose(cam.rig_from_camera)
        pc = (scene.positions[near] - T.t) @ T.R
        dist = np.linalg.norm(pc, axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            cos_a = pc[:, 2] / dist
        keep = (dist <= max_range) & (dist >= min_range) & (cos_a > np.cos(cam.fov_half_angle))
        idx = near[keep]
        out[cam.camera_id] = (idx, pc[keep] / dist[keep, None])
    return out


def render_frame(rig: CameraRig, pose: Pose, scene: Scene, rng: np.random.Generator,
                 frame_id: int = 0, timestamp: float = 0.0,
                 options: RenderOptions | None = None) -> tuple[QueryFrame, np.ndarray]:
    """Render a query frame; ``labels[i]`` is the generating point index or -1 for outliers."""
    spec = scene.spec
    opt = options or RenderOptions()
    f_out = spec.outlier_fraction if opt.outlier_fraction is None else opt.outlier_fraction
    s_d = spec.descriptor_noise if opt.descriptor_noise is None else opt.descriptor_noise
    s_b = np.radians(spec.bearing_noise_deg if opt.bearing_noise_deg is None else opt.bearing_noise_deg)
    if not 0.0 <= f_out < 1.0:
        raise ValueError("invalid render parameter 'outlier_fraction'")
    cams, bears, descs, labels = [], [], [], []
    for cam_id, (idx, b) in visible_points(rig, pose, scene, opt.max_range).items():
        n_in = len(idx)
        n_out = int(round(n_in * f_out / (1.0 - f_out)))
        b_in = _perturb_bearings(b, s_b, rng)
        d_in = _noisy(scene.templates[idx], s_d, rng)
        b_out = _cap_bearings(rng, n_out, rig.camera(cam_id).fov_half_angle)
        d_out = _random_unit(rng, n_out, spec.descriptor_dim)
        lab = np.concatenate([idx, np.full(n_out, -1, dtype=np.int64)])
        order = rng.permutation(n_in + n_out)
        cams.append(np.full(n_in + n_out, cam_id, dtype=np.int64))
        bears.append(np.concatenate([b_in, b_out])[order])
        descs.append(np.concatenate([d_in, d_out])[order])
        labels.append(lab[order])
    frame = QueryFrame(frame_id, np.concatenate(cams), np.concatenate(bears).reshape(-1, 3),
                       np.concatenate(descs).reshape(-1, spec.descriptor_dim), timestamp)
    return frame, np.concatenate(labels)


def straight_trajectory(n_steps: int, step: float = 1.0, start=(0.0, 0.0), heading: float = 0.0) -> list[Pose]:
    """``n_steps + 1`` poses along a line at vehicle height."""
    d = np.array([np.cos(heading), np.sin(heading), 0.0])
    p0 = np.array([start[0], start[1], VEHICLE_HEIGHT])
    rv = np.array([0.0, 0.0, heading])
    return [Pose.from_rotvec(rv, p0 + k * step * d) for k in range(n_steps + 1)]


def simulate_odometry(trajectory: list[Pose], drift_rate: float = 0.0, rotation_sigma: float = 0.0,
                      translation_sigma: float = 0.0, seed: int = 0, dt: float = 1.0,
                      t0: float = 0.0) -> list[OdometryIncrement]:
    """Noisy relative poses between consecutive trajectory poses.

    Each step scales the true translation by ``1 + drift_rate`` (a per-meter
    bias), then adds Gaussian tangent noise.  The reported covariance is the
    injected noise covariance (floored so it stays positive definite).
    """
    if len(trajectory) < 2:
        raise ValueError("odometry needs at least two poses")
    rng = np.random.default_rng(seed)
    cov = np.diag([max(rotation_sigma**2, 1e-12)] * 3 + [max(translation_sigma**2, 1e-12)] * 3)
    out = []
    for k in range(len(trajectory) - 1):
        true = trajectory[k].inverse().compose(trajectory[k + 1])
        n_r = rng.normal(0.0, rotation_sigma, 3) if rotation_sigma > 0 else np.zeros(3)
        n_t = rng.normal(0.0, translation_sigma, 3) if translation_sigma > 0 else np.zeros(3)
        delta = Pose.from_matrix(true.R @ so3_exp(n_r), true.t * (1.0 + drift_rate) + n_t)
        out.append(OdometryIncrement(t0 + k * dt, t0 + (k + 1) * dt, delta, cov))
    return out


def perturb_prior(pose: Pose, rng: np.random.Generator, position_sigma: float = 10.0,
                  heading_sigma_deg: float = 5.0, radius: float = 50.0,
                  heading_half_angle_deg: float = 10.0) -> PosePrior:
    """A prior around ``pose`` whose error is guaranteed to lie inside its own bounds."""
    while True:
        dxy = rng.normal(0.0, position_sigma, 2)
        if np.linalg.norm(dxy) <= radius:
            break
    lim = np.radians(heading_half_angle_deg)
    while True:
        yaw = rng.normal(0.0, np.radians(heading_sigma_deg))
        if abs(yaw) <= lim:
            break
    prior = Pose.from_matrix(pose.R @ so3_exp(np.array([0.0, 0.0, yaw])), pose.t + np.r_[dxy, 0.0])
    return PosePrior(prior, radius, lim)


@dataclass
class QuerySet:
    frames: list[QueryFrame] = field(default_factory=list)
    poses: list[Pose] = field(default_factory=list)
    labels: list[np.ndarray] = field(default_factory=list)


def render_queries(rig: CameraRig, scene: Scene, n: int, seed: int,
                   options: RenderOptions | None = None) -> QuerySet:
    """``n`` random query frames; each frame draws from its own seeded stream."""
    out = QuerySet()
    poses = random_query_poses(scene.spec, n, np.random.default_rng([seed, 0]))
    for i, pose in enumerate(poses):
        frame, lab = render_frame(rig, pose, scene, np.random.default_rng([seed, 1, i]), i, float(i), options)
        out.frames.append(frame)
        out.poses.append(pose)
        out.labels.append(lab)
    return out


def save_scene(scene: Scene, path) -> None:
    """Write all scene arrays plus the generating spec to an ``.npz`` file."""
    spec_json = np.frombuffer(json.dumps(scene.spec.to_dict(), sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, positions=scene.positions, templates=scene.templates, obs_point=scene.obs_point,
                 obs_frame=scene.obs_frame, obs_desc=scene.obs_desc, spec=spec_json)


def load_scene(path) -> Scene:
    with np.load(path, allow_pickle=False) as z:
        spec = SceneSpec.from_dict(json.loads(bytes(z["spec"]).decode()))
        return Scene(spec, z["positions"], z["templates"], z["obs_point"], z["obs_frame"], z["obs_desc"])
