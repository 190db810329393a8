"""Iterative RANSAC that runs alongside the matcher.

The estimator keeps the five best hypotheses seen so far.  Every incoming
batch first re-scores that pool against the enlarged match set, and only
if none of them is acceptable yet does it draw new minimal samples.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from mcloc.gp3p import gp3p_solve_batch
from mcloc.mapstore import GlobalMap
from mcloc.matcher import Correspondence, QueryFrame
from mcloc.pose import Pose, rotation_angle
from mcloc.rig import CameraRig, angular_errors

POOL_SIZE = 5
_EVAL_CHUNK = 512


@dataclass(frozen=True)
class AcceptanceThresholds:
    min_inlier_ratio: float = 0.20
    min_inliers: int = 15
    min_camera_fraction: float = 0.5  # inlier cameras must be strictly more than this share
    inlier_angle: float = float(np.radians(10.0))

    def __post_init__(self) -> None:
        if self.min_inlier_ratio <= 0 or self.min_inliers <= 0:
            raise ValueError("acceptance thresholds must be positive")
        if self.min_camera_fraction <= 0 or self.inlier_angle <= 0:
            raise ValueError("acceptance thresholds must be positive")


@dataclass(frozen=True)
class RansacConfig:
    iterations_per_batch: int = 100
    recent_batches: int = 2
    first_sample_limit: int = 3
    sample_attempts: int = 50
    duplicate_translation: float = 1e-6
    duplicate_rotation: float = 1e-8

    def __post_init__(self) -> None:
        if self.iterations_per_batch < 0 or self.recent_batches < 1 or self.first_sample_limit < 1:
            raise ValueError("invalid RANSAC configuration")


@dataclass(frozen=True, eq=False)
class Hypothesis:
    R: np.ndarray
    t: np.ndarray
    inliers: np.ndarray          # bool flags over the current matches
    inlier_count: int
    inlier_ratio: float
    inlier_cameras: int          # distinct cameras among the inliers

    @property
    def pose(self) -> Pose:
        return Pose.from_matrix(self.R, self.t)

    @classmethod
    def from_pose(cls, pose: Pose) -> Hypothesis:
        return cls(pose.R, pose.t, np.zeros(0, bool), 0, 0.0, 0)


class MatchSet:
    """Append-only arrays over all correspondences of the current frame."""

    def __init__(self, frame: QueryFrame, rig: CameraRig, gmap: GlobalMap):
        self.frame = frame
        self.rig = rig
        self.map = gmap
        self.correspondences: list[Correspondence] = []
        self.cam_idx = np.zeros(0, np.int64)
        self.origins = np.zeros((0, 3))
        self.directions = np.zeros((0, 3))
        self.points = np.zeros((0, 3))
        self.batch_of = np.zeros(0, np.int64)
        self._by_frame: dict[int, list[int]] = {}
        self._frames: list[np.ndarray] = []

    def __len__(self) -> int:
        return len(self.correspondences)

    def extend(self, corrs: Sequence[Correspondence], batch_no: int) -> None:
        if not corrs:
            return
        feats = np.array([c.feature for c in corrs], dtype=np.int64)
        pidx = np.array([c.point_index for c in corrs], dtype=np.int64)
        cam_idx = self.rig.indices_of(self.frame.camera_ids[feats])
        o, d = self.rig.rays_in_rig(cam_idx, self.frame.bearings[feats])
        start = len(self.correspondences)
        self.correspondences.extend(corrs)
        self.cam_idx = np.concatenate([self.cam_idx, cam_idx])
        self.origins = np.concatenate([self.origins, o])
        self.directions = np.concatenate([self.directions, d])
        self.points = np.concatenate([self.points, self.map.positions[pidx]])
        self.batch_of = np.concatenate([self.batch_of, np.full(len(corrs), batch_no)])
        for k, p in enumerate(pidx.tolist()):
            frames = self.map.frames_of_indices(p)
            self._frames.append(frames)
            for f in frames.tolist():
                self._by_frame.setdefault(f, []).append(start + k)

    def covisible_with(self, i: int) -> np.ndarray:
        """Indices of other matches whose points share a mapping frame with match ``i``."""
        out: set[int] = set()
        for f in self._frames[i].tolist():
            out.update(self._by_frame[f])
        out.discard(i)
        return np.array(sorted(out), dtype=np.int64)


def sample_minimal(n_matches: int, recent: Sequence[int], first_counts: np.ndarray,
                   covisible_with: Callable[[int], np.ndarray], rng: np.random.Generator,
                   limit: int = 3, attempts: int = 50) -> tuple[int, int, int] | None:
    """Draw three distinct matches, the last two covisible with the first.

    The first match comes from ``recent`` unless every recent match has
    already been drawn first ``limit`` times, in which case all matches are
    eligible.  The other two are drawn from the first one's covisible set.
    ``first_counts`` is updated in place.
    """
    if n_matches < 3:
        return None
    for _ in range(attempts):
        pool = [i for i in recent if first_counts[i] < limit]
        if not pool:
            pool = range(n_matches)
        first = int(pool[int(rng.integers(len(pool)))])
        first_counts[first] += 1
        cov = covisible_with(first)
        if len(cov) < 2:
            continue
        j, k = rng.choice(cov, size=2, replace=False)
        return first, int(j), int(k)
    return None


def _score(R: np.ndarray, t: np.ndarray, matches: MatchSet, thr: AcceptanceThresholds):
    """Inlier flags (K, M) for K poses against all matches."""
    R = R.reshape(-1, 3, 3)
    t = t.reshape(-1, 3)
    out = np.zeros((len(R), len(matches)), dtype=bool)
    for s in range(0, len(R), _EVAL_CHUNK):
        err = angular_errors(R[s:s + _EVAL_CHUNK], t[s:s + _EVAL_CHUNK], matches.origins,
                             matches.directions, matches.points)
        out[s:s + _EVAL_CHUNK] = err < thr.inlier_angle
    return out


def _make(R, t, flags: np.ndarray, cam_idx: np.ndarray) -> Hypothesis:
    n = len(flags)
    count = int(flags.sum())
    cams = len(np.unique(cam_idx[flags])) if count else 0
    return Hypothesis(R, t, flags, count, count / n if n else 0.0, cams)


def evaluate_hypothesis(h: Hypothesis, matches: MatchSet, thresholds: AcceptanceThresholds) -> Hypothesis:
    """Recount inliers of ``h`` over the full current match list."""
    if len(matches) == 0:
        return Hypothesis(h.R, h.t, np.zeros(0, bool), 0, 0.0, 0)
    flags = _score(h.R, h.t, matches, thresholds)[0]
    return _make(h.R, h.t, flags, matches.cam_idx)


def check_acceptance(h: Hypothesis, thresholds: AcceptanceThresholds, n_cameras: int) -> bool:
    return (h.inlier_ratio >= thresholds.min_inlier_ratio
            and h.inlier_count >= thresholds.min_inliers
            and h.inlier_cameras > thresholds.min_camera_fraction * n_cameras)


def _sort_key(h: Hypothesis):
    return (-h.inlier_count, -h.inlier_ratio)


@dataclass
class IterativeRansac:
    """Consumer side of the localizer: owns the match set and hypothesis pool."""

    frame: QueryFrame
    rig: CameraRig
    gmap: GlobalMap
    thresholds: AcceptanceThresholds = field(default_factory=AcceptanceThresholds)
    config: RansacConfig = field(default_factory=RansacConfig)
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    def __post_init__(self) -> None:
        self.matches = MatchSet(self.frame, self.rig, self.gmap)
        self.pool: list[Hypothesis] = []
        self.first_counts = np.zeros(0, np.int64)
        self.batches = 0
        self.iterations = 0
        self.accepted: Hypothesis | None = None

    @property
    def n_cameras(self) -> int:
        return len(self.rig)

    def _insert(self, h: Hypothesis) -> None:
        cfg = self.config
        for k, p in enumerate(self.pool):
            close = (np.linalg.norm(p.t - h.t) < cfg.duplicate_translation
                     and float(rotation_angle(p.R.T @ h.R)) < cfg.duplicate_rotation)
            if close:
                if _sort_key(h) < _sort_key(p):
                    self.pool[k] = h
                    self.pool.sort(key=_sort_key)
                return
        self.pool.append(h)
        self.pool.sort(key=_sort_key)
        del self.pool[POOL_SIZE:]

    def _check_pool(self) -> bool:
        if self.pool and check_acceptance(self.pool[0], self.thresholds, self.n_cameras):
            self.accepted = self.pool[0]
            return True
        return False

    def _recent(self) -> np.ndarray:
        return np.nonzero(self.matches.batch_of > self.batches - self.config.recent_batches)[0]

    def ingest_batch(self, correspondences: Sequence[Correspondence], budget: int | None = None) -> bool:
        """Add a batch of matches; returns True once a hypothesis is accepted."""
        if self.accepted is not None:
            return True
        self.batches += 1
        self.matches.extend(correspondences, self.batches)
        self.first_counts = np.concatenate(
            [self.first_counts, np.zeros(len(self.matches) - len(self.first_counts), np.int64)])
        self.pool = sorted((evaluate_hypothesis(h, self.matches, self.thresholds) for h in self.pool),
                           key=_sort_key)
        if self._check_pool():
            return True
        budget = self.config.iterations_per_batch if budget is None else budget
        if budget <= 0 or len(self.matches) < 3:
            return False
        recent = self._recent().tolist()
        samples = []
        for _ in range(budget):
            s = sample_minimal(len(self.matches), recent, self.first_counts,
                               self.matches.covisible_with, self.rng,
                               self.config.first_sample_limit, self.config.sample_attempts)
            if s is None:
                break
            samples.append(s)
        self.iterations += len(samples)
        if samples:
            self._hypothesize(np.array(samples, dtype=np.int64))
        return self._check_pool()

    def _hypothesize(self, samples: np.ndarray) -> None:
        m = self.matches
        R, t, sidx = gp3p_solve_batch(m.origins[samples], m.directions[samples], m.points[samples])
        if len(R) == 0:
            return
        flags = _score(R, t, m, self.thresholds)
        counts = flags.sum(axis=1)
        # best solution per minimal sample
        order = np.lexsort((-counts, sidx))
        first = np.ones(len(order), dtype=bool)
        first[1:] = sidx[order][1:] != sidx[order][:-1]
        for k in order[first]:
            self._insert(_make(R[k], t[k], flags[k], m.cam_idx))

    def seed(self, pose: Pose) -> None:
        """Put an externally supplied pose into the pool (scored on the next batch)."""
        self._insert(evaluate_hypothesis(Hypothesis.from_pose(pose), self.matches, self.thresholds))
