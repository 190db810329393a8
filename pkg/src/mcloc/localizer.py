"""Localization driver: matcher and estimator run until a pose is accepted."""

from __future__ import annotations

import logging
import queue
import threading
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from mcloc.mapstore import GlobalMap
from mcloc.matcher import Correspondence, MatchBatch, MatcherConfig, MatchStats, PrioritizedMatcher, QueryFrame
from mcloc.prior import FilterConfig, PosePrior
from mcloc.ransac import (AcceptanceThresholds, Hypothesis, IterativeRansac, RansacConfig,
                          check_acceptance, evaluate_hypothesis)
from mcloc.refine import refine_pose
from mcloc.rig import CameraRig

log = logging.getLogger(__name__)

LOCALIZED = "localized"
FAILED = "failed"
_DONE = object()


@dataclass(frozen=True)
class LocalizerConfig:
    matcher: MatcherConfig = field(default_factory=MatcherConfig)
    ransac: RansacConfig = field(default_factory=RansacConfig)
    thresholds: AcceptanceThresholds = field(default_factory=AcceptanceThresholds)
    filter: FilterConfig = field(default_factory=FilterConfig)
    refine: bool = True
    threaded: bool = False
    queue_size: int = 4
    seed: int = 0


@dataclass
class LocalizationStats:
    features_processed: int = 0
    total_features: int = 0
    matches_found: int = 0
    ransac_iterations: int = 0
    wall_time: float = 0.0
    forward_comparisons: int = 0
    backward_comparisons: int = 0
    expansion_comparisons: int = 0
    batches: int = 0
    camera_matches: dict = field(default_factory=dict)

    @property
    def descriptor_comparisons(self) -> int:
        return self.forward_comparisons + self.backward_comparisons + self.expansion_comparisons


@dataclass
class LocalizationResult:
    frame_id: int
    status: str
    pose: object = None  # Pose | None
    inliers: list[Correspondence] = field(default_factory=list)
    stats: LocalizationStats = field(default_factory=LocalizationStats)

    @property
    def localized(self) -> bool:
        return self.status == LOCALIZED

    def to_dict(self, timing: bool = True) -> dict:
        stats = asdict(self.stats)
        stats["camera_matches"] = {str(k): v for k, v in sorted(self.stats.camera_matches.items())}
        stats["descriptor_comparisons"] = self.stats.descriptor_comparisons
        if not timing:
            stats.pop("wall_time")
        return {
            "frame_id": int(self.frame_id),
            "status": self.status,
            "pose": None if self.pose is None else self.pose.to_dict(),
            "inliers": [{"camera_id": c.camera_id, "feature": c.feature, "point_id": c.point_id}
                        for c in self.inliers],
            "stats": stats,
        }


def _finish(frame: QueryFrame, rig: CameraRig, est: IterativeRansac, config: LocalizerConfig,
            stats: LocalizationStats) -> LocalizationResult:
    m = est.matches
    stats.matches_found = len(m)
    stats.ransac_iterations = est.iterations
    cams, counts = np.unique(frame.camera_ids[[c.feature for c in m.correspondences]], return_counts=True) \
        if len(m) else (np.zeros(0, int), np.zeros(0, int))
    stats.camera_matches = {int(c): int(n) for c, n in zip(cams, counts)}
    best = est.accepted
    if best is None:
        return LocalizationResult(frame.frame_id, FAILED, None, [], stats)
    final: Hypothesis = best
    if config.refine and best.inlier_count >= 4:
        idx = np.nonzero(best.inliers)[0]
        feats = np.array([m.correspondences[i].feature for i in idx])
        res = refine_pose(best.pose, (frame.camera_ids[feats], frame.bearings[feats], m.points[idx]),
                          rig, config.thresholds.inlier_angle)
        if res.refined:
            h = evaluate_hypothesis(Hypothesis.from_pose(res.pose), m, config.thresholds)
            if check_acceptance(h, config.thresholds, len(rig)):
                final = h
            else:
                log.debug("frame %s: refined pose fails acceptance, keeping RANSAC pose", frame.frame_id)
    inliers = [m.correspondences[i] for i in np.nonzero(final.inliers)[0]]
    return LocalizationResult(frame.frame_id, LOCALIZED, final.pose, inliers, stats)


def localize(frame: QueryFrame, gmap: GlobalMap, rig: CameraRig, prior: PosePrior | None = None,
             config: LocalizerConfig | None = None) -> LocalizationResult:
    """Match and estimate until a pose passes the acceptance rule or features run out.

    With ``config.threaded`` the matcher runs on its own thread and hands
    batches over a bounded queue; otherwise both sides alternate on the
    calling thread, which makes the result reproducible for a fixed seed.
    """
    config = config or LocalizerConfig()
    if not gmap.frozen:
        raise ValueError("map must be frozen before localization")
    t0 = time.perf_counter()
    stats = LocalizationStats(total_features=frame.num_features)
    if frame.num_features == 0:
        return LocalizationResult(frame.frame_id, FAILED, None, [], stats)

    matcher = PrioritizedMatcher(frame, gmap, rig, prior, config.filter, config.matcher)
    est = IterativeRansac(frame, rig, gmap, config.thresholds, config.ransac,
                          np.random.default_rng(config.seed))
    stop = threading.Event()
    consumed = MatchStats()

    def consume(batch: MatchBatch) -> None:
        nonlocal consumed
        consumed = consumed.plus(batch.stats)
        if est.ingest_batch(batch.correspondences):
            stop.set()

    if not config.threaded:
        for batch in matcher.batches(stop):
            consume(batch)
    else:
        q: queue.Queue = queue.Queue(maxsize=max(1, config.queue_size))
        failure: list[BaseException] = []

        def produce() -> None:
            try:
                for batch in matcher.batches(stop):
                    q.put(batch)
            except BaseException as exc:  # surfaced on the caller's thread
                failure.append(exc)
            finally:
                q.put(_DONE)

        worker = threading.Thread(target=produce, name="mcloc-matcher", daemon=True)
        worker.start()
        while True:
            item = q.get()
            if item is _DONE:
                break
            if not stop.is_set():
                consume(item)
        worker.join()
        if failure:
            raise failure[0]

    stats.features_processed = consumed.features_processed
    stats.forward_comparisons = consumed.forward_comparisons
    stats.backward_comparisons = consumed.backward_comparisons
    stats.expansion_comparisons = consumed.expansion_comparisons
    stats.batches = consumed.batches
    result = _finish(frame, rig, est, config, stats)
    stats.wall_time = time.perf_counter() - t0
    return result
