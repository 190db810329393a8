"""Brute-force baseline: exhaustive ratio-test matching and fixed-budget RANSAC.

Used to calibrate what success rate a scene allows, and as the comparison
point for the descriptor-comparison counts of the prioritized matcher.
"""

from __future__ import annotations

import time

import numpy as np

from mcloc.gp3p import gp3p_solve_batch
from mcloc.localizer import FAILED, LOCALIZED, LocalizationResult, LocalizationStats
from mcloc.mapstore import GlobalMap
from mcloc.matcher import FORWARD, Correspondence, QueryFrame
from mcloc.ransac import AcceptanceThresholds, Hypothesis, MatchSet, _make, _score, check_acceptance, evaluate_hypothesis
from mcloc.refine import refine_pose
from mcloc.rig import CameraRig


def exhaustive_matches(frame: QueryFrame, gmap: GlobalMap, ratio: float = 0.9,
                       chunk: int = 32) -> list[Correspondence]:
    """Nearest map point per feature over the whole map, with a ratio test.

    The second-nearest distance is taken over descriptors of other points.
    When several features pick the same point only the closest one is kept.
    """
    E = gmap.entry_descriptors(np.arange(gmap.num_entries)).astype(np.float32)
    e_sq = np.sum(E.astype(np.float64) ** 2, axis=1).astype(np.float32)
    owner = gmap.entry_point
    best: dict[int, Correspondence] = {}
    Fd = np.asarray(frame.descriptors, dtype=np.float32)
    for s in range(0, len(Fd), chunk):
        q = Fd[s:s + chunk]
        sq = e_sq[None, :] + np.sum(q * q, axis=1)[:, None] - 2.0 * (q @ E.T)
        np.maximum(sq, 0.0, out=sq)
        j1 = np.argmin(sq, axis=1)
        d1 = np.sqrt(sq[np.arange(len(q)), j1].astype(np.float64))
        p1 = owner[j1]
        sq[owner[None, :] == p1[:, None]] = np.inf
        d2 = np.sqrt(np.min(sq, axis=1).astype(np.float64))
        for k in np.nonzero(d1 < ratio * d2)[0]:
            f = s + int(k)
            p = int(p1[k])
            c = Correspondence(int(frame.camera_ids[f]), f, int(gmap.point_ids[p]), p, float(d1[k]), FORWARD)
            if p not in best or c.distance < best[p].distance:
                best[p] = c
    return sorted(best.values(), key=lambda c: c.feature)


def plain_ransac(matches: MatchSet, thresholds: AcceptanceThresholds, iterations: int,
                 rng: np.random.Generator, chunk: int = 1000) -> Hypothesis | None:
    """Uniform minimal samples; returns the hypothesis with the most inliers."""
    n = len(matches)
    if n < 3:
        return None
    best: Hypothesis | None = None
    for s in range(0, iterations, chunk):
        k = min(chunk, iterations - s)
        samples = np.array([rng.choice(n, size=3, replace=False) for _ in range(k)])
        R, t, _ = gp3p_solve_batch(matches.origins[samples], matches.directions[samples],
                                   matches.points[samples])
        if len(R) == 0:
            continue
        flags = _score(R, t, matches, thresholds)
        i = int(np.argmax(flags.sum(axis=1)))
        h = _make(R[i], t[i], flags[i], matches.cam_idx)
        if best is None or (h.inlier_count, h.inlier_ratio) > (best.inlier_count, best.inlier_ratio):
            best = h
    return best


def reference_localize(frame: QueryFrame, gmap: GlobalMap, rig: CameraRig,
                       thresholds: AcceptanceThresholds | None = None, iterations: int = 10_000,
                       ratio: float = 0.9, seed: int = 0) -> LocalizationResult:
    thresholds = thresholds or AcceptanceThresholds()
    t0 = time.perf_counter()
    stats = LocalizationStats(total_features=frame.num_features,
                              features_processed=frame.num_features,
                              forward_comparisons=frame.num_features * gmap.num_entries)
    if frame.num_features == 0:
        stats.features_processed = stats.forward_comparisons = 0
        return LocalizationResult(frame.frame_id, FAILED, None, [], stats)
    corrs = exhaustive_matches(frame, gmap, ratio)
    ms = MatchSet(frame, rig, gmap)
    ms.extend(corrs, 1)
    stats.matches_found = len(ms)
    best = plain_ransac(ms, thresholds, iterations, np.random.default_rng(seed))
    stats.ransac_iterations = iterations if len(ms) >= 3 else 0
    status, pose, inliers = FAILED, None, []
    if best is not None and check_acceptance(best, thresholds, len(rig)):
        final = best
        idx = np.nonzero(best.inliers)[0]
        feats = np.array([corrs[i].feature for i in idx])
        res = refine_pose(best.pose, (frame.camera_ids[feats], frame.bearings[feats], ms.points[idx]),
                          rig, thresholds.inlier_angle)
        if res.refined:
            h = evaluate_hypothesis(Hypothesis.from_pose(res.pose), ms, thresholds)
            if check_acceptance(h, thresholds, len(rig)):
                final = h
        status, pose = LOCALIZED, final.pose
        inliers = [corrs[i] for i in np.nonzero(final.inliers)[0]]
    stats.wall_time = time.perf_counter() - t0
    return LocalizationResult(frame.frame_id, status, pose, inliers, stats)
