"""Prioritized 2D-3D descriptor matching across all cameras of a rig.

Features are visited cheapest first, where the cost of a feature is the
number of map descriptors in its visual word and each image's costs are
scaled by a factor that grows with the number of matches already found in
that image.  Accepted 2D-3D matches seed 3D-2D matches for map points that
were observed together with the matched point.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from mcloc.mapstore import GlobalMap
from mcloc.prior import FilterConfig, PosePrior, distance_to_cone, feature_cones
from mcloc.rig import CameraRig
from mcloc.vocabulary import assign_words

COST_LOG_BASE = 6.0

FORWARD = "forward"
EXPANSION = "expansion"


def image_cost_factor(matched: int, base: float = COST_LOG_BASE) -> float:
    """Cost multiplier of an image that already has ``matched`` matches."""
    if matched < 0:
        raise ValueError("match count must be non-negative")
    return math.log(matched + 1) / math.log(base) + 1.0


@dataclass(frozen=True, eq=False)
class QueryFrame:
    """All features of one synchronized multi-camera frame.

    Features are stored flat; ``camera_ids[i]`` names the camera of feature
    ``i`` and ``bearings[i]`` is its unit bearing in that camera's frame.
    """

    frame_id: int
    camera_ids: np.ndarray
    bearings: np.ndarray
    descriptors: np.ndarray
    timestamp: float = 0.0

    def __post_init__(self) -> None:
        cam = np.asarray(self.camera_ids, dtype=np.int64).reshape(-1)
        b = np.asarray(self.bearings, dtype=np.float64).reshape(-1, 3)
        d = np.asarray(self.descriptors, dtype=np.float32)
        if d.ndim != 2:
            d = d.reshape(len(cam), -1)
        if not (len(cam) == len(b) == len(d)):
            raise ValueError("camera_ids, bearings and descriptors differ in length")
        if len(b) and np.any(np.abs(np.linalg.norm(b, axis=1) - 1.0) > 1e-9):
            raise ValueError("bearings must be unit vectors")
        if len(b) and np.any(b[:, 2] <= 0):
            raise ValueError("bearings must point in front of their camera (z > 0)")
        for name, arr in (("camera_ids", cam), ("bearings", b), ("descriptors", d)):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def num_features(self) -> int:
        return len(self.camera_ids)

    @classmethod
    def from_cameras(cls, frame_id: int, cameras: dict, timestamp: float = 0.0,
                     dim: int | None = None) -> QueryFrame:
        """Build from ``{camera_id: (bearings (n, 3), descriptors (n, D))}``."""
        cams, bears, descs = [], [], []
        for cid in sorted(cameras):
            b, d = cameras[cid]
            b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
            cams.append(np.full(len(b), cid, dtype=np.int64))
            bears.append(b)
            descs.append(np.asarray(d, dtype=np.float32).reshape(len(b), -1))
        if not cams:
            return cls(frame_id, np.zeros(0, np.int64), np.zeros((0, 3)),
                       np.zeros((0, dim or 0), np.float32), timestamp)
        if dim is not None:
            descs = [d.reshape(-1, dim) for d in descs]
        return cls(frame_id, np.concatenate(cams), np.concatenate(bears),
                   np.concatenate(descs), timestamp)


@dataclass(frozen=True)
class Correspondence:
    camera_id: int
    feature: int          # index into the frame's flat feature arrays
    point_id: int
    point_index: int      # row in the frozen map
    distance: float
    origin: str = FORWARD
    generating_distance: float | None = None


@dataclass(frozen=True)
class MatcherConfig:
    ratio_forward: float = 0.9
    ratio_backward: float = 0.9
    batch_size: int = 20
    balance: bool = True
    cost_log_base: float = COST_LOG_BASE
    expand: bool = True
    expansion_distance_factor: float = 2.0

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not (0 < self.ratio_forward <= 1 and 0 < self.ratio_backward <= 1):
            raise ValueError("ratio thresholds must lie in (0, 1]")


@dataclass
class MatchStats:
    features_processed: int = 0
    forward_comparisons: int = 0
    backward_comparisons: int = 0
    expansion_comparisons: int = 0
    forward_matches: int = 0
    expansion_matches: int = 0
    batches: int = 0

    @property
    def descriptor_comparisons(self) -> int:
        return self.forward_comparisons + self.backward_comparisons + self.expansion_comparisons

    def minus(self, other: MatchStats) -> MatchStats:
        return MatchStats(*(getattr(self, f) - getattr(other, f) for f in self.__dataclass_fields__))

    def plus(self, other: MatchStats) -> MatchStats:
        return MatchStats(*(getattr(self, f) + getattr(other, f) for f in self.__dataclass_fields__))


@dataclass
class MatchBatch:
    correspondences: list[Correspondence]
    stats: MatchStats = field(default_factory=MatchStats)


class PriorityState:
    """Per-image feature queues plus the match-count balancing factor."""

    def __init__(self, camera_ids: np.ndarray, costs: np.ndarray, balance: bool = True,
                 base: float = COST_LOG_BASE):
        camera_ids = np.asarray(camera_ids, dtype=np.int64)
        costs = np.asarray(costs, dtype=np.float64)
        self.balance = balance
        self.base = base
        self.cameras = sorted(set(camera_ids.tolist()))
        self.queues: dict[int, np.ndarray] = {}
        for cam in self.cameras:
            idx = np.nonzero(camera_ids == cam)[0]
            order = np.lexsort((idx, costs[idx]))
            self.queues[cam] = idx[order]
        self.costs = costs
        self.heads = {cam: 0 for cam in self.cameras}
        self.matched = {cam: 0 for cam in self.cameras}

    def factor(self, cam: int) -> float:
        return image_cost_factor(self.matched[cam], self.base) if self.balance else 1.0

    def peek(self) -> tuple[int, int] | None:
        best = None
        for cam in self.cameras:
            h = self.heads[cam]
            q = self.queues[cam]
            if h >= len(q):
                continue
            feat = int(q[h])
            key = (self.factor(cam) * self.costs[feat], cam, feat)
            if best is None or key < best:
                best = key
        return None if best is None else (best[1], best[2])

    def next_feature(self) -> tuple[int, int] | None:
        """Pop the (camera_id, feature) with the lowest scaled cost, or None."""
        nxt = self.peek()
        if nxt is not None:
            self.heads[nxt[0]] += 1
        return nxt

    def record_match(self, camera_id: int) -> None:
        self.matched[camera_id] += 1

    @property
    def remaining(self) -> int:
        return sum(len(self.queues[c]) - self.heads[c] for c in self.cameras)


def _two_smallest(d: np.ndarray) -> tuple[int, float, float]:
    if len(d) == 1:
        return 0, float(d[0]), math.inf
    if len(d) == 2:
        i = int(np.argmin(d))
        return i, float(d[i]), float(d[1 - i])
    i = int(np.argmin(d))
    best = float(d[i])
    second = float(np.partition(d, 1)[1])
    return i, best, second


def _passes_ratio(d1: float, d2: float, tau: float) -> bool:
    if math.isinf(d2):
        return True
    return d1 < tau * d2


class PrioritizedMatcher:
    """Stateful matcher for one frame; drive it with :meth:`batches`."""

    def __init__(self, frame: QueryFrame, gmap: GlobalMap, rig: CameraRig | None = None,
                 prior: PosePrior | None = None, filter_config: FilterConfig | None = None,
                 config: MatcherConfig | None = None):
        self.frame = frame
        self.map = gmap
        self.rig = rig
        self.prior = prior
        self.config = config or MatcherConfig()
        F = frame.num_features
        self.features = np.ascontiguousarray(frame.descriptors, dtype=np.float32)
        self._features64 = self.features.astype(np.float64)
        self._feat_sq = np.sum(self._features64**2, axis=1)
        self.words = assign_words(gmap.vocabulary, frame.descriptors) if F else np.zeros(0, np.int64)
        self._cones = None
        if prior is not None:
            if rig is None:
                raise ValueError("prior filtering needs the camera rig")
            cam_idx = rig.indices_of(frame.camera_ids)
            self._cones = feature_cones(prior, filter_config or FilterConfig(), rig, cam_idx,
                                        frame.bearings)
        self.candidates = [self._word_candidates(i) for i in range(F)]
        costs = np.array([len(c) for c in self.candidates], dtype=np.float64)
        self.state = PriorityState(frame.camera_ids, costs, self.config.balance,
                                   self.config.cost_log_base)
        self.matched_features = np.zeros(F, dtype=bool)
        self.matched_points: set[int] = set()
        self.expansion_tried: set[int] = set()
        self.stats = MatchStats()

    def _word_candidates(self, i: int) -> np.ndarray:
        entries = self.map.word_entries(int(self.words[i]))
        if self._cones is None or len(entries) == 0:
            return entries
        apexes, axes, radii, half = self._cones
        pos = self.map.positions[self.map.entry_point[entries]]
        keep = distance_to_cone(apexes[i], axes[i], half, pos) <= radii[i]
        return entries[keep]

    def _cone_allows(self, feature: int, point_index: int) -> bool:
        if self._cones is None:
            return True
        apexes, axes, radii, half = self._cones
        d = distance_to_cone(apexes[feature], axes[feature], half, self.map.positions[point_index])
        return bool(d <= radii[feature])

    # -- single-feature operations -------------------------------------------

    def match_forward(self, feature: int) -> Correspondence | None:
        """2D-to-3D match inside the feature's word with the bi-directional ratio test."""
        entries = self.candidates[feature]
        self.stats.forward_comparisons += len(entries)
        if len(entries) == 0:
            return None
        q = self.features[feature]
        d = np.linalg.norm(self.map.entry_descriptors(entries) - q, axis=1)
        j, d1, d2 = _two_smallest(d)
        if not _passes_ratio(d1, d2, self.config.ratio_forward):
            return None
        entry = int(entries[j])
        p = int(self.map.entry_point[entry])
        if p in self.matched_points:
            return None
        # back to the whole frame: the point must pick this very feature
        pd = self.map.entry_descriptors(np.array([entry]))[0]
        db = np.linalg.norm(self.features - pd, axis=1)
        self.stats.backward_comparisons += len(db)
        k, b1, b2 = _two_smallest(db)
        if k != feature or not _passes_ratio(b1, b2, self.config.ratio_backward):
            return None
        return Correspondence(int(self.frame.camera_ids[feature]), feature,
                              int(self.map.point_ids[p]), p, d1, FORWARD)

    def expand_covisible(self, match: Correspondence) -> list[Correspondence]:
        """3D-to-2D matches for unmatched map points covisible with ``match``."""
        if match.origin != FORWARD:
            raise ValueError("only forward matches seed an expansion")
        nbrs = self.map.covisible_indices(match.point_index)
        nbrs = np.array([q for q in nbrs.tolist()
                         if q not in self.matched_points and q not in self.expansion_tried],
                        dtype=np.int64)
        if len(nbrs) == 0 or self.frame.num_features == 0:
            return []
        self.expansion_tried.update(nbrs.tolist())
        offs = self.map.point_entry_offsets
        counts = offs[nbrs + 1] - offs[nbrs]
        entries = np.repeat(offs[nbrs] - np.cumsum(np.r_[0, counts[:-1]]), counts) + np.arange(counts.sum())
        desc = self.map.entry_descriptors(entries).astype(np.float64)
        sq = (np.sum(desc**2, axis=1)[:, None] + self._feat_sq[None, :]
              - 2.0 * desc @ self._features64.T)
        dist = np.sqrt(np.maximum(sq, 0.0))
        self.stats.expansion_comparisons += dist.size
        F = dist.shape[1]
        best_f = np.argmin(dist, axis=1)
        best = dist[np.arange(len(dist)), best_f]
        second = np.partition(dist, 1, axis=1)[:, 1] if F > 1 else np.full(len(dist), np.inf)
        group = np.repeat(np.arange(len(nbrs)), counts)
        order = np.lexsort((best, group))
        first = np.ones(len(order), dtype=bool)
        first[1:] = group[order][1:] != group[order][:-1]
        cap = self.config.expansion_distance_factor * match.distance
        out = []
        claimed: set[int] = set()
        for row in order[first]:
            f = int(best_f[row])
            if self.matched_features[f] or f in claimed:
                continue
            if not _passes_ratio(best[row], second[row], self.config.ratio_backward):
                continue
            if best[row] > cap:
                continue
            p = int(self.map.entry_point[entries[row]])
            if not self._cone_allows(f, p):
                continue
            exact = float(np.linalg.norm(desc[row] - self._features64[f]))
            if exact > cap:
                continue
            claimed.add(f)
            out.append(Correspondence(int(self.frame.camera_ids[f]), f, int(self.map.point_ids[p]),
                                      p, exact, EXPANSION, match.distance))
        return out

    def _accept(self, c: Correspondence) -> None:
        self.matched_features[c.feature] = True
        self.matched_points.add(c.point_index)
        self.state.record_match(c.camera_id)
        if c.origin == FORWARD:
            self.stats.forward_matches += 1
        else:
            self.stats.expansion_matches += 1

    def process(self, camera_id: int, feature: int) -> list[Correspondence]:
        self.stats.features_processed += 1
        if self.matched_features[feature]:
            return []
        m = self.match_forward(feature)
        if m is None:
            return []
        self._accept(m)
        out = [m]
        if self.config.expand:
            for e in self.expand_covisible(m):
                self._accept(e)
                out.append(e)
        return out

    # -- batching --------------------------------------------------------------

    def batches(self, stop_signal: threading.Event | None = None) -> Iterator[MatchBatch]:
        """Yield a batch after every ``batch_size`` processed features.

        ``stop_signal`` is checked before each batch; the final partial batch
        is delivered when the features run out.
        """
        B = self.config.batch_size
        while True:
            if stop_signal is not None and stop_signal.is_set():
                return
            before = MatchStats(**vars(self.stats))
            found: list[Correspondence] = []
            n = 0
            while n < B:
                nxt = self.state.next_feature()
                if nxt is None:
                    break
                found.extend(self.process(*nxt))
                n += 1
            if n == 0:
                return
            self.stats.batches += 1
            yield MatchBatch(found, self.stats.minus(before))
            if n < B:
                return


def run_matching(frame: QueryFrame, gmap: GlobalMap, sink: Callable[[MatchBatch], object],
                 stop_signal: threading.Event | None = None, rig: CameraRig | None = None,
                 prior: PosePrior | None = None, filter_config: FilterConfig | None = None,
                 config: MatcherConfig | None = None) -> MatchStats:
    """Producer loop: match in priority order and hand every batch to ``sink``."""
    matcher = PrioritizedMatcher(frame, gmap, rig, prior, filter_config, config)
    for batch in matcher.batches(stop_signal):
        sink(batch)
    return matcher.stats
