"""Pose error tables and trajectory error."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from mcloc.pose import Pose


class FrameMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class ThresholdClass:
    heading_deg: float
    position_m: float

    @property
    def label(self) -> str:
        return f"{self.heading_deg:g}deg/{self.position_m:g}m"


DEFAULT_CLASSES = (ThresholdClass(2, 0.25), ThresholdClass(5, 0.5), ThresholdClass(10, 5),
                   ThresholdClass(15, 10), ThresholdClass(20, 20))


@dataclass(frozen=True)
class ErrorTable:
    classes: tuple[ThresholdClass, ...]
    percentages: tuple[float, ...]
    num_frames: int
    num_localized: int

    def as_rows(self) -> list[dict]:
        return [{"heading_deg": c.heading_deg, "position_m": c.position_m, "percent": p}
                for c, p in zip(self.classes, self.percentages)]

    def to_dict(self) -> dict:
        return {"num_frames": self.num_frames, "num_localized": self.num_localized, "classes": self.as_rows()}

    def render(self) -> str:
        head = " | ".join(f"{c.label:>12}" for c in self.classes)
        vals = " | ".join(f"{p:>11.1f}%" for p in self.percentages)
        return f"{head}\n{vals}"


def pose_errors(estimate: Pose, truth: Pose, planar: bool = False) -> tuple[float, float]:
    """(rotation error in degrees, position error in meters)."""
    rot = np.degrees(estimate.rotation_to(truth))
    d = estimate.t - truth.t
    if planar:
        d = d[:2]
    return float(rot), float(np.linalg.norm(d))


def evaluate(results: Mapping[int, Pose | None], truth: Mapping[int, Pose],
             classes=DEFAULT_CLASSES, planar: bool = False) -> ErrorTable:
    """Percent of frames localized within both bounds of each class.

    ``results`` maps frame id to the estimated pose, or None if the frame
    was not localized.
    """
    if set(results) != set(truth):
        missing = sorted(set(truth) ^ set(results))[:5]
        raise FrameMismatchError(f"result and ground-truth frame ids differ (e.g. {missing})")
    classes = tuple(classes)
    n = len(truth)
    errs = [pose_errors(results[f], truth[f], planar) for f in sorted(truth) if results[f] is not None]
    pct = []
    for c in classes:
        ok = sum(1 for r, p in errs if r <= c.heading_deg and p <= c.position_m)
        pct.append(100.0 * ok / n if n else 0.0)
    return ErrorTable(classes, tuple(pct), n, len(errs))


def absolute_trajectory_error(estimate: Mapping[float, Pose], truth: Mapping[float, Pose]) -> float:
    """RMS position error over the timestamps present in both trajectories."""
    common = sorted(set(estimate) & set(truth))
    if not common:
        raise FrameMismatchError("trajectories share no timestamps")
    d = np.array([estimate[t].t - truth[t].t for t in common])
    return float(np.sqrt(np.mean(np.sum(d * d, axis=1))))
