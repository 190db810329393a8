"""Text file formats shared by the command-line tools.

Query frames, localization results, odometry and trajectories are JSON
lines; ground truth and the rig are single JSON documents.  Descriptors
travel as base64-encoded little-endian float32.
"""

from __future__ import annotations

import base64
import json
from pathlib import Path
from typing import Iterable

import numpy as np

from mcloc.fusion import OdometryIncrement
from mcloc.localizer import LocalizationResult
from mcloc.matcher import QueryFrame
from mcloc.pose import Pose
from mcloc.rig import CameraRig


class InputError(ValueError):
    """Malformed or inconsistent input file."""


def encode_descriptor(d: np.ndarray) -> str:
    return base64.b64encode(np.asarray(d, dtype="<f4").tobytes()).decode("ascii")


def decode_descriptor(s: str) -> np.ndarray:
    raw = base64.b64decode(s.encode("ascii"), validate=True)
    if len(raw) % 4:
        raise ValueError("descriptor byte length is not a multiple of 4")
    return np.frombuffer(raw, dtype="<f4").astype(np.float32)


def frame_to_dict(frame: QueryFrame) -> dict:
    cameras = []
    for cid in sorted(set(frame.camera_ids.tolist())):
        idx = np.nonzero(frame.camera_ids == cid)[0]
        cameras.append({"camera_id": int(cid), "features": [
            {"bearing": [float(v) for v in frame.bearings[i]],
             "descriptor": encode_descriptor(frame.descriptors[i])} for i in idx]})
    return {"frame_id": int(frame.frame_id), "timestamp": float(frame.timestamp), "cameras": cameras}


def frame_from_dict(d: dict) -> QueryFrame:
    cams = {}
    dim = None
    for cam in d["cameras"]:
        feats = cam["features"]
        b = np.array([f["bearing"] for f in feats], dtype=float).reshape(-1, 3)
        desc = [decode_descriptor(f["descriptor"]) for f in feats]
        for v in desc:
            if dim is None:
                dim = len(v)
            elif len(v) != dim:
                raise ValueError("descriptors differ in dimension")
        cams[int(cam["camera_id"])] = (b, np.array(desc, dtype=np.float32).reshape(len(b), dim or 0))
    return QueryFrame.from_cameras(int(d["frame_id"]), cams, float(d.get("timestamp", 0.0)), dim)


def _read_jsonl(path: str | Path, what: str) -> Iterable[tuple[int, dict]]:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"{what} file not found: {path}")
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise InputError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None


def _write_jsonl(path: str | Path, records: Iterable[dict]) -> None:
    with Path(path).open("w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def write_queries(path: str | Path, frames: Iterable[QueryFrame]) -> None:
    _write_jsonl(path, (frame_to_dict(f) for f in frames))


def read_queries(path: str | Path) -> list[QueryFrame]:
    out = []
    for lineno, rec in _read_jsonl(path, "query"):
        try:
            out.append(frame_from_dict(rec))
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"{path}:{lineno}: bad query frame ({exc})") from None
    return out


def write_rig(path: str | Path, rig: CameraRig) -> None:
    Path(path).write_text(json.dumps(rig.to_dict(), indent=1) + "\n")


def read_rig(path: str | Path) -> CameraRig:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"rig file not found: {path}")
    try:
        return CameraRig.from_dict(json.loads(path.read_text()))
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"{path}: bad rig ({exc})") from None


def write_results(path: str | Path, results: Iterable[LocalizationResult], timing: bool = True) -> None:
    _write_jsonl(path, (r.to_dict(timing) for r in results))


def read_results(path: str | Path) -> list[dict]:
    out = []
    for lineno, rec in _read_jsonl(path, "results"):
        try:
            rec["frame_id"] = int(rec["frame_id"])
            rec["pose"] = None if rec.get("pose") is None else Pose.from_dict(rec["pose"])
            if rec["status"] not in ("localized", "failed"):
                raise ValueError(f"unknown status {rec['status']!r}")
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"{path}:{lineno}: bad result record ({exc})") from None
        out.append(rec)
    return out


def write_odometry(path: str | Path, increments: Iterable[OdometryIncrement]) -> None:
    _write_jsonl(path, (inc.to_dict() for inc in increments))


def read_odometry(path: str | Path) -> list[OdometryIncrement]:
    out = []
    for lineno, rec in _read_jsonl(path, "odometry"):
        try:
            out.append(OdometryIncrement.from_dict(rec))
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"{path}:{lineno}: bad odometry record ({exc})") from None
    return out


def write_trajectory(path: str | Path, traj: Iterable[tuple[float, Pose]]) -> None:
    _write_jsonl(path, ({"timestamp": float(t), "pose": p.to_dict()} for t, p in traj))


def read_trajectory(path: str | Path) -> list[tuple[float, Pose]]:
    out = []
    for lineno, rec in _read_jsonl(path, "trajectory"):
        try:
            out.append((float(rec["timestamp"]), Pose.from_dict(rec["pose"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"{path}:{lineno}: bad trajectory record ({exc})") from None
    return out


def write_groundtruth(path: str | Path, frames: dict[int, Pose],
                      trajectory: list[tuple[float, Pose]] | None = None) -> None:
    doc = {"frames": [{"frame_id": int(k), "pose": frames[k].to_dict()} for k in sorted(frames)],
           "trajectory": [{"timestamp": float(t), "pose": p.to_dict()} for t, p in (trajectory or [])]}
    Path(path).write_text(json.dumps(doc) + "\n")


def read_groundtruth(path: str | Path) -> tuple[dict[int, Pose], list[tuple[float, Pose]]]:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"ground-truth file not found: {path}")
    try:
        doc = json.loads(path.read_text())
        frames = {int(r["frame_id"]): Pose.from_dict(r["pose"]) for r in doc["frames"]}
        traj = [(float(r["timestamp"]), Pose.from_dict(r["pose"])) for r in doc.get("trajectory", [])]
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"{path}: bad ground truth ({exc})") from None
    return frames, traj
