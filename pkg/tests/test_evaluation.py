from __future__ import annotations

import numpy as np
import pytest

from mcloc.evaluation import (DEFAULT_CLASSES, FrameMismatchError, ThresholdClass,
                              absolute_trajectory_error, evaluate, pose_errors)
from mcloc.pose import Pose

from conftest import random_pose


@pytest.fixture
def truth(rng):
    return {i: random_pose(rng) for i in range(4)}


def test_exact_poses_give_full_marks(truth):
    table = evaluate(dict(truth), truth)
    assert table.percentages == (100.0,) * len(DEFAULT_CLASSES)


def test_unlocalized_frame_counts_as_failure(truth):
    res = dict(truth)
    res[2] = None
    table = evaluate(res, truth)
    assert table.percentages == (75.0,) * len(DEFAULT_CLASSES)
    assert table.num_localized == 3


def test_mismatched_ids(truth):
    res = dict(truth)
    res[99] = Pose.identity()
    with pytest.raises(FrameMismatchError):
        evaluate(res, truth)


def _perturbed(rng, n=400):
    truth, res, raw = {}, {}, []
    for i in range(n):
        T = random_pose(rng, 50.0)
        rot = rng.uniform(0, 25)
        pos = rng.uniform(0, 25)
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        d = rng.normal(size=3)
        d *= pos / np.linalg.norm(d)
        est = Pose.from_matrix(T.R @ Pose.from_rotvec(np.radians(rot) * axis, np.zeros(3)).R, T.t + d)
        truth[i] = T
        res[i] = None if rng.uniform() < 0.1 else est
        raw.append((rot, pos, res[i] is not None))
    return truth, res, raw


def test_table_equals_direct_recount(rng):
    truth, res, raw = _perturbed(rng)
    table = evaluate(res, truth)
    for c, pct in zip(DEFAULT_CLASSES, table.percentages):
        count = sum(1 for r, p, ok in raw if ok and r <= c.heading_deg and p <= c.position_m)
        assert pct == pytest.approx(100.0 * count / len(raw), abs=1e-9)


def test_nested_classes_are_monotone(rng):
    truth, res, _ = _perturbed(rng)
    classes = [ThresholdClass(h, p) for h, p in [(1, 0.5), (2, 1), (4, 4), (8, 8), (30, 30)]]
    pct = evaluate(res, truth, classes).percentages
    assert list(pct) == sorted(pct)


def test_planar_errors_ignore_height():
    T = Pose.identity()
    est = Pose.from_rotvec([0, 0, 0], [3.0, 4.0, 12.0])
    assert pose_errors(est, T, planar=True) == (0.0, 5.0)
    assert pose_errors(est, T)[1] == pytest.approx(13.0)


def test_rendered_table_and_dict(truth):
    table = evaluate(dict(truth), truth)
    assert "2deg/0.25m" in table.render()
    assert table.to_dict()["classes"][0]["percent"] == 100.0


def test_ate():
    truth = {float(k): Pose.from_rotvec([0, 0, 0], [k, 0, 0]) for k in range(5)}
    est = {t: Pose.from_rotvec([0, 0, 0], p.t + [0, 2.0, 0]) for t, p in truth.items()}
    assert absolute_trajectory_error(est, truth) == pytest.approx(2.0)
    with pytest.raises(FrameMismatchError):
        absolute_trajectory_error({99.0: Pose.identity()}, truth)
