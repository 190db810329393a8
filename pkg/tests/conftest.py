from __future__ import annotations

import numpy as np
import pytest

from mcloc.pose import Pose
from mcloc.rig import default_rig
from mcloc.sim import SceneSpec, build_map, generate_scene, render_queries


def random_pose(rng: np.random.Generator, scale: float = 5.0) -> Pose:
    return Pose.from_rotvec(rng.normal(size=3), rng.normal(scale=scale, size=3))


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def rig():
    return default_rig()


@pytest.fixture(scope="session")
def small_spec() -> SceneSpec:
    return SceneSpec(num_points=6000, extent=(170.0, 170.0), seed=7)


@pytest.fixture(scope="session")
def small_scene(small_spec):
    return generate_scene(small_spec)


@pytest.fixture(scope="session")
def small_map(small_scene):
    return build_map(small_scene, vocab_size=128, seed=7)


@pytest.fixture(scope="session")
def small_queries(rig, small_scene):
    return render_queries(rig, small_scene, 8, seed=11)


def pytest_terminal_summary(terminalreporter):
    """One pass/fail line per acceptance criterion, with its measured detail."""
    lines = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            if rep.when != "call" or "test_acceptance.py::test_criterion_" not in rep.nodeid:
                continue
            name = rep.nodeid.split("::")[-1]
            detail = "; ".join(str(v) for k, v in rep.user_properties if k == "detail")
            lines.append((name, "PASS" if outcome == "passed" else "FAIL", detail))
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome, detail in sorted(lines):
        terminalreporter.write_line(f"{name:<24} {outcome}  {detail}")
