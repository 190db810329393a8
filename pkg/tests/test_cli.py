from __future__ import annotations

import json
import os
import subprocess
import sys

import pytest

from mcloc.cli import EXIT_CONFIG, EXIT_OK, main
from mcloc.mapstore import load_map

SMALL = {"points": 4000, "extent": 150.0, "vocab_size": 128, "steps": 80, "frame_every": 10}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "small.json").write_text(json.dumps(SMALL))
    assert main(["simulate", "--config", str(d / "small.json"), "--out-dir", str(d / "sim"),
                 "--deterministic", "--seed", "3"]) == EXIT_OK
    return d


def _run(*argv):
    return main([str(a) for a in argv])


def test_simulate_writes_everything(workdir):
    names = {p.name for p in (workdir / "sim").iterdir()}
    assert {"scene.npz", "map.mclmap", "rig.json", "queries.jsonl", "odometry.jsonl",
            "groundtruth.json", "priors.json", "simulate.json"} <= names
    recorded = json.loads((workdir / "sim" / "simulate.json").read_text())
    assert recorded["points"] == 4000 and recorded["seed"] == 3


def test_same_seed_same_files(workdir, tmp_path):
    assert _run("simulate", "--config", workdir / "small.json", "--out-dir", tmp_path,
                "--deterministic", "--seed", "3") == EXIT_OK
    for name in ("map.mclmap", "queries.jsonl", "odometry.jsonl", "groundtruth.json", "priors.json"):
        assert (tmp_path / name).read_bytes() == (workdir / "sim" / name).read_bytes()


def test_flag_overrides_config(workdir, tmp_path):
    assert _run("simulate", "--config", workdir / "small.json", "--points", "3000", "--steps", "20",
                "--out-dir", tmp_path, "--deterministic") == EXIT_OK
    recorded = json.loads((tmp_path / "simulate.json").read_text())
    assert recorded["points"] == 3000 and recorded["vocab_size"] == 128


def test_bad_outlier_fraction_names_field(tmp_path, capsys):
    assert _run("simulate", "--outlier-fraction", "1.5", "--out-dir", tmp_path) == EXIT_CONFIG
    assert "outlier_fraction" in capsys.readouterr().err


def test_unknown_config_key(tmp_path, capsys):
    (tmp_path / "c.json").write_text('{"pointz": 5}')
    assert _run("simulate", "--config", tmp_path / "c.json", "--out-dir", tmp_path) == EXIT_CONFIG
    assert "pointz" in capsys.readouterr().err


def test_build_map_reproduces_simulated_map(workdir, tmp_path):
    assert _run("build-map", "--scene", workdir / "sim" / "scene.npz", "--out", tmp_path / "m.mclmap",
                "--vocab-size", "128", "--seed", "3", "--deterministic") == EXIT_OK
    assert load_map(tmp_path / "m.mclmap").equals(load_map(workdir / "sim" / "map.mclmap"))


def test_missing_map_is_config_error(workdir, tmp_path):
    sim = workdir / "sim"
    assert _run("localize", "--map", tmp_path / "nope.mclmap", "--queries", sim / "queries.jsonl",
                "--out", tmp_path / "r.jsonl") == EXIT_CONFIG


def test_corrupt_map_is_config_error(workdir, tmp_path):
    (tmp_path / "bad.mclmap").write_bytes(b"garbage")
    assert _run("localize", "--map", tmp_path / "bad.mclmap", "--queries", workdir / "sim" / "queries.jsonl",
                "--out", tmp_path / "r.jsonl") == EXIT_CONFIG


@pytest.fixture(scope="module")
def localized(workdir):
    sim = workdir / "sim"
    out = {}
    for tag, extra in (("plain", []), ("prior", ["--prior", sim / "priors.json"])):
        path = workdir / f"results_{tag}.jsonl"
        assert _run("localize", "--map", sim / "map.mclmap", "--queries", sim / "queries.jsonl",
                    "--out", path, "--deterministic", *extra) == EXIT_OK
        out[tag] = [json.loads(line) for line in path.read_text().splitlines()]
    return out


def test_localize_succeeds_and_prior_saves_work(localized):
    plain, prior = localized["plain"], localized["prior"]
    assert sum(r["status"] == "localized" for r in plain) >= 0.9 * len(plain)
    mean = lambda rs: sum(r["stats"]["forward_comparisons"] for r in rs) / len(rs)
    assert mean(prior) < mean(plain)
    assert all("wall_time" not in r["stats"] for r in plain)


def test_fuse_and_benchmark(workdir, localized, capsys):
    sim = workdir / "sim"
    assert _run("fuse", "--results", workdir / "results_plain.jsonl", "--odometry", sim / "odometry.jsonl",
                "--queries", sim / "queries.jsonl", "--map", sim / "map.mclmap",
                "--groundtruth", sim / "groundtruth.json", "--out", workdir / "fused.jsonl",
                "--plot", workdir / "traj.png", "--deterministic") == EXIT_OK
    text = capsys.readouterr().out
    assert "ATE fused" in text and (workdir / "traj.png").stat().st_size > 0
    out = workdir / "bench"
    assert _run("benchmark", "--results", workdir / "results_plain.jsonl",
                "--groundtruth", sim / "groundtruth.json", "--out-dir", out) == EXIT_OK
    assert {p.name for p in out.iterdir()} == {"table.json", "table.csv", "errors.csv", "error_cdf.png"}
    table = json.loads((out / "table.json").read_text())
    pct = [c["percent"] for c in table["classes"]]
    assert pct == sorted(pct)


def test_malformed_odometry_line(workdir, localized, tmp_path, capsys):
    sim = workdir / "sim"
    lines = (sim / "odometry.jsonl").read_text().splitlines()
    lines[4] = "{oops"
    (tmp_path / "odo.jsonl").write_text("\n".join(lines) + "\n")
    assert _run("fuse", "--results", workdir / "results_plain.jsonl", "--odometry", tmp_path / "odo.jsonl",
                "--queries", sim / "queries.jsonl", "--map", sim / "map.mclmap",
                "--out", tmp_path / "f.jsonl") == EXIT_CONFIG
    assert "odo.jsonl:5" in capsys.readouterr().err


def test_benchmark_mismatched_ids(workdir, localized, tmp_path):
    gt = json.loads((workdir / "sim" / "groundtruth.json").read_text())
    gt["frames"] = gt["frames"][:-1]
    (tmp_path / "gt.json").write_text(json.dumps(gt))
    assert _run("benchmark", "--results", workdir / "results_plain.jsonl",
                "--groundtruth", tmp_path / "gt.json") == EXIT_CONFIG


def test_usage_error_exit_code():
    assert main(["localize"]) == EXIT_CONFIG
    assert main(["frobnicate"]) == EXIT_CONFIG


def test_log_level_from_environment(workdir, tmp_path):
    env = dict(os.environ, MCLOC_LOG="DEBUG")
    sim = workdir / "sim"
    proc = subprocess.run([sys.executable, "-m", "mcloc.cli", "build-map", "--scene", str(sim / "scene.npz"),
                           "--out", str(tmp_path / "m.mclmap"), "--vocab-size", "16"],
                          env=env, capture_output=True, text=True)
    assert proc.returncode == 0
    assert "DEBUG" in proc.stderr or "INFO" in proc.stderr
    env["MCLOC_LOG"] = "ERROR"
    proc = subprocess.run([sys.executable, "-m", "mcloc.cli", "build-map", "--scene", str(sim / "scene.npz"),
                           "--out", str(tmp_path / "m.mclmap"), "--vocab-size", "16"],
                          env=env, capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stderr == ""
