"""``mcloc`` command-line entry point.

Parameter precedence: command-line flag, then the JSON ``--config`` file,
then the built-in default.  Exit codes: 0 success, 1 runtime failure,
2 configuration or input error.  ``MCLOC_LOG`` sets the log level.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np

log = logging.getLogger("mcloc")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Param:
    name: str
    type: Callable
    default: Any
    help: str
    flag: bool = False  # boolean on/off switch


def _bool(v) -> bool:
    if isinstance(v, bool):
        return v
    raise ConfigError(f"expected true/false, got {v!r}")


SIM_PARAMS = [
    Param("points", int, 50_000, "number of map points"),
    Param("extent", float, 500.0, "side of the square scene [m]"),
    Param("descriptor_noise", float, 0.25, "descriptor noise sigma_d"),
    Param("outlier_fraction", float, 0.3, "fraction of outlier features per camera"),
    Param("bearing_noise_deg", float, 0.1, "bearing noise [deg]"),
    Param("cell_size", float, 10.0, "mapping frame window size [m]"),
    Param("max_range", float, 20.0, "visibility range [m]"),
    Param("vocab_size", int, 1024, "visual words W"),
    Param("pq", _bool, False, "store map descriptors product-quantized", flag=True),
    Param("query_mode", str, "trajectory", "'trajectory' or 'random' query poses"),
    Param("queries", int, 200, "number of random query frames"),
    Param("steps", int, 300, "trajectory steps"),
    Param("step_length", float, 1.0, "trajectory step [m]"),
    Param("frame_every", int, 10, "steps between trajectory query frames"),
    Param("drift", float, 0.01, "odometry translation bias per meter"),
    Param("odom_rot_sigma_deg", float, 0.05, "odometry rotation noise per step [deg]"),
    Param("odom_trans_sigma", float, 0.01, "odometry translation noise per step [m]"),
    Param("prior_sigma_m", float, 10.0, "prior position noise [m]"),
    Param("prior_sigma_deg", float, 5.0, "prior heading noise [deg]"),
    Param("prior_radius", float, 50.0, "prior position radius d [m]"),
    Param("prior_heading_deg", float, 10.0, "prior heading half-angle theta [deg]"),
]

MAP_PARAMS = [
    Param("vocab_size", int, 1024, "visual words W"),
    Param("pq", _bool, False, "store map descriptors product-quantized", flag=True),
]

LOC_PARAMS = [
    Param("ratio_forward", float, 0.9, "2D-3D ratio test threshold"),
    Param("ratio_backward", float, 0.9, "3D-2D ratio test threshold"),
    Param("batch_size", int, 20, "features per batch B"),
    Param("balance", _bool, True, "scale image costs by their match counts", flag=True),
    Param("cost_log_base", float, 6.0, "log base of the image cost factor"),
    Param("expand", _bool, True, "covisibility 3D-2D expansion", flag=True),
    Param("min_inliers", int, 15, "acceptance: minimum inliers"),
    Param("min_inlier_ratio", float, 0.2, "acceptance: minimum inlier ratio"),
    Param("inlier_angle_deg", float, 10.0, "inlier angular threshold [deg]"),
    Param("ransac_budget", int, 100, "RANSAC iterations per batch"),
    Param("alpha_deg", float, 1.0, "prior filter base cone angle [deg]"),
    Param("prior_radius", float, None, "override the prior position radius d [m]"),
    Param("prior_heading_deg", float, None, "override the prior heading half-angle theta [deg]"),
    Param("refine", _bool, True, "polish accepted poses", flag=True),
]

FUSE_PARAMS = [
    Param("window_size", int, 10, "sliding window size N"),
    Param("match_sigma_deg", float, 0.3, "match residual sigma [deg]"),
]

BENCH_PARAMS = [
    Param("planar", _bool, False, "evaluate position error in the ground plane only", flag=True),
]


def _add_params(p: argparse.ArgumentParser, params: list[Param]) -> None:
    g = p.add_argument_group("parameters")
    for prm in params:
        opt = "--" + prm.name.replace("_", "-")
        if prm.flag:
            g.add_argument(opt, dest=prm.name, action=argparse.BooleanOptionalAction, default=None,
                           help=f"{prm.help} (default {prm.default})")
        else:
            g.add_argument(opt, dest=prm.name, type=prm.type, default=None,
                           help=f"{prm.help} (default {prm.default})")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON file with parameter values")
    p.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
    p.add_argument("--threads", type=int, default=None, help="worker threads (default: all cores)")
    p.add_argument("--deterministic", action="store_true",
                   help="single-threaded, fixed-seed, timing-free outputs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mcloc", description="Multi-camera visual localization toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic scene, map, queries and odometry")
    p.add_argument("--out-dir", type=Path, required=True)
    _common(p)
    _add_params(p, SIM_PARAMS)

    p = sub.add_parser("build-map", help="build a map file from a scene archive")
    p.add_argument("--scene", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    _common(p)
    _add_params(p, MAP_PARAMS)

    p = sub.add_parser("localize", help="localize query frames against a map")
    p.add_argument("--map", type=Path, required=True)
    p.add_argument("--queries", type=Path, required=True)
    p.add_argument("--rig", type=Path, help="rig JSON (default: rig.json next to the queries)")
    p.add_argument("--prior", type=Path, help="per-frame pose priors JSON")
    p.add_argument("--out", type=Path, required=True)
    _common(p)
    _add_params(p, LOC_PARAMS)

    p = sub.add_parser("fuse", help="fuse localization results with odometry")
    p.add_argument("--results", type=Path, required=True)
    p.add_argument("--odometry", type=Path, required=True)
    p.add_argument("--queries", type=Path, required=True)
    p.add_argument("--map", type=Path, required=True)
    p.add_argument("--rig", type=Path)
    p.add_argument("--groundtruth", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--plot", type=Path, help="write a top-down trajectory figure")
    _common(p)
    _add_params(p, FUSE_PARAMS)

    p = sub.add_parser("benchmark", help="error table of localization results")
    p.add_argument("--results", type=Path, required=True)
    p.add_argument("--groundtruth", type=Path, required=True)
    p.add_argument("--out-dir", type=Path, help="write table.json, table.csv, errors.csv and error_cdf.png")
    _common(p)
    _add_params(p, BENCH_PARAMS)
    return parser


_PARAMS = {"simulate": SIM_PARAMS, "build-map": MAP_PARAMS, "localize": LOC_PARAMS,
           "fuse": FUSE_PARAMS, "benchmark": BENCH_PARAMS}
_RUN_KEYS = {"seed", "threads", "deterministic"}


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults, config file and flags into one validated dict."""
    params = _PARAMS[args.command]
    cfg = {p.name: p.default for p in params}
    cfg.update(seed=0, threads=os.cpu_count() or 1, deterministic=False)
    if args.config is not None:
        if not args.config.is_file():
            raise ConfigError(f"config file not found: {args.config}")
        try:
            data = json.loads(args.config.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {args.config}: {exc.msg}") from None
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        known = {p.name: p for p in params}
        unknown = sorted(set(data) - set(known) - _RUN_KEYS)
        if unknown:
            raise ConfigError(f"unknown config key(s) for {args.command}: {', '.join(unknown)}")
        for k, v in data.items():
            if k in known:
                try:
                    cfg[k] = None if v is None else known[k].type(v)
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"config key '{k}': {exc}") from None
            else:
                cfg[k] = v
    for p in params:
        v = getattr(args, p.name)
        if v is not None:
            cfg[p.name] = v
    for k in ("seed", "threads"):
        if getattr(args, k) is not None:
            cfg[k] = getattr(args, k)
    if args.deterministic:
        cfg["deterministic"] = True
    if cfg["deterministic"]:
        cfg["threads"] = 1
    if not isinstance(cfg["threads"], int) or cfg["threads"] < 1:
        raise ConfigError("'threads' must be a positive integer")
    return cfg


def _need_file(path: Path | None, what: str) -> None:
    if path is None or not path.is_file():
        raise ConfigError(f"{what} file not found: {path}")


def _need_out(path: Path) -> None:
    parent = path.parent if path.suffix else path
    try:
        parent.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output location {parent}: {exc}") from None


def _check_range(cfg: dict, name: str, ok: bool) -> None:
    if not ok:
        raise ConfigError(f"invalid value for '{name}': {cfg[name]!r}")


# -- subcommands ------------------------------------------------------------------


def cmd_simulate(args, cfg: dict) -> int:
    from mcloc import formats, sim
    from mcloc.mapstore import save_map
    from mcloc.prior import save_priors
    from mcloc.rig import default_rig

    _check_range(cfg, "query_mode", cfg["query_mode"] in ("trajectory", "random"))
    _check_range(cfg, "queries", cfg["queries"] >= 1)
    _check_range(cfg, "steps", cfg["steps"] >= 1)
    _check_range(cfg, "frame_every", cfg["frame_every"] >= 1)
    _check_range(cfg, "step_length", cfg["step_length"] > 0)
    _check_range(cfg, "vocab_size", cfg["vocab_size"] >= 1)
    for k in ("odom_rot_sigma_deg", "odom_trans_sigma", "prior_sigma_m", "prior_sigma_deg"):
        _check_range(cfg, k, cfg[k] >= 0)
    _check_range(cfg, "prior_heading_deg", 0 <= cfg["prior_heading_deg"] < 90)
    _check_range(cfg, "prior_radius", cfg["prior_radius"] >= 0)
    try:
        spec = sim.SceneSpec(num_points=cfg["points"], extent=(cfg["extent"], cfg["extent"]),
                             descriptor_noise=cfg["descriptor_noise"], outlier_fraction=cfg["outlier_fraction"],
                             bearing_noise_deg=cfg["bearing_noise_deg"], cell_size=cfg["cell_size"],
                             max_range=cfg["max_range"], seed=cfg["seed"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    margin = min(spec.max_range, spec.extent[0] / 4)
    length = cfg["steps"] * cfg["step_length"]
    if cfg["query_mode"] == "trajectory" and length > spec.extent[0] - 2 * margin:
        raise ConfigError(f"invalid value for 'steps': a {length:g} m trajectory does not fit the scene")
    out: Path = args.out_dir
    _need_out(out)

    seed = cfg["seed"]
    rig = default_rig()
    scene = sim.generate_scene(spec)
    log.info("scene: %d points, %d observations", scene.num_points, len(scene.obs_desc))
    gmap = sim.build_map(scene, cfg["vocab_size"], use_pq=cfg["pq"], seed=seed)

    traj = sim.straight_trajectory(cfg["steps"], cfg["step_length"], (margin, spec.extent[1] / 2))
    times = [float(k) for k in range(len(traj))]
    odo = sim.simulate_odometry(traj, cfg["drift"], np.radians(cfg["odom_rot_sigma_deg"]),
                                cfg["odom_trans_sigma"], seed=seed)
    if cfg["query_mode"] == "trajectory":
        steps = list(range(0, len(traj), cfg["frame_every"]))
        poses = [traj[k] for k in steps]
        stamps = [times[k] for k in steps]
    else:
        poses = sim.random_query_poses(spec, cfg["queries"], np.random.default_rng([seed, 0]))
        stamps = [float(i) for i in range(len(poses))]
    frames, gt = [], {}
    for i, (pose, ts) in enumerate(zip(poses, stamps)):
        frame, _ = sim.render_frame(rig, pose, scene, np.random.default_rng([seed, 1, i]), i, ts)
        frames.append(frame)
        gt[i] = pose
    prior_rng = np.random.default_rng([seed, 2])
    priors = {i: sim.perturb_prior(gt[i], prior_rng, cfg["prior_sigma_m"], cfg["prior_sigma_deg"],
                                   cfg["prior_radius"], cfg["prior_heading_deg"]) for i in gt}

    sim.save_scene(scene, out / "scene.npz")
    save_map(gmap, out / "map.mclmap")
    formats.write_rig(out / "rig.json", rig)
    formats.write_queries(out / "queries.jsonl", frames)
    formats.write_odometry(out / "odometry.jsonl", odo)
    formats.write_groundtruth(out / "groundtruth.json", gt, list(zip(times, traj)))
    save_priors(priors, out / "priors.json")
    run = {k: cfg[k] for k in sorted(cfg) if k not in ("threads",)}
    (out / "simulate.json").write_text(json.dumps(run, indent=1, sort_keys=True) + "\n")
    print(f"scene: {scene.num_points} points, map entries: {gmap.num_entries}, "
          f"query frames: {len(frames)}, odometry steps: {len(odo)}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_build_map(args, cfg: dict) -> int:
    from mcloc import sim
    from mcloc.mapstore import save_map

    _need_file(args.scene, "scene")
    _check_range(cfg, "vocab_size", cfg["vocab_size"] >= 1)
    _need_out(args.out)
    try:
        scene = sim.load_scene(args.scene)
    except (OSError, KeyError, ValueError) as exc:
        raise ConfigError(f"cannot read scene archive {args.scene}: {exc}") from None
    log.info("scene: %d points, %d observations", scene.num_points, len(scene.obs_desc))
    gmap = sim.build_map(scene, cfg["vocab_size"], use_pq=cfg["pq"], seed=cfg["seed"])
    save_map(gmap, args.out)
    print(f"map: {gmap.num_points} points, {gmap.num_entries} entries, W={gmap.vocabulary.size}"
          f"{', PQ' if gmap.pq is not None else ''}")
    return EXIT_OK


def _load_rig(path: Path | None, near: Path):
    from mcloc import formats
    from mcloc.rig import default_rig

    if path is None:
        cand = near.parent / "rig.json"
        if cand.is_file():
            return formats.read_rig(cand)
        log.warning("no rig file given; using the default 4-camera rig")
        return default_rig()
    return formats.read_rig(path)


def cmd_localize(args, cfg: dict) -> int:
    from mcloc import formats
    from mcloc.localizer import LocalizerConfig, localize
    from mcloc.mapstore import load_map
    from mcloc.matcher import MatcherConfig
    from mcloc.prior import FilterConfig, PosePrior, load_priors
    from mcloc.ransac import AcceptanceThresholds, RansacConfig

    _need_file(args.map, "map")
    _need_file(args.queries, "query")
    if args.prior is not None:
        _need_file(args.prior, "prior")
    _need_out(args.out)
    try:
        config = LocalizerConfig(
            matcher=MatcherConfig(cfg["ratio_forward"], cfg["ratio_backward"], cfg["batch_size"],
                                  cfg["balance"], cfg["cost_log_base"], cfg["expand"]),
            ransac=RansacConfig(iterations_per_batch=cfg["ransac_budget"]),
            thresholds=AcceptanceThresholds(cfg["min_inlier_ratio"], cfg["min_inliers"], 0.5,
                                            float(np.radians(cfg["inlier_angle_deg"]))),
            filter=FilterConfig(float(np.radians(cfg["alpha_deg"]))),
            refine=cfg["refine"], threaded=cfg["threads"] > 1, seed=cfg["seed"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    gmap = load_map(args.map)
    frames = formats.read_queries(args.queries)
    rig = _load_rig(args.rig, args.queries)
    priors = {}
    if args.prior is not None:
        try:
            priors = load_priors(args.prior)
            if cfg["prior_radius"] is not None or cfg["prior_heading_deg"] is not None:
                priors = {k: PosePrior(p.prior_pose,
                                       p.position_radius if cfg["prior_radius"] is None else cfg["prior_radius"],
                                       p.heading_half_angle if cfg["prior_heading_deg"] is None
                                       else float(np.radians(cfg["prior_heading_deg"])))
                          for k, p in priors.items()}
        except ValueError as exc:
            raise ConfigError(f"{args.prior}: {exc}") from None
    results = []
    for frame in frames:
        r = localize(frame, gmap, rig, priors.get(frame.frame_id), config)
        log.info("frame %d: %s (%d inliers, %d/%d features)", frame.frame_id, r.status, len(r.inliers),
                 r.stats.features_processed, r.stats.total_features)
        results.append(r)
    formats.write_results(args.out, results, timing=not cfg["deterministic"])
    n = len(results)
    ok = sum(r.localized for r in results)
    comps = np.mean([r.stats.descriptor_comparisons for r in results]) if n else 0.0
    frac = np.mean([r.stats.features_processed / max(r.stats.total_features, 1) for r in results]) if n else 0.0
    print(f"localized: {ok}/{n} ({100.0 * ok / max(n, 1):.1f}%)")
    print(f"mean descriptor comparisons per frame: {comps:.0f}")
    print(f"mean fraction of features processed: {100.0 * frac:.1f}%")
    if n:
        # timing varies run to run, so deterministic stdout leaves it to the log
        line = (f"mean matching time (excluding feature extraction): "
                f"{1000.0 * np.mean([r.stats.wall_time for r in results]):.1f} ms")
        if cfg["deterministic"]:
            log.info(line)
        else:
            print(line)
    return EXIT_OK


def cmd_fuse(args, cfg: dict) -> int:
    from mcloc import formats
    from mcloc.evaluation import absolute_trajectory_error
    from mcloc.fusion import FusionConfig, FusionEngine
    from mcloc.mapstore import load_map

    for path, what in ((args.results, "results"), (args.odometry, "odometry"), (args.queries, "query"),
                       (args.map, "map")):
        _need_file(path, what)
    if args.groundtruth is not None:
        _need_file(args.groundtruth, "ground-truth")
    _need_out(args.out)
    try:
        fcfg = FusionConfig(window_size=cfg["window_size"], match_sigma=float(np.radians(cfg["match_sigma_deg"])))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    odo = formats.read_odometry(args.odometry)
    if not odo:
        raise formats.InputError(f"{args.odometry}: no odometry records")
    results = formats.read_results(args.results)
    frames = {f.frame_id: f for f in formats.read_queries(args.queries)}
    gmap = load_map(args.map)
    rig = _load_rig(args.rig, args.queries)

    locs = []
    for rec in results:
        if rec["status"] != "localized":
            continue
        f = frames.get(rec["frame_id"])
        if f is None:
            raise formats.InputError(f"result for unknown frame {rec['frame_id']}")
        feats = np.array([m["feature"] for m in rec["inliers"]], dtype=np.int64)
        pts = np.array([gmap.positions[gmap.point_index(m["point_id"])] for m in rec["inliers"]]).reshape(-1, 3)
        locs.append((f.timestamp, rec["pose"], f.camera_ids[feats], f.bearings[feats], pts))
    locs.sort(key=lambda x: x[0])

    engine = FusionEngine(rig, fcfg)
    traj = []
    grid = [odo[0].t_from] + [inc.t_to for inc in odo]
    li = 0
    prev_t = -np.inf
    for k, tp in enumerate(grid):
        if k > 0:
            engine.add_odometry(odo[k - 1])
        while li < len(locs) and prev_t < locs[li][0] <= tp + 1e-9:
            rep = engine.add_localization(*locs[li])
            if not rep.success:
                log.warning("window optimization at t=%g: %s", locs[li][0], rep.message)
            li += 1
        if engine.ready:
            traj.append((tp, engine.query_pose(tp)))
        prev_t = tp
    formats.write_trajectory(args.out, traj)
    print(f"fused poses: {len(traj)} (localizations used: {li})")

    if args.groundtruth is not None:
        _, gt_traj = formats.read_groundtruth(args.groundtruth)
        gt = {t: p for t, p in gt_traj}
        fused = dict(traj)
        if gt and fused:
            raw = {}
            t0 = min(gt)
            pose = gt[t0]
            raw[t0] = pose
            for inc in odo:
                if inc.t_from >= t0 - 1e-9:
                    pose = pose.compose(inc.delta)
                    raw[inc.t_to] = pose
            common = sorted(set(fused) & set(gt))
            ate_f = absolute_trajectory_error(fused, gt)
            ate_r = absolute_trajectory_error({t: raw[t] for t in common if t in raw}, gt)
            print(f"ATE fused: {ate_f:.3f} m, raw odometry: {ate_r:.3f} m")
            if args.plot is not None:
                from mcloc.plotting import plot_trajectories
                plot_trajectories({"ground truth": np.array([gt[t].t for t in sorted(gt)]),
                                   "odometry": np.array([raw[t].t for t in sorted(raw)]),
                                   "fused": np.array([fused[t].t for t in sorted(fused)])}, args.plot)
    elif args.plot is not None:
        from mcloc.plotting import plot_trajectories
        plot_trajectories({"fused": np.array([p.t for _, p in traj])}, args.plot)
    return EXIT_OK


def cmd_benchmark(args, cfg: dict) -> int:
    from mcloc import formats
    from mcloc.evaluation import DEFAULT_CLASSES, FrameMismatchError, evaluate, pose_errors

    _need_file(args.results, "results")
    _need_file(args.groundtruth, "ground-truth")
    if args.out_dir is not None:
        _need_out(args.out_dir)
    results = formats.read_results(args.results)
    gt, _ = formats.read_groundtruth(args.groundtruth)
    est = {r["frame_id"]: (r["pose"] if r["status"] == "localized" else None) for r in results}
    try:
        table = evaluate(est, gt, DEFAULT_CLASSES, planar=cfg["planar"])
    except FrameMismatchError as exc:
        raise formats.InputError(str(exc)) from None
    print("% of poses within error thresholds (deg / m)")
    print(table.render())
    times = [r["stats"]["wall_time"] for r in results if "wall_time" in r.get("stats", {})]
    comps = [r["stats"].get("descriptor_comparisons", 0) for r in results]
    print(f"frames: {table.num_frames}, localized: {table.num_localized}")
    print(f"mean descriptor comparisons: {np.mean(comps) if comps else 0:.0f}")
    print("mean matching time: " + (f"{1000.0 * np.mean(times):.1f} ms" if times else "n/a"))
    if args.out_dir is not None:
        out = args.out_dir
        (out / "table.json").write_text(json.dumps(table.to_dict(), indent=1) + "\n")
        with (out / "table.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["heading_deg", "position_m", "percent"])
            for row in table.as_rows():
                w.writerow([row["heading_deg"], row["position_m"], f"{row['percent']:.4f}"])
        rot, pos = [], []
        with (out / "errors.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame_id", "status", "rotation_deg", "position_m"])
            for fid in sorted(gt):
                if est[fid] is None:
                    w.writerow([fid, "failed", "", ""])
                    continue
                r_deg, p_m = pose_errors(est[fid], gt[fid], cfg["planar"])
                rot.append(r_deg)
                pos.append(p_m)
                w.writerow([fid, "localized", f"{r_deg:.6g}", f"{p_m:.6g}"])
        from mcloc.plotting import plot_error_cdf
        plot_error_cdf(np.array(rot), np.array(pos), table.num_frames, out / "error_cdf.png")
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "build-map": cmd_build_map, "localize": cmd_localize,
            "fuse": cmd_fuse, "benchmark": cmd_benchmark}


def _setup_logging() -> None:
    level_name = os.environ.get("MCLOC_LOG", "WARNING").upper()
    level = getattr(logging, level_name, None)
    if not isinstance(level, int):
        level = logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv: list[str] | None = None) -> int:
    from mcloc.formats import InputError
    from mcloc.mapstore import MapFormatError

    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        cfg = resolve(args)
        log.debug("resolved parameters: %s", json.dumps(cfg, sort_keys=True, default=str))
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, InputError, MapFormatError) as exc:
        print(f"mcloc {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # anything else is a runtime failure
        log.debug("runtime failure", exc_info=True)
        print(f"mcloc {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
