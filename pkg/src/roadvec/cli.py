"""Stage-oriented command line: simulate, odometry, fuse, vectorize,
match, slam, eval, plot.

Every stage reads and writes the package's documented file formats, so
stages can be chained manually or replaced by the monolithic `slam`
subcommand with identical results. Exit codes: 0 success, 2 bad input
(missing or unparseable files, malformed arguments), 3 precondition
violation (inputs parse but violate a stage's domain requirements),
4 non-convergence (flagged results are still written).

The config file is a YAML document with one section per module
(grid, odometry, vectorize, match, loop_match, loop, slam); its path
comes from --config or the ROADVEC_CONFIG environment variable.
"""

from __future__ import annotations

import argparse
import math
import os
import sys

import numpy as np

from .concatenate import KindMismatch, NoIntersections
from .geometry import BoundaryKind, Pose2
from .grid_fusion import EmptyFrame, OccupancyGrid, PoseOutOfBounds, load_lgm, save_lgm
from .matching import (
    MatchResult,
    NoCorrespondences,
    ZeroMotion,
    icl_match,
    load_match_result,
    match_error,
    save_match_result,
)
from .odometry import (
    NonMonotonicTime,
    load_motion_log,
    load_trajectory,
    run_filter,
    save_motion_log,
    save_trajectory,
)
from .pipeline import (
    PipelineConfig,
    build_lgm,
    evaluate_trajectory,
    run_slam,
    vectorize_lgm,
)
from .pose_graph import DisconnectedGraph, NonPositiveDefinite, load_graph, save_graph
from .scanio import load_scan_log, save_scan_log
from .simulator import (
    InvalidParams,
    MotionNoise,
    PoseOutsideScene,
    SceneKind,
    SceneParams,
    TrajectoryParams,
    drive,
    generate_scene,
    load_scene,
    save_scene,
    start_pose,
)
from .vectorize import LVM, OriginOutsideGrid, load_lvm, save_lvm

EXIT_OK = 0
EXIT_BAD_INPUT = 2
EXIT_PRECONDITION = 3
EXIT_NOT_CONVERGED = 4

CONFIG_ENV_VAR = "ROADVEC_CONFIG"

# inputs that parse but violate a stage's domain requirements
_PRECONDITION_ERRORS = (
    PoseOutsideScene,
    PoseOutOfBounds,
    OriginOutsideGrid,
    NonMonotonicTime,
    KindMismatch,
    NoIntersections,
    DisconnectedGraph,
    NonPositiveDefinite,
    InvalidParams,
    EmptyFrame,
    NoCorrespondences,
    ZeroMotion,
)


class BadInput(Exception):
    """Unreadable or malformed input; maps to exit code 2."""


def _load_config(args) -> PipelineConfig:
    path = getattr(args, "config", None) or os.environ.get(CONFIG_ENV_VAR)
    if path is None:
        return PipelineConfig()
    if not os.path.exists(path):
        raise BadInput(f"config file not found: {path}")
    try:
        return PipelineConfig.from_yaml(path)
    except Exception as exc:
        raise BadInput(f"cannot parse config {path}: {exc}") from exc


def _read(loader, path, what: str):
    if not os.path.exists(path):
        raise BadInput(f"{what} not found: {path}")
    try:
        return loader(path)
    except _PRECONDITION_ERRORS:
        raise
    except Exception as exc:
        raise BadInput(f"cannot parse {what} {path}: {exc}") from exc


def _parse_pose(text: str) -> Pose2:
    try:
        x, y, theta = (float(v) for v in text.replace(",", " ").split())
    except ValueError as exc:
        raise BadInput(f"pose must be three numbers 'x y theta', got {text!r}") from exc
    return Pose2(x, y, theta)


def _initial_pose(args) -> Pose2 | None:
    if getattr(args, "start", None):
        return _parse_pose(args.start)
    if getattr(args, "scene", None):
        scene = _read(load_scene, args.scene, "scene file")
        return start_pose(scene)
    return None


def cmd_simulate(args) -> int:
    try:
        kind = SceneKind(args.scene)
    except ValueError:
        raise BadInput(f"unknown scene kind: {args.scene!r}")
    params = SceneParams()
    if args.jog_depth is not None:
        params.jog_depth = args.jog_depth
    scene = generate_scene(kind, params, seed=args.seed)
    noise = MotionNoise.calibrated() if args.noise == "calibrated" else MotionNoise()
    trajectory = TrajectoryParams(speed=args.speed, dt=args.dt)
    frames = drive(scene, trajectory, noise, seed=args.seed)

    os.makedirs(args.out, exist_ok=True)
    save_scene(scene, os.path.join(args.out, "scene.yaml"))
    save_scan_log([f.scan for f in frames], os.path.join(args.out, "scans.bin"))
    save_motion_log([f.sample for f in frames], os.path.join(args.out, "motion.txt"))
    truth = [(0.0, start_pose(scene))] + [
        (f.sample.timestamp, f.true_pose) for f in frames
    ]
    save_trajectory(truth, os.path.join(args.out, "truth.txt"))
    print(f"wrote {len(frames)} frames to {args.out}")
    return EXIT_OK


def cmd_odometry(args) -> int:
    config = _load_config(args)
    samples = _read(load_motion_log, args.motion, "motion log")
    if not samples:
        raise BadInput(f"motion log is empty: {args.motion}")
    states = run_filter(samples, config.odometry, initial_pose=_initial_pose(args))
    save_trajectory(
        [(s.timestamp, st.pose) for s, st in zip(samples, states)], args.out
    )
    print(f"wrote {len(states)} poses to {args.out}")
    return EXIT_OK


def _frame_range(text: str | None, n: int) -> range:
    if text is None:
        return range(n)
    try:
        lo_s, hi_s = text.split(":")
        lo = int(lo_s) if lo_s else 0
        hi = int(hi_s) if hi_s else n
    except ValueError as exc:
        raise BadInput(f"frame range must be 'start:stop', got {text!r}") from exc
    if not (0 <= lo < hi <= n):
        raise BadInput(f"frame range {text!r} outside 0..{n}")
    return range(lo, hi)


def cmd_fuse(args) -> int:
    config = _load_config(args)
    frames = _read(load_scan_log, args.scans, "scan log")
    if not frames:
        raise BadInput(f"scan log has no frames: {args.scans}")
    traj = _read(load_trajectory, args.traj, "trajectory")
    # trajectory rows may carry a leading t=0 start pose; align by timestamp
    by_ts = {round(ts, 6): pose for ts, pose in traj}
    poses = []
    for fr in frames:
        pose = by_ts.get(round(fr.timestamp, 6))
        if pose is None:
            raise BadInput(
                f"trajectory has no pose for scan timestamp {fr.timestamp:.6f}"
            )
        poses.append(pose)
    sel = _frame_range(args.frames, len(frames))
    anchor_index = args.anchor if args.anchor is not None else sel[0]
    if not (0 <= anchor_index < len(frames)):
        raise BadInput(f"anchor frame {anchor_index} outside 0..{len(frames) - 1}")
    lgm = build_lgm(
        [(frames[i].points, poses[i]) for i in sel], poses[anchor_index], config.grid
    )
    save_lgm(lgm, args.out)
    print(f"fused {len(sel)} frames into {args.out}")
    return EXIT_OK


def cmd_vectorize(args) -> int:
    config = _load_config(args)
    lgm = _read(load_lgm, args.lgm, "LGM file")
    raw, simplified = vectorize_lgm(lgm, config.vectorize)
    lvm = raw if args.raw else simplified
    save_lvm(lvm, args.out)
    print(f"wrote {len(lvm.polylines)} polylines to {args.out}")
    return EXIT_OK


def cmd_match(args) -> int:
    config = _load_config(args)
    source = _read(load_lvm, args.source, "source LVM")
    target = _read(load_lvm, args.target, "target LVM")
    seed = _parse_pose(args.seed_pose) if args.seed_pose else Pose2()
    result = icl_match(source, target, seed, config.match)
    save_match_result(result, args.out)
    print(
        f"transform ({result.transform.x:.4f}, {result.transform.y:.4f}, "
        f"{math.degrees(result.transform.theta):.3f} deg) "
        f"residual {result.mean_abs_residual:.4f} m "
        f"over {result.correspondence_count} correspondences"
        + (" [degenerate]" if result.degenerate else "")
    )
    if not result.converged:
        print("warning: match did not converge; result written anyway", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def cmd_slam(args) -> int:
    config = _load_config(args)
    frames = _read(load_scan_log, args.scans, "scan log")
    if not frames:
        raise BadInput(f"scan log has no frames: {args.scans}")
    samples = _read(load_motion_log, args.motion, "motion log")
    if len(frames) != len(samples):
        raise BadInput(
            f"scan log ({len(frames)} frames) and motion log "
            f"({len(samples)} samples) are not frame-aligned"
        )
    progress = None
    if args.verbose:
        progress = lambda msg: print(msg, file=sys.stderr)
    result = run_slam(
        frames, samples, config, initial_pose=_initial_pose(args), progress=progress
    )

    os.makedirs(args.out, exist_ok=True)
    save_lvm(
        LVM(result.map_polylines, simplified=True),
        os.path.join(args.out, "map.txt"),
    )
    save_trajectory(result.optimized_trajectory(), os.path.join(args.out, "traj.txt"))
    save_trajectory(
        [(s.timestamp, st.pose) for s, st in zip(samples, result.odo_states)],
        os.path.join(args.out, "odometry.txt"),
    )
    save_graph(result.graph, os.path.join(args.out, "graph.txt"))
    print(
        f"{len(result.nodes)} nodes, {result.matching_edges} matching edges, "
        f"{result.loop_edges} loop closures, {len(result.map_polylines)} map polylines"
    )
    if result.loop_edges == 0:
        print(
            "warning: no loop closures accepted; map written from dead "
            "reckoning only",
            file=sys.stderr,
        )
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def _print_table(rows: list[tuple[str, str]], out_path: str | None) -> None:
    width = max(len(k) for k, _ in rows)
    text = "\n".join(f"{k.ljust(width)}  {v}" for k, v in rows) + "\n"
    sys.stdout.write(text)
    if out_path:
        with open(out_path, "w") as f:
            f.write(text)


def cmd_eval(args) -> int:
    if args.traj:
        if not args.truth:
            raise BadInput("--traj evaluation needs --truth")
        est = _read(load_trajectory, args.traj, "trajectory")
        truth = _read(load_trajectory, args.truth, "ground-truth trajectory")
        if not est or not truth:
            raise BadInput("trajectories must be non-empty")
        stats = evaluate_trajectory(est, truth)
        _print_table(
            [
                ("poses", str(stats["count"])),
                ("average_error_m", f"{stats['average_error']:.4f}"),
                ("max_error_m", f"{stats['max_error']:.4f}"),
                ("rmse_m", f"{stats['rmse']:.4f}"),
            ],
            args.out,
        )
        return EXIT_OK
    if args.match:
        if not args.truth_pose:
            raise BadInput("--match evaluation needs --truth-pose")
        result = _read(load_match_result, args.match, "match result")
        truth = _parse_pose(args.truth_pose)
        absolute, relative = match_error(result, truth)
        _print_table(
            [
                ("absolute_error_m", f"{absolute:.4f}"),
                ("relative_error", f"{relative:.4f}"),
                ("rotation_error_deg", f"{math.degrees(abs(result.transform.theta - truth.theta)):.4f}"),
                ("mean_abs_residual_m", f"{result.mean_abs_residual:.4f}"),
                ("converged", str(result.converged).lower()),
            ],
            args.out,
        )
        return EXIT_OK
    raise BadInput("eval needs either --traj/--truth or --match/--truth-pose")


def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(8, 8))
    plotted = False

    if args.lgm:
        lgm = _read(load_lgm, args.lgm, "LGM file")
        probs = lgm.occupancy()
        cfg = lgm.config
        extent = cfg.cell_centers(np.array([[0, 0], [cfg.rows - 1, cfg.cols - 1]]))
        ax.imshow(
            probs,
            origin="lower",
            cmap="gray_r",
            extent=(
                extent[0, 1] - cfg.resolution / 2,
                extent[1, 1] + cfg.resolution / 2,
                extent[0, 0] - cfg.resolution / 2,
                extent[1, 0] + cfg.resolution / 2,
            ),
        )
        plotted = True

    for path in args.lvm or []:
        lvm = _read(load_lvm, path, "LVM file")
        for line in lvm.polylines:
            style = "-" if line.kind is BoundaryKind.ROAD else ":"
            ax.plot(line.nodes[:, 0], line.nodes[:, 1], style, linewidth=1.2)
        plotted = True

    if args.graph:
        graph = _read(load_graph, args.graph, "graph file")
        xy = np.array([[n.pose.x, n.pose.y] for n in graph.nodes])
        ax.plot(xy[:, 0], xy[:, 1], ".-", markersize=3, linewidth=0.8, label="nodes")
        for edge in graph.edges:
            if abs(edge.from_id - edge.to_id) > 1:
                pts = xy[[edge.from_id, edge.to_id]]
                ax.plot(pts[:, 0], pts[:, 1], "g-", linewidth=0.5, alpha=0.5)
        plotted = True

    for path in args.traj or []:
        traj = _read(load_trajectory, path, "trajectory")
        xy = np.array([[p.x, p.y] for _, p in traj])
        ax.plot(xy[:, 0], xy[:, 1], linewidth=1.0, label=os.path.basename(path))
        plotted = True

    if args.scene:
        scene = _read(load_scene, args.scene, "scene file")
        for wall in scene.walls:
            ax.plot(wall.nodes[:, 0], wall.nodes[:, 1], "k-", linewidth=0.8, alpha=0.6)
        plotted = True

    if not plotted:
        plt.close(fig)
        raise BadInput("plot needs at least one of --lgm/--lvm/--graph/--traj/--scene")

    ax.set_aspect("equal")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    if ax.get_legend_handles_labels()[0]:
        ax.legend(loc="best", fontsize=8)
    fig.savefig(args.out, format="svg", metadata={"Date": None})
    plt.close(fig)
    print(f"wrote {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="roadvec",
        description="Vector-based road boundary mapping from 3D LiDAR scans.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config(p):
        p.add_argument(
            "--config",
            help=f"pipeline config YAML (default: ${CONFIG_ENV_VAR} or built-in defaults)",
        )

    p = sub.add_parser("simulate", help="generate a synthetic scene and drive it")
    p.add_argument("--scene", required=True, choices=[k.value for k in SceneKind])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", choices=["calibrated", "none"], default="calibrated")
    p.add_argument("--speed", type=float, default=10.0, help="vehicle speed, m/s")
    p.add_argument("--dt", type=float, default=0.5, help="frame interval, s")
    p.add_argument("--jog-depth", type=float, default=None, help="curb jog depth, m")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("odometry", help="dead-reckon a motion log into a trajectory")
    add_config(p)
    p.add_argument("--motion", required=True, help="motion log")
    p.add_argument("--scene", help="scene file; sets the initial pose")
    p.add_argument("--start", help="initial pose 'x y theta' (overrides --scene)")
    p.add_argument("--out", required=True, help="output trajectory")
    p.set_defaults(func=cmd_odometry)

    p = sub.add_parser("fuse", help="fuse scan frames into an occupancy grid (LGM)")
    add_config(p)
    p.add_argument("--scans", required=True, help="scan log")
    p.add_argument("--traj", required=True, help="trajectory with per-frame poses")
    p.add_argument("--frames", help="frame range 'start:stop' (default: all)")
    p.add_argument("--anchor", type=int, help="anchor frame index (default: first selected)")
    p.add_argument("--out", required=True, help="output LGM")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("vectorize", help="extract boundary polylines (LVM) from an LGM")
    add_config(p)
    p.add_argument("--lgm", required=True)
    p.add_argument("--raw", action="store_true", help="skip polyline simplification")
    p.add_argument("--out", required=True, help="output LVM")
    p.set_defaults(func=cmd_vectorize)

    p = sub.add_parser("match", help="align a source LVM to a target LVM")
    add_config(p)
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--seed-pose", help="initial transform 'x y theta' (default identity)")
    p.add_argument("--out", required=True, help="output match result")
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("slam", help="full pipeline: scans + motion -> global vector map")
    add_config(p)
    p.add_argument("--scans", required=True, help="scan log")
    p.add_argument("--motion", required=True, help="motion log")
    p.add_argument("--scene", help="scene file; sets the initial pose")
    p.add_argument("--start", help="initial pose 'x y theta' (overrides --scene)")
    p.add_argument("--verbose", action="store_true")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_slam)

    p = sub.add_parser("eval", help="error tables for trajectories or match results")
    p.add_argument("--traj", help="estimated trajectory")
    p.add_argument("--truth", help="ground-truth trajectory")
    p.add_argument("--match", help="match result file")
    p.add_argument("--truth-pose", help="ground-truth transform 'x y theta'")
    p.add_argument("--out", help="also write the table to this file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot", help="render artifacts to an SVG figure")
    p.add_argument("--lgm", help="occupancy grid")
    p.add_argument("--lvm", action="append", help="LVM file (repeatable)")
    p.add_argument("--graph", help="pose graph")
    p.add_argument("--traj", action="append", help="trajectory (repeatable)")
    p.add_argument("--scene", help="scene file (walls)")
    p.add_argument("--out", required=True, help="output SVG")
    p.set_defaults(func=cmd_plot)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on bad arguments, which matches the bad-input code
        return int(exc.code or 0)
    try:
        return args.func(args)
    except BadInput as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    except _PRECONDITION_ERRORS as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION


if __name__ == "__main__":
    sys.exit(main())
