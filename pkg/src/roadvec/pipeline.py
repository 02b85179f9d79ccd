"""End-to-end orchestration: scans + motion log -> optimized vector map.

Stages mirror the processing chain: dead reckoning, per-node grid
fusion, vectorization, consecutive matching, loop closure and graph
optimization, and final polyline concatenation into one global map.
"""

from __future__ import annotations

import dataclasses
import math
import time
from dataclasses import dataclass, field

import numpy as np
import yaml

from .concatenate import merge_polylines
from .geometry import BoundaryKind, Polyline, Pose2, se2_compose, se2_inverse, transform_polyline
from .grid_fusion import (
    GridConfig,
    OccupancyGrid,
    PoseOutOfBounds,
    ScanFrame,
    eliminate_ground,
    fuse_frame,
    mark_obstacles,
    occupied_cells,
    preprocess_boundary,
    project_scan,
)
from .matching import MatchParams, NoCorrespondences, icl_match
from .odometry import MotionSample, OdoConfig, OdoState, relative_pose, run_filter
from .pose_graph import (
    EdgeKind,
    GraphEdge,
    LoopParams,
    PoseGraph,
    detect_loop_candidates,
    optimize,
    try_close_loop,
)
from .vectorize import LVM, simplify_rdp, vectorize_mask


@dataclass
class VectorizeConfig:
    angular_resolution: float = math.radians(0.5)
    gap_threshold: float = 1.0
    epsilon: float = 0.15


@dataclass
class SlamConfig:
    node_spacing: float = 10.0  # meters of travel per graph node
    node_heading_change: float = math.radians(30.0)
    lgm_half_span: float = 38.0  # travel window of frames fused per node
    match_edge_threshold: float = 0.2  # mean abs residual gate for consecutive edges
    # consecutive-node LVMs share fused frames, so their residuals are not
    # independent; deflate the matching information accordingly
    match_info_scale: float = 0.3
    # adjacent node LVMs overlap heavily; every map_node_stride-th one
    # already covers the boundary when assembling the global map
    map_node_stride: int = 3
    concat_buffer: float = 0.5
    loop_rounds: int = 2


@dataclass
class PipelineConfig:
    """Every tunable of the pipeline, one section per module."""

    # node grids are square and centered so turning segments stay in extent
    grid: GridConfig = field(
        default_factory=lambda: GridConfig(
            cols=401, anchor_row=200, anchor_col=200, use_miss=False, preprocess_rays=720
        )
    )
    odometry: OdoConfig = field(default_factory=OdoConfig)
    vectorize: VectorizeConfig = field(default_factory=VectorizeConfig)
    match: MatchParams = field(default_factory=MatchParams)
    loop_match: MatchParams = field(
        default_factory=lambda: MatchParams(rejection_threshold=2.5)
    )
    loop: LoopParams = field(default_factory=LoopParams)
    slam: SlamConfig = field(default_factory=SlamConfig)

    def to_yaml(self, path) -> None:
        doc = {
            name: dataclasses.asdict(getattr(self, name))
            for name in ("grid", "odometry", "vectorize", "match", "loop_match", "loop", "slam")
        }
        doc["grid"]["vehicle_span"] = list(doc["grid"]["vehicle_span"])
        with open(path, "w") as f:
            yaml.safe_dump(doc, f, sort_keys=False)

    @staticmethod
    def from_yaml(path) -> "PipelineConfig":
        with open(path) as f:
            doc = yaml.safe_load(f) or {}
        cfg = PipelineConfig()
        factories = {
            "grid": GridConfig,
            "odometry": OdoConfig,
            "vectorize": VectorizeConfig,
            "match": MatchParams,
            "loop_match": MatchParams,
            "loop": LoopParams,
            "slam": SlamConfig,
        }
        for name, factory in factories.items():
            section = dict(dataclasses.asdict(getattr(cfg, name)))
            section.update(doc.get(name) or {})
            if name == "grid":
                section["vehicle_span"] = tuple(section["vehicle_span"])
            setattr(cfg, name, factory(**section))
        return cfg


def frame_to_boundary(points: np.ndarray, grid: GridConfig):
    """Single-frame chain: project, eliminate ground, mark and preprocess."""
    g = project_scan(ScanFrame(points), grid)
    labels = eliminate_ground(g)
    mask = mark_obstacles(g, labels)
    return preprocess_boundary(mask, grid)


def build_lgm(frames: list[tuple[np.ndarray, Pose2]], anchor: Pose2, grid: GridConfig) -> OccupancyGrid:
    """Fuse (points, dead-reckoned pose) frames into an LGM anchored at `anchor`."""
    lgm = OccupancyGrid(grid)
    for points, pose in frames:
        boundary, free = frame_to_boundary(points, grid)
        rel = se2_compose(se2_inverse(anchor), pose)
        try:
            fuse_frame(lgm, boundary, rel, free)
        except PoseOutOfBounds:
            continue  # frame lies entirely outside this node's extent
    return lgm


def vectorize_lgm(
    lgm: OccupancyGrid, cfg: VectorizeConfig, source_pose: Pose2 = Pose2()
) -> tuple[LVM, LVM]:
    """(raw, simplified) LVM of an LGM's occupied cells."""
    raw = vectorize_mask(
        occupied_cells(lgm),
        lgm.config,
        source_pose=source_pose,
        angular_resolution=cfg.angular_resolution,
        gap_threshold=cfg.gap_threshold,
        epsilon=None,
    )
    return raw, simplify_rdp(raw, cfg.epsilon)


@dataclass
class SlamNode:
    frame_index: int
    timestamp: float
    odo_pose: Pose2
    travel: float


@dataclass
class SlamResult:
    graph: PoseGraph
    nodes: list[SlamNode]
    map_polylines: list[Polyline]
    odo_states: list[OdoState]
    matching_edges: int = 0
    loop_edges: int = 0
    timings: dict = field(default_factory=dict)

    def optimized_trajectory(self) -> list[tuple[float, Pose2]]:
        return [(n.timestamp, g.pose) for n, g in zip(self.nodes, self.graph.nodes)]


def _select_nodes(states: list[OdoState], frames, cfg: SlamConfig) -> list[SlamNode]:
    nodes = []
    for i, st in enumerate(states):
        if nodes:
            last = nodes[-1]
            d = st.traveled - last.travel
            dth = abs((st.pose.theta - last.odo_pose.theta + math.pi) % (2 * math.pi) - math.pi)
            if d < cfg.node_spacing and dth < cfg.node_heading_change:
                continue
        nodes.append(SlamNode(i, frames[i].timestamp, st.pose, st.traveled))
    return nodes


def run_slam(
    frames: list[ScanFrame],
    samples: list[MotionSample],
    config: PipelineConfig = None,
    initial_pose: Pose2 | None = None,
    progress=None,
) -> SlamResult:
    """Full pipeline on an aligned scan/motion stream."""
    if config is None:
        config = PipelineConfig()
    if len(frames) != len(samples):
        raise ValueError("scan log and motion log must be frame-aligned")
    states = run_filter(samples, config.odometry, initial_pose=initial_pose)
    nodes = _select_nodes(states, frames, config.slam)
    timings: dict = {}
    tick = time.perf_counter()

    # per-frame boundary masks are pose-independent; extract once, fuse many times
    boundaries = [frame_to_boundary(fr.points, config.grid) for fr in frames]
    timings["boundaries"] = time.perf_counter() - tick
    tick = time.perf_counter()

    graph = PoseGraph()
    lvms_raw: list[LVM] = []
    for k, node in enumerate(nodes):
        lgm = OccupancyGrid(config.grid)
        for i in range(len(frames)):
            if abs(states[i].traveled - node.travel) > config.slam.lgm_half_span:
                continue
            boundary, free = boundaries[i]
            rel = se2_compose(se2_inverse(node.odo_pose), states[i].pose)
            try:
                fuse_frame(lgm, boundary, rel, free)
            except PoseOutOfBounds:
                continue
        raw, simplified = vectorize_lgm(lgm, config.vectorize)
        lvms_raw.append(raw)
        graph.add_node(node.odo_pose, simplified)
        if progress:
            progress(f"node {k + 1}/{len(nodes)} at frame {node.frame_index}")
    timings["nodes"] = time.perf_counter() - tick
    tick = time.perf_counter()

    matching_edges = 0
    for k in range(1, len(nodes)):
        rel, cov = relative_pose(
            states[nodes[k - 1].frame_index], states[nodes[k].frame_index], config.odometry
        )
        graph.add_edge(
            GraphEdge(k - 1, k, rel, np.linalg.inv(cov), EdgeKind.ODOMETRY)
        )
        try:
            result = icl_match(graph.lvms[k], graph.lvms[k - 1], rel, config.match)
        except NoCorrespondences:
            continue
        if (
            result.converged
            and not result.degenerate
            and result.mean_abs_residual <= config.slam.match_edge_threshold
        ):
            info = result.information_matrix * config.slam.match_info_scale
            graph.add_edge(GraphEdge(k - 1, k, result.transform, info, EdgeKind.MATCHING))
            matching_edges += 1

    timings["edges"] = time.perf_counter() - tick
    tick = time.perf_counter()

    # close loops before the first optimization: compass-aided dead
    # reckoning bounds the drift better than integrated matching edges
    loop_edges = 0
    for _ in range(config.slam.loop_rounds):
        added = 0
        closed_pairs = {
            (e.from_id, e.to_id) for e in graph.edges if e.kind is EdgeKind.MATCHING
        }
        for k in range(len(nodes)):
            for cand in detect_loop_candidates(
                graph, k, config.loop.radius, config.loop.min_index_gap
            ):
                if (cand, k) in closed_pairs or (k, cand) in closed_pairs:
                    continue
                edge = try_close_loop(graph, k, cand, config.loop, config.loop_match)
                if edge is not None:
                    graph.add_edge(edge)
                    closed_pairs.add((cand, k))
                    added += 1
                    loop_edges += 1
        optimize(graph)
        if added == 0:
            break

    timings["loops"] = time.perf_counter() - tick
    tick = time.perf_counter()

    world_lines: list[Polyline] = []
    stride = max(1, config.slam.map_node_stride)
    picked = list(range(0, len(nodes), stride))
    if picked and picked[-1] != len(nodes) - 1:
        picked.append(len(nodes) - 1)
    for k in picked:
        lvm = graph.lvms[graph.nodes[k].id]
        for line in lvm.road_polylines():
            world_lines.append(transform_polyline(graph.nodes[k].pose, line))
    map_polylines = _assemble_map(world_lines, config.slam.concat_buffer)
    timings["map"] = time.perf_counter() - tick

    return SlamResult(
        graph=graph,
        nodes=nodes,
        map_polylines=map_polylines,
        odo_states=states,
        matching_edges=matching_edges,
        loop_edges=loop_edges,
        timings=timings,
    )


def _assemble_map(lines: list[Polyline], buffer: float) -> list[Polyline]:
    # longest first so fragments fold into the dominant boundary runs
    ordered = sorted(lines, key=lambda p: -p.length())
    out: list[Polyline] = []
    for line in ordered:
        try:
            out = merge_polylines(out, [line], buffer)
        except Exception:
            out.append(line)
    return out


def evaluate_trajectory(
    estimated: list[tuple[float, Pose2]], truth: list[tuple[float, Pose2]]
) -> dict:
    """Position errors of estimated poses vs the time-matched ground truth."""
    truth_ts = np.array([t for t, _ in truth])
    errors = []
    for ts, pose in estimated:
        i = int(np.argmin(np.abs(truth_ts - ts)))
        gt = truth[i][1]
        errors.append(math.hypot(pose.x - gt.x, pose.y - gt.y))
    errors = np.array(errors)
    return {
        "count": len(errors),
        "average_error": float(errors.mean()),
        "max_error": float(errors.max()),
        "rmse": float(np.sqrt(np.mean(errors**2))),
    }
