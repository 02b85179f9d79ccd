"""Synthetic road scenes, LiDAR scans and drive logs with ground truth.

Curbs are modeled as vertical ribbons rising from a flat ground plane; a
multi-ring azimuth fan is intersected against them analytically, so
every return is exact up to the configured range noise. All generation
is deterministic per seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import yaml

from .geometry import Pose2, wrap_angle
from .odometry import MotionSample


class InvalidParams(ValueError):
    pass


class PoseOutsideScene(ValueError):
    pass


class SceneKind(Enum):
    STRAIGHT = "straight"
    CORNER = "corner"
    LOOP = "loop"
    CLUTTER = "clutter"


@dataclass
class Wall:
    """Vertical ribbon: polyline footprint in the world plane + height."""

    nodes: np.ndarray  # (N, 2)
    height: float
    is_boundary: bool = True  # curb vs clutter obstacle

    def __post_init__(self):
        self.nodes = np.asarray(self.nodes, dtype=float)


@dataclass
class SceneParams:
    width: float = 8.0
    length: float = 100.0
    loop_size: tuple[float, float] = (200.0, 140.0)
    curb_height: float = 0.3
    ground_z: float = 0.0
    jog_depth: float = 1.0  # driveway-style indentations that break straight-road symmetry
    jog_length: float = 4.0
    jog_spacing: float = 25.0
    clutter_count: int = 6


@dataclass
class SceneSpec:
    kind: SceneKind
    walls: list[Wall]
    ground_z: float
    extent: tuple[float, float, float, float]  # x_min, x_max, y_min, y_max
    seed: int
    route: list[np.ndarray] = field(default_factory=list)  # suggested drive waypoints

    @property
    def curbs(self) -> list[Wall]:
        return [w for w in self.walls if w.is_boundary]

    def contains(self, x: float, y: float, margin: float = 0.0) -> bool:
        x0, x1, y0, y1 = self.extent
        return x0 - margin <= x <= x1 + margin and y0 - margin <= y <= y1 + margin


def _jogged_run(x0: float, x1: float, y: float, outward: float, params: SceneParams, phase: float):
    """Curb run along +x at offset y, with driveway-style rectangular jogs.

    Jog positions and lengths are jittered (deterministically from the
    phase value) so no stretch of the run repeats under a shift.
    """
    nodes = [(x0, y)]
    if params.jog_depth > 0 and params.jog_spacing > 0:
        rng = np.random.default_rng(int(phase * 9973) & 0xFFFFFFFF)
        p = x0 + phase
        while True:
            length = params.jog_length * rng.uniform(0.7, 1.6)
            if p + length >= x1 - 1.0:
                break
            yj = y + outward * params.jog_depth
            nodes += [(p, y), (p, yj), (p + length, yj), (p + length, y)]
            p += params.jog_spacing * rng.uniform(0.7, 1.4)
    nodes.append((x1, y))
    out = [nodes[0]]
    for n in nodes[1:]:
        if math.hypot(n[0] - out[-1][0], n[1] - out[-1][1]) > 1e-9:
            out.append(n)
    return np.array(out)


def _transform_nodes(nodes: np.ndarray, origin: np.ndarray, axis: np.ndarray) -> np.ndarray:
    """Map run-local (s, offset) coordinates onto an arbitrary axis direction."""
    normal = np.array([-axis[1], axis[0]])
    return origin + nodes[:, :1] * axis + nodes[:, 1:] * normal


def generate_scene(kind: SceneKind, params: SceneParams = SceneParams(), seed: int = 0) -> SceneSpec:
    """Deterministic scene of the requested kind."""
    if params.width <= 0 or params.length <= 0 or params.curb_height <= 0:
        raise InvalidParams("width, length and curb height must be positive")
    rng = np.random.default_rng(seed)
    h = params.curb_height
    w2 = params.width / 2.0
    walls: list[Wall] = []

    if kind in (SceneKind.STRAIGHT, SceneKind.CLUTTER):
        walls.append(Wall(_jogged_run(0.0, params.length, w2, 1.0, params, 6.0), h))
        walls.append(Wall(_jogged_run(0.0, params.length, -w2, -1.0, params, 17.0), h))
        route = [np.array([5.0, 0.0]), np.array([params.length - 5.0, 0.0])]
        if kind is SceneKind.CLUTTER:
            for _ in range(params.clutter_count):
                cx = rng.uniform(10.0, params.length - 10.0)
                side = rng.choice([-1.0, 1.0])
                cy = side * rng.uniform(w2 - 1.5, w2 - 0.6)
                size = rng.uniform(0.3, 1.2)
                hh = rng.uniform(0.5, 1.5)
                box = np.array(
                    [
                        [cx - size / 2, cy - size / 2],
                        [cx + size / 2, cy - size / 2],
                        [cx + size / 2, cy + size / 2],
                        [cx - size / 2, cy + size / 2],
                        [cx - size / 2, cy - size / 2],
                    ]
                )
                walls.append(Wall(box, hh, is_boundary=False))
    elif kind is SceneKind.CORNER:
        l1 = params.length
        l2 = params.length * 0.6
        walls.append(Wall(np.array([[0.0, w2], [l1 - w2, w2], [l1 - w2, l2]]), h))
        walls.append(Wall(np.array([[0.0, -w2], [l1 + w2, -w2], [l1 + w2, l2]]), h))
        route = [np.array([5.0, 0.0]), np.array([l1, 0.0]), np.array([l1, l2 - 5.0])]
    elif kind is SceneKind.LOOP:
        lw, lh = params.loop_size
        if lw <= 4 * params.width or lh <= 4 * params.width:
            raise InvalidParams("loop footprint too small for the road width")
        for inset, outward in ((-w2, -1.0), (w2, 1.0)):
            # four sides of the centerline rectangle (0,0)-(lw,lh), offset by inset
            sides = [
                (np.array([0.0, 0.0]), np.array([1.0, 0.0]), lw),
                (np.array([lw, 0.0]), np.array([0.0, 1.0]), lh),
                (np.array([lw, lh]), np.array([-1.0, 0.0]), lw),
                (np.array([0.0, lh]), np.array([0.0, -1.0]), lh),
            ]
            for side, (origin, axis, span) in enumerate(sides):
                phase = 9.0 + 2.0 * side + (0.0 if inset < 0 else 5.0)
                run = _jogged_run(w2 + 2.0, span - w2 - 2.0, inset, outward, params, phase)
                walls.append(Wall(_transform_nodes(run, origin, axis), h))
        # two laps plus an overrun: every stretch is revisited, so loop
        # closures can anchor the whole trajectory (~1400 m at defaults)
        lap = [
            np.array([lw, 0.0]),
            np.array([lw, lh]),
            np.array([0.0, lh]),
            np.array([0.0, 0.0]),
        ]
        route = [np.array([20.0, 0.0])] + lap + lap + [np.array([60.0, 0.0])]
    else:
        raise InvalidParams(f"unknown scene kind {kind}")

    all_nodes = np.vstack([w.nodes for w in walls])
    margin = 20.0
    extent = (
        float(all_nodes[:, 0].min() - margin),
        float(all_nodes[:, 0].max() + margin),
        float(all_nodes[:, 1].min() - margin),
        float(all_nodes[:, 1].max() + margin),
    )
    return SceneSpec(kind, walls, params.ground_z, extent, seed, route)


@dataclass
class SensorParams:
    mount_height: float = 2.0
    n_azimuth: int = 360
    elevations: np.ndarray = field(
        default_factory=lambda: np.radians(np.linspace(-24.8, -2.0, 64))
    )
    max_range: float = 60.0


@dataclass
class SimScan:
    points: np.ndarray  # (N, 3), vehicle frame, z = 0 at ground
    true_pose: Pose2
    timestamp: float = 0.0


def _wall_segments(scene: SceneSpec):
    starts, ends, heights = [], [], []
    for wall in scene.walls:
        starts.append(wall.nodes[:-1])
        ends.append(wall.nodes[1:])
        heights.append(np.full(len(wall.nodes) - 1, wall.height))
    return np.vstack(starts), np.vstack(ends), np.concatenate(heights)


def simulate_scan(
    scene: SceneSpec,
    pose: Pose2,
    noise_sigma: float = 0.0,
    seed: int = 0,
    sensor: SensorParams = SensorParams(),
    rng: np.random.Generator | None = None,
) -> SimScan:
    """Cast the multi-ring fan from pose; ground and wall-face returns."""
    if not scene.contains(pose.x, pose.y):
        raise PoseOutsideScene(f"pose ({pose.x}, {pose.y}) outside scene extent")
    if rng is None:
        rng = np.random.default_rng(seed)

    az = pose.theta + np.arange(sensor.n_azimuth) * (2.0 * math.pi / sensor.n_azimuth)
    d = np.column_stack([np.cos(az), np.sin(az)])  # (A, 2)
    origin = np.array([pose.x, pose.y])

    starts, ends, heights = _wall_segments(scene)
    seg = ends - starts  # (S, 2)
    rel = starts - origin  # (S, 2)
    denom = d[:, 0:1] * seg[None, :, 1] - d[:, 1:2] * seg[None, :, 0]  # (A, S)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = (rel[None, :, 0] * seg[None, :, 1] - rel[None, :, 1] * seg[None, :, 0]) / denom
        u = (rel[None, :, 0] * d[:, 1:2] - rel[None, :, 1] * d[:, 0:1]) / denom
    valid = (np.abs(denom) > 1e-12) & (r > 0.05) & (u >= 0.0) & (u <= 1.0)
    r = np.where(valid, r, np.inf)

    pts_world = []
    hmax = heights[None, :]
    for elev in sensor.elevations:
        s = math.tan(elev)
        z_local = sensor.mount_height + s * r  # height above ground at the wall
        ok = (z_local >= 0.0) & (z_local <= hmax) & (r <= sensor.max_range)
        r_ring = np.where(ok, r, np.inf).min(axis=1)
        r_ground = sensor.mount_height / -s if s < 0 else math.inf
        use_ground = (r_ground < r_ring) & (r_ground <= sensor.max_range)
        r_hit = np.where(use_ground, r_ground, r_ring)
        has = np.isfinite(r_hit)
        if not has.any():
            continue
        rr = r_hit[has]
        if noise_sigma > 0.0:
            slant = rr * math.sqrt(1.0 + s * s)
            slant = slant + rng.normal(0.0, noise_sigma, len(slant))
            rr = slant / math.sqrt(1.0 + s * s)
        xy = origin + rr[:, None] * d[has]
        z = scene.ground_z + sensor.mount_height + s * rr
        pts_world.append(np.column_stack([xy, z]))

    if pts_world:
        pw = np.vstack(pts_world)
    else:
        pw = np.empty((0, 3))
    # vehicle frame: rotate/translate horizontally, z relative to local ground
    c, sn = math.cos(-pose.theta), math.sin(-pose.theta)
    dx = pw[:, 0] - pose.x
    dy = pw[:, 1] - pose.y
    pts = np.column_stack([c * dx - sn * dy, sn * dx + c * dy, pw[:, 2] - scene.ground_z])
    return SimScan(pts, pose)


@dataclass
class TrajectoryParams:
    speed: float = 10.0
    dt: float = 0.5
    corner_radius: float = 6.0


@dataclass
class MotionNoise:
    gyro_bias: float = 0.0  # rad/s
    gyro_sigma: float = 0.0
    compass_sigma: float = 0.0
    compass_bias: float = 0.0
    velocity_scale: float = 1.0  # reported / true speed
    velocity_quantum: float = 0.0
    scan_sigma: float = 0.0

    @staticmethod
    def calibrated() -> "MotionNoise":
        """Defaults that accumulate noticeable dead-reckoning drift over ~1 km."""
        return MotionNoise(
            gyro_bias=math.radians(0.1),
            gyro_sigma=math.radians(0.2),
            compass_sigma=math.radians(0.5),
            velocity_scale=1.0002,
            velocity_quantum=0.01,
            scan_sigma=0.02,
        )


def _heading_profile(waypoints, params: TrajectoryParams, n_steps: int) -> np.ndarray:
    """Heading at each step along the filleted waypoint path.

    Corners are rounded with arcs of corner_radius; the heading is read
    at arc-length positions speed * dt apart.
    """
    pieces = []  # (length, theta_start, dtheta)
    pts = [np.asarray(p, dtype=float) for p in waypoints]
    cursor = pts[0]
    for i in range(1, len(pts)):
        prev_dir = pts[i] - cursor
        seg_len = np.linalg.norm(prev_dir)
        theta = math.atan2(prev_dir[1], prev_dir[0])
        if i == len(pts) - 1:
            pieces.append((seg_len, theta, 0.0))
            break
        nxt = pts[i + 1] - pts[i]
        theta_next = math.atan2(nxt[1], nxt[0])
        turn = wrap_angle(theta_next - theta)
        tangent = params.corner_radius * math.tan(abs(turn) / 2.0)
        pieces.append((max(seg_len - tangent, 0.0), theta, 0.0))
        arc_len = params.corner_radius * abs(turn)
        pieces.append((arc_len, theta, turn))
        cursor = pts[i] + tangent * nxt / np.linalg.norm(nxt)

    lengths = np.array([p[0] for p in pieces])
    bounds = np.concatenate([[0.0], np.cumsum(lengths)])
    total = bounds[-1]
    ds = params.speed * params.dt
    headings = np.empty(n_steps)
    for k in range(n_steps):
        s = min((k + 1) * ds, total - 1e-9)
        idx = int(np.searchsorted(bounds, s, side="right")) - 1
        idx = min(idx, len(pieces) - 1)
        length, theta, turn = pieces[idx]
        frac = 0.0 if length == 0 else (s - bounds[idx]) / length
        headings[k] = wrap_angle(theta + frac * turn)
    return headings


@dataclass
class DriveFrame:
    scan: SimScan
    sample: MotionSample
    true_pose: Pose2


def start_pose(scene: SceneSpec, waypoints=None) -> Pose2:
    """True vehicle pose at t=0: first waypoint, heading along the first leg."""
    pts = waypoints if waypoints is not None else scene.route
    if len(pts) < 2:
        raise InvalidParams("need at least two waypoints")
    p0 = np.asarray(pts[0], dtype=float)
    d = np.asarray(pts[1], dtype=float) - p0
    return Pose2(float(p0[0]), float(p0[1]), math.atan2(d[1], d[0]))


def drive(
    scene: SceneSpec,
    trajectory: TrajectoryParams = TrajectoryParams(),
    noise: MotionNoise = MotionNoise(),
    seed: int = 0,
    waypoints=None,
    sensor: SensorParams = SensorParams(),
) -> list[DriveFrame]:
    """Drive the route and emit time-ordered (scan, motion, truth) frames.

    The true trajectory is the exact integration of the heading profile,
    so noise-free motion samples reproduce it exactly.
    """
    rng = np.random.default_rng(seed)
    pts = waypoints if waypoints is not None else scene.route
    if len(pts) < 2:
        raise InvalidParams("need at least two waypoints")
    path_len = sum(
        float(np.linalg.norm(np.asarray(pts[i + 1]) - np.asarray(pts[i])))
        for i in range(len(pts) - 1)
    )
    n_steps = int(path_len / (trajectory.speed * trajectory.dt))
    headings = _heading_profile(pts, trajectory, n_steps)

    frames = []
    x, y = float(pts[0][0]), float(pts[0][1])
    prev_theta = headings[0]
    for k in range(n_steps):
        t = (k + 1) * trajectory.dt
        theta = headings[k]
        step = trajectory.speed * trajectory.dt
        x += step * math.cos(theta)
        y += step * math.sin(theta)
        true_pose = Pose2(x, y, theta)
        if not scene.contains(x, y):
            raise PoseOutsideScene(f"trajectory leaves the scene at step {k}")

        omega = wrap_angle(theta - prev_theta) / trajectory.dt
        prev_theta = theta
        velocity = trajectory.speed * noise.velocity_scale
        if noise.velocity_quantum > 0:
            velocity = round(velocity / noise.velocity_quantum) * noise.velocity_quantum
        steering = math.atan2(omega * 2.7, max(trajectory.speed, 0.1))
        compass = wrap_angle(
            theta + noise.compass_bias + rng.normal(0.0, noise.compass_sigma)
            if noise.compass_sigma > 0
            else theta + noise.compass_bias
        )
        gyro = omega + noise.gyro_bias + (
            rng.normal(0.0, noise.gyro_sigma) if noise.gyro_sigma > 0 else 0.0
        )
        sample = MotionSample(t, velocity, steering, compass, gyro)
        scan = simulate_scan(scene, true_pose, noise.scan_sigma, rng=rng, sensor=sensor)
        scan.timestamp = t
        frames.append(DriveFrame(scan, sample, true_pose))
    return frames


def save_scene(scene: SceneSpec, path) -> None:
    doc = {
        "kind": scene.kind.value,
        "ground_z": scene.ground_z,
        "seed": scene.seed,
        "extent": list(scene.extent),
        "route": [[float(p[0]), float(p[1])] for p in scene.route],
        "walls": [
            {
                "height": w.height,
                "is_boundary": w.is_boundary,
                "nodes": [[float(x), float(y)] for x, y in w.nodes],
            }
            for w in scene.walls
        ],
    }
    with open(path, "w") as f:
        yaml.safe_dump(doc, f, sort_keys=False)


def load_scene(path) -> SceneSpec:
    with open(path) as f:
        doc = yaml.safe_load(f)
    walls = [
        Wall(np.array(w["nodes"]), w["height"], w.get("is_boundary", True))
        for w in doc["walls"]
    ]
    return SceneSpec(
        SceneKind(doc["kind"]),
        walls,
        doc["ground_z"],
        tuple(doc["extent"]),
        doc["seed"],
        [np.array(p) for p in doc["route"]],
    )
