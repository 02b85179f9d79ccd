"""Occupancy-grid projection, ground elimination and multi-frame fusion.

A scan is binned into a vehicle-anchored 2D grid with per-cell height
statistics, ground is removed with a local lowest-z statistic, obstacle
cells are kept, and successive frames are fused into a local grid map
(LGM) by additive log-odds updates.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import Pose2
from . import raycast


class EmptyFrame(ValueError):
    """Scan frame contains zero points."""


class PoseOutOfBounds(ValueError):
    """Transformed frame has no overlap with the LGM extent."""


@dataclass
class ScanFrame:
    """One timestamped 3D point cloud in the vehicle frame."""

    points: np.ndarray  # (N, 3)
    timestamp: float = 0.0
    pose: Pose2 = field(default_factory=Pose2)  # dead-reckoned pose of the vehicle

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)


@dataclass
class GridConfig:
    rows: int = 401
    cols: int = 151
    resolution: float = 0.2
    anchor_row: int = 100  # vehicle cell; grid reaches further ahead than behind
    anchor_col: int = 75
    upsample_factor: int = 2
    m_lowest: int = 5
    obstacle_height_delta: float = 0.15
    vehicle_span: tuple[float, float] = (0.1, 2.0)
    logodds_hit: float = 0.85
    logodds_miss: float = -0.4
    logodds_clamp: float = 10.0
    occupancy_threshold: float = 0.65
    keep_point_refs: bool = True
    use_miss: bool = True
    preprocess_rays: int = 360  # virtual-scan fan used before fusion

    def __post_init__(self):
        if self.rows <= 0 or self.cols <= 0 or self.resolution <= 0:
            raise ValueError("grid dimensions and resolution must be positive")
        if not 0.0 < self.occupancy_threshold < 1.0:
            raise ValueError("occupancy_threshold must be in (0, 1)")
        if not (self.logodds_hit > 0.0 > self.logodds_miss):
            raise ValueError("need logodds_hit > 0 > logodds_miss")
        if self.upsample_factor < 1 or self.m_lowest < 1:
            raise ValueError("upsample_factor and m_lowest must be >= 1")

    # Cell (r, c) is centered at ((r - anchor_row) * res, (c - anchor_col) * res)
    # in the vehicle frame; the vehicle sits at the anchor cell center.

    def to_cells(self, xy: np.ndarray) -> np.ndarray:
        """Metric (N, 2) points to integer (N, 2) cell indices (may be out of range)."""
        u = np.asarray(xy, dtype=float) / self.resolution
        rc = np.floor(u + np.array([self.anchor_row + 0.5, self.anchor_col + 0.5]))
        return rc.astype(int)

    def cell_centers(self, rc: np.ndarray) -> np.ndarray:
        """Integer (N, 2) cell indices to metric cell-center coordinates."""
        rc = np.asarray(rc, dtype=float)
        return (rc - np.array([self.anchor_row, self.anchor_col])) * self.resolution

    def in_bounds(self, rc: np.ndarray) -> np.ndarray:
        rc = np.asarray(rc)
        return (
            (rc[..., 0] >= 0)
            & (rc[..., 0] < self.rows)
            & (rc[..., 1] >= 0)
            & (rc[..., 1] < self.cols)
        )

    def to_units(self, xy: np.ndarray) -> np.ndarray:
        """Metric point to grid units (for ray traversal)."""
        u = np.asarray(xy, dtype=float) / self.resolution
        return u + np.array([self.anchor_row + 0.5, self.anchor_col + 0.5])

    def units_to_metric(self, u: np.ndarray) -> np.ndarray:
        return (np.asarray(u, dtype=float) - np.array([self.anchor_row + 0.5, self.anchor_col + 0.5])) * self.resolution


@dataclass
class GridCell:
    """Read-only view of one grid cell's fused state."""

    log_odds: float
    z_min: float
    z_max: float
    z_delta: float
    point_refs: np.ndarray | None = None


@dataclass
class OccupancyGrid:
    config: GridConfig
    log_odds: np.ndarray = None
    z_min: np.ndarray = None
    z_max: np.ndarray = None
    counts: np.ndarray = None
    frame_count: int = 0
    # per-point data of the source frame (ground elimination needs it)
    point_cells: np.ndarray | None = None  # (N,) flat cell index, -1 if outside
    point_z: np.ndarray | None = None

    def __post_init__(self):
        shape = (self.config.rows, self.config.cols)
        if self.log_odds is None:
            self.log_odds = np.zeros(shape)
        if self.z_min is None:
            self.z_min = np.full(shape, np.inf)
        if self.z_max is None:
            self.z_max = np.full(shape, -np.inf)
        if self.counts is None:
            self.counts = np.zeros(shape, dtype=int)

    @property
    def z_delta(self) -> np.ndarray:
        d = self.z_max - self.z_min
        d[self.counts == 0] = 0.0
        return d

    def occupancy(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.log_odds))

    def cell(self, r: int, c: int) -> GridCell:
        refs = None
        if self.point_cells is not None:
            refs = np.flatnonzero(self.point_cells == r * self.config.cols + c)
        if self.counts[r, c] == 0:
            return GridCell(float(self.log_odds[r, c]), math.nan, math.nan, 0.0, refs)
        return GridCell(
            float(self.log_odds[r, c]),
            float(self.z_min[r, c]),
            float(self.z_max[r, c]),
            float(self.z_max[r, c] - self.z_min[r, c]),
            refs,
        )


def project_scan(frame: ScanFrame, config: GridConfig) -> OccupancyGrid:
    """Bin a 3D scan into a fresh single-frame grid with height statistics."""
    if len(frame.points) == 0:
        raise EmptyFrame("scan frame has no points")
    grid = OccupancyGrid(config)
    rc = config.to_cells(frame.points[:, :2])
    inside = config.in_bounds(rc)
    flat = np.where(inside, rc[:, 0] * config.cols + rc[:, 1], -1)
    z = frame.points[:, 2]

    valid = flat >= 0
    if valid.any():
        idx = flat[valid]
        n = config.rows * config.cols
        grid.counts = np.bincount(idx, minlength=n).reshape(config.rows, config.cols)
        zmin = np.full(n, np.inf)
        np.minimum.at(zmin, idx, z[valid])
        zmax = np.full(n, -np.inf)
        np.maximum.at(zmax, idx, z[valid])
        grid.z_min = zmin.reshape(config.rows, config.cols)
        grid.z_max = zmax.reshape(config.rows, config.cols)
    if config.keep_point_refs:
        grid.point_cells = flat
        grid.point_z = z.copy()
    grid.frame_count = 1
    return grid


def _block_index(flat_cells: np.ndarray, config: GridConfig) -> np.ndarray:
    """Flat cell index to flat coarse-block index (upsample_factor^2 cells per block)."""
    f = config.upsample_factor
    r = flat_cells // config.cols
    c = flat_cells % config.cols
    n_bc = (config.cols + f - 1) // f
    return (r // f) * n_bc + (c // f)


def _block_ground(grid: OccupancyGrid) -> tuple[np.ndarray, np.ndarray]:
    """Per-point coarse-block id and per-block ground height.

    Ground height of a block is the mean of the m_lowest smallest z values
    of the points that fall inside it (all points if fewer).
    """
    config = grid.config
    inside = grid.point_cells >= 0
    blocks = np.full(len(grid.point_cells), -1)
    blocks[inside] = _block_index(grid.point_cells[inside], config)

    f = config.upsample_factor
    n_blocks = ((config.rows + f - 1) // f) * ((config.cols + f - 1) // f)
    z = grid.point_z

    order = np.lexsort((z[inside], blocks[inside]))
    b_sorted = blocks[inside][order]
    z_sorted = z[inside][order]
    starts = np.searchsorted(b_sorted, np.arange(n_blocks))
    rank = np.arange(len(b_sorted)) - starts[b_sorted]
    low = rank < config.m_lowest
    sums = np.bincount(b_sorted[low], weights=z_sorted[low], minlength=n_blocks)
    nums = np.bincount(b_sorted[low], minlength=n_blocks)
    ground = np.full(n_blocks, np.inf)
    nonzero = nums > 0
    ground[nonzero] = sums[nonzero] / nums[nonzero]
    return blocks, ground


def eliminate_ground(grid: OccupancyGrid) -> np.ndarray:
    """Label each frame point as obstacle (True) or ground (False).

    A point is an obstacle when it rises more than obstacle_height_delta
    above its coarse block's ground height.
    """
    if grid.point_cells is None:
        raise ValueError("ground elimination needs point refs (keep_point_refs)")
    blocks, ground = _block_ground(grid)
    labels = np.zeros(len(grid.point_cells), dtype=bool)
    inside = blocks >= 0
    labels[inside] = grid.point_z[inside] > ground[blocks[inside]] + grid.config.obstacle_height_delta
    return labels


def mark_obstacles(grid: OccupancyGrid, labels: np.ndarray) -> np.ndarray:
    """Obstacle mask at original resolution.

    A cell is marked when it holds at least one obstacle point within the
    vehicle's vertical span above the local ground height.
    """
    config = grid.config
    mask = np.zeros((config.rows, config.cols), dtype=bool)
    if grid.point_cells is None or not labels.any():
        return mask
    blocks, ground = _block_ground(grid)
    z_low, z_high = config.vehicle_span
    cand = labels & (blocks >= 0)
    g = ground[blocks[cand]]
    z = grid.point_z[cand]
    in_span = (z >= g + z_low) & (z <= g + z_high)
    cells = grid.point_cells[cand][in_span]
    if len(cells):
        flat = np.zeros(config.rows * config.cols, dtype=bool)
        flat[cells] = True
        mask = flat.reshape(config.rows, config.cols)
    return mask


def preprocess_boundary(mask: np.ndarray, config: GridConfig):
    """Virtual-scan preprocessing of a single-frame obstacle mask.

    Keeps only the first occupied cell along each ray from the vehicle
    anchor (obstacles behind the nearest boundary are dropped) and reports
    the free cells the rays crossed. Runs before fusion.
    """
    origin = config.to_units(np.zeros(2))
    traces, _ = raycast.sweep(mask, origin, config.preprocess_rays)
    boundary = np.zeros_like(mask)
    free = np.zeros_like(mask)
    for tr in traces:
        # the free run stops one cell short of a hit so grazing rays do not
        # erode the staircase neighbors of boundary cells
        cells = tr.free_cells[:-1] if tr.hit else tr.free_cells
        if len(cells):
            free[cells[:, 0], cells[:, 1]] = True
        if tr.hit:
            boundary[tr.hit_cell] = True
    free &= ~boundary
    return boundary, free


def fuse_frame(
    lgm: OccupancyGrid,
    mask: np.ndarray,
    pose: Pose2,
    free_mask: np.ndarray | None = None,
) -> OccupancyGrid:
    """Fuse one frame's obstacle mask into the LGM by log-odds updates.

    pose maps the frame grid into the LGM frame. Masked cells get a hit
    update; cells of free_mask (virtual-scan crossed cells) get a miss
    update when the config enables misses. Updates clamp at +-logodds_clamp.
    """
    config = lgm.config
    touched = 0

    def _update(cells_mask: np.ndarray, delta: float):
        nonlocal touched
        rc = np.argwhere(cells_mask)
        if len(rc) == 0:
            return
        pts = pose.apply(config.cell_centers(rc))
        dest = config.to_cells(pts)
        ok = config.in_bounds(dest)
        dest = dest[ok]
        touched += len(dest)
        if len(dest):
            np.add.at(lgm.log_odds, (dest[:, 0], dest[:, 1]), delta)

    _update(mask, config.logodds_hit)
    if config.use_miss and free_mask is not None:
        _update(free_mask, config.logodds_miss)
    if touched == 0:
        raise PoseOutOfBounds("frame has no overlap with the LGM extent")
    np.clip(lgm.log_odds, -config.logodds_clamp, config.logodds_clamp, out=lgm.log_odds)
    lgm.frame_count += 1
    return lgm


def occupied_cells(lgm: OccupancyGrid) -> np.ndarray:
    """Cells whose occupancy probability exceeds the configured threshold."""
    return lgm.occupancy() > lgm.config.occupancy_threshold


_MAGIC = b"LGM1\n"


def save_lgm(lgm: OccupancyGrid, path) -> None:
    """Bit-exact binary snapshot: JSON config header + raw float64 planes."""
    cfg = lgm.config
    header = {
        "rows": cfg.rows,
        "cols": cfg.cols,
        "resolution": cfg.resolution,
        "anchor_row": cfg.anchor_row,
        "anchor_col": cfg.anchor_col,
        "upsample_factor": cfg.upsample_factor,
        "m_lowest": cfg.m_lowest,
        "obstacle_height_delta": cfg.obstacle_height_delta,
        "vehicle_span": list(cfg.vehicle_span),
        "logodds_hit": cfg.logodds_hit,
        "logodds_miss": cfg.logodds_miss,
        "logodds_clamp": cfg.logodds_clamp,
        "occupancy_threshold": cfg.occupancy_threshold,
        "use_miss": cfg.use_miss,
        "preprocess_rays": cfg.preprocess_rays,
        "frame_count": lgm.frame_count,
    }
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write((json.dumps(header, sort_keys=True) + "\n").encode())
        for plane in (lgm.log_odds, lgm.z_min, lgm.z_max):
            f.write(np.ascontiguousarray(plane, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(lgm.counts, dtype="<i8").tobytes())


def load_lgm(path) -> OccupancyGrid:
    with open(path, "rb") as f:
        if f.read(len(_MAGIC)) != _MAGIC:
            raise ValueError("not an LGM snapshot")
        header = json.loads(f.readline().decode())
        frame_count = header.pop("frame_count")
        header["vehicle_span"] = tuple(header["vehicle_span"])
        cfg = GridConfig(**header)
        n = cfg.rows * cfg.cols
        planes = [
            np.frombuffer(f.read(8 * n), dtype="<f8").reshape(cfg.rows, cfg.cols).copy()
            for _ in range(3)
        ]
        counts = np.frombuffer(f.read(8 * n), dtype="<i8").reshape(cfg.rows, cfg.cols).copy()
    return OccupancyGrid(
        cfg,
        log_odds=planes[0],
        z_min=planes[1],
        z_max=planes[2],
        counts=counts.astype(int),
        frame_count=frame_count,
    )
