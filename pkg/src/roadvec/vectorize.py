"""Virtual-scan vectorization of an occupancy mask into polylines.

A clockwise fan of rays is cast through the occupied-cell mask; per-ray
hits (first occupied cell) and misses (grid border) are clustered by ray
order and kind, connected into polylines, and simplified with
Ramer-Douglas-Peucker while preserving corners.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .geometry import BoundaryKind, Polyline, Pose2
from .grid_fusion import GridConfig
from . import raycast


class OriginOutsideGrid(ValueError):
    """Virtual-scan origin must lie inside the grid extent."""


class IntersectionKind(Enum):
    HIT = "hit"
    MISS = "miss"


@dataclass(frozen=True)
class RayIntersection:
    ray_id: int
    point: np.ndarray  # metric, grid frame
    kind: IntersectionKind


@dataclass
class VirtualScan:
    origin: np.ndarray
    angular_resolution: float
    max_range: float
    rays: list[tuple[int, float]] = field(default_factory=list)  # (id, direction)


@dataclass
class LVM:
    """Local vectorization map: the polylines extracted from one LGM."""

    polylines: list[Polyline]
    source_pose: Pose2 = field(default_factory=Pose2)
    simplified: bool = False

    def road_polylines(self) -> list[Polyline]:
        return [p for p in self.polylines if p.kind is BoundaryKind.ROAD]


def make_virtual_scan(origin, angular_resolution: float, max_range: float) -> VirtualScan:
    n = int(round(2.0 * math.pi / angular_resolution))
    rays = [(i, -i * (2.0 * math.pi / n)) for i in range(n)]  # ids increase clockwise
    return VirtualScan(np.asarray(origin, dtype=float), 2.0 * math.pi / n, max_range, rays)


def cast_virtual_scan(
    mask: np.ndarray,
    config: GridConfig,
    origin,
    angular_resolution: float = math.radians(0.5),
) -> list[RayIntersection]:
    """One intersection per ray: first occupied cell (hit) or grid border (miss).

    Hit points are placed at the ray's entry-face intersection with the
    occupied cell, which keeps sub-cell accuracy for matching.
    """
    origin = np.asarray(origin, dtype=float)
    u0 = config.to_units(origin)
    if not (0 < u0[0] < config.rows and 0 < u0[1] < config.cols):
        raise OriginOutsideGrid(f"origin {origin} outside grid extent")
    n = int(round(2.0 * math.pi / angular_resolution))
    step = 2.0 * math.pi / n
    out = []
    for i in range(n):
        ang = -i * step
        tr = raycast.trace_ray(mask, u0, np.array([math.cos(ang), math.sin(ang)]))
        point = config.units_to_metric(tr.end_point)
        kind = IntersectionKind.HIT if tr.hit else IntersectionKind.MISS
        out.append(RayIntersection(i, point, kind))
    return out


def cluster_candidates(
    intersections: list[RayIntersection], gap_threshold: float = 1.0
) -> list[list[RayIntersection]]:
    """Group consecutive intersections of the same kind with small gaps.

    Consecutive (by ray id) intersections stay together iff they share a
    kind and their Euclidean gap is at most gap_threshold; the wrap from
    the last ray back to the first is honored.
    """
    if not intersections:
        return []
    clusters: list[list[RayIntersection]] = [[intersections[0]]]
    for cur in intersections[1:]:
        prev = clusters[-1][-1]
        if cur.kind is prev.kind and np.linalg.norm(cur.point - prev.point) <= gap_threshold:
            clusters[-1].append(cur)
        else:
            clusters.append([cur])
    if len(clusters) > 1:
        first, last = clusters[0], clusters[-1]
        gap = np.linalg.norm(first[0].point - last[-1].point)
        if first[0].kind is last[-1].kind and gap <= gap_threshold:
            clusters[0] = last + first
            clusters.pop()
    return clusters


def build_polylines(clusters: list[list[RayIntersection]], source_pose: Pose2 = Pose2()) -> LVM:
    """Connect each cluster's ordered points into a polyline.

    Hit clusters become road boundaries, miss clusters infinite
    boundaries; single-point clusters cannot form a polyline and are
    dropped.
    """
    polylines = []
    for cluster in clusters:
        pts = [cluster[0].point]
        for inter in cluster[1:]:
            if np.linalg.norm(inter.point - pts[-1]) > 1e-9:
                pts.append(inter.point)
        if len(pts) < 2:
            continue
        kind = BoundaryKind.ROAD if cluster[0].kind is IntersectionKind.HIT else BoundaryKind.INFINITE
        polylines.append(Polyline(np.array(pts), kind))
    return LVM(polylines, source_pose=source_pose, simplified=False)


def rdp(nodes: np.ndarray, epsilon: float) -> np.ndarray:
    """Ramer-Douglas-Peucker on an (N, 2) node chain; endpoints kept."""
    n = len(nodes)
    keep = np.zeros(n, dtype=bool)
    keep[0] = keep[-1] = True
    stack = [(0, n - 1)]
    while stack:
        lo, hi = stack.pop()
        if hi - lo < 2:
            continue
        a, b = nodes[lo], nodes[hi]
        d = b - a
        norm = np.linalg.norm(d)
        if norm < 1e-12:
            dev = np.linalg.norm(nodes[lo + 1 : hi] - a, axis=1)
        else:
            rel = nodes[lo + 1 : hi] - a
            dev = np.abs(d[0] * rel[:, 1] - d[1] * rel[:, 0]) / norm
        k = int(np.argmax(dev))
        if dev[k] > epsilon:
            mid = lo + 1 + k
            keep[mid] = True
            stack.append((lo, mid))
            stack.append((mid, hi))
    return nodes[keep]


def simplify_rdp(lvm: LVM, epsilon: float = 0.15) -> LVM:
    """Simplify every polyline with RDP at tolerance epsilon."""
    out = []
    for line in lvm.polylines:
        simplified = rdp(line.nodes, epsilon)
        if len(simplified) >= 2:
            out.append(Polyline(simplified, line.kind))
    return LVM(out, source_pose=lvm.source_pose, simplified=True)


def vectorize_mask(
    mask: np.ndarray,
    config: GridConfig,
    source_pose: Pose2 = Pose2(),
    angular_resolution: float = math.radians(0.5),
    gap_threshold: float = 1.0,
    epsilon: float | None = 0.15,
) -> LVM:
    """Full mask-to-LVM pipeline from the vehicle anchor cell."""
    inters = cast_virtual_scan(mask, config, np.zeros(2), angular_resolution)
    lvm = build_polylines(cluster_candidates(inters, gap_threshold), source_pose)
    if epsilon is not None:
        lvm = simplify_rdp(lvm, epsilon)
    return lvm


def save_lvm(lvm: LVM, path) -> None:
    """Diff-friendly text format; also the pipeline's final vector-map format."""
    with open(path, "w") as f:
        f.write("# lvm v1\n")
        f.write(f"pose {lvm.source_pose.x:.6f} {lvm.source_pose.y:.6f} {lvm.source_pose.theta:.9f}\n")
        f.write(f"simplified {'true' if lvm.simplified else 'false'}\n")
        for line in lvm.polylines:
            f.write(f"polyline {line.kind.value} {len(line.nodes)}\n")
            for x, y in line.nodes:
                f.write(f"{x:.6f} {y:.6f}\n")


def load_lvm(path) -> LVM:
    with open(path) as f:
        lines = [ln.strip() for ln in f if ln.strip() and not ln.startswith("#")]
    if not lines or not lines[0].startswith("pose "):
        raise ValueError("not an LVM file")
    _, x, y, theta = lines[0].split()
    pose = Pose2(float(x), float(y), float(theta))
    simplified = lines[1].split()[1] == "true"
    polylines = []
    i = 2
    while i < len(lines):
        tag, kind, count = lines[i].split()
        if tag != "polyline":
            raise ValueError(f"bad LVM record: {lines[i]!r}")
        n = int(count)
        nodes = np.array([[float(v) for v in lines[j].split()] for j in range(i + 1, i + 1 + n)])
        polylines.append(Polyline(nodes, BoundaryKind(kind)))
        i += 1 + n
    return LVM(polylines, source_pose=pose, simplified=simplified)
