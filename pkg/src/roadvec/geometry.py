"""Planar rigid-body poses and polyline primitives.

Everything downstream (grid projection, vectorization, matching, graph
optimization) works in SE(2); these are the shared value types.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np


class DegenerateSegment(ValueError):
    """Segment endpoints closer than the degeneracy tolerance."""


def wrap_angle(theta: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    t = math.fmod(theta, 2.0 * math.pi)
    if t > math.pi:
        t -= 2.0 * math.pi
    elif t <= -math.pi:
        t += 2.0 * math.pi
    return t


@dataclass(frozen=True)
class Pose2:
    """SE(2) pose: translation (x, y) in meters, heading theta in radians.

    theta is always stored wrapped to (-pi, pi].
    """

    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    def rotation(self) -> np.ndarray:
        c, s = math.cos(self.theta), math.sin(self.theta)
        return np.array([[c, -s], [s, c]])

    def translation(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform an (N, 2) array of points by this pose."""
        pts = np.asarray(points, dtype=float)
        return pts @ self.rotation().T + self.translation()

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta])


def se2_compose(a: Pose2, b: Pose2) -> Pose2:
    """Return a + b: b expressed in a's frame, mapped to the world frame of a."""
    ca, sa = math.cos(a.theta), math.sin(a.theta)
    return Pose2(
        a.x + ca * b.x - sa * b.y,
        a.y + sa * b.x + ca * b.y,
        wrap_angle(a.theta + b.theta),
    )


def se2_inverse(a: Pose2) -> Pose2:
    ca, sa = math.cos(a.theta), math.sin(a.theta)
    return Pose2(-ca * a.x - sa * a.y, sa * a.x - ca * a.y, wrap_angle(-a.theta))


def se2_relative(a: Pose2, b: Pose2) -> Pose2:
    """b expressed in a's frame: inverse(a) + b."""
    return se2_compose(se2_inverse(a), b)


class BoundaryKind(Enum):
    ROAD = "road_boundary"
    INFINITE = "infinite_boundary"


_MIN_NODE_SEPARATION = 1e-9


@dataclass
class Polyline:
    """Ordered run of 2D nodes; node order is traversal order.

    kind distinguishes physical road boundaries from the free-space
    (grid border) runs that delimit them.
    """

    nodes: np.ndarray
    kind: BoundaryKind = BoundaryKind.ROAD

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        if nodes.ndim != 2 or nodes.shape[1] != 2 or nodes.shape[0] < 2:
            raise ValueError("polyline needs an (N>=2, 2) node array")
        if not np.all(np.isfinite(nodes)):
            raise ValueError("polyline nodes must be finite")
        gaps = np.linalg.norm(np.diff(nodes, axis=0), axis=1)
        if np.any(gaps <= _MIN_NODE_SEPARATION):
            raise ValueError("consecutive polyline nodes coincide")
        self.nodes = nodes

    def __len__(self) -> int:
        return len(self.nodes)

    def segment(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        return self.nodes[i], self.nodes[i + 1]

    @property
    def n_segments(self) -> int:
        return len(self.nodes) - 1

    def arc_lengths(self) -> np.ndarray:
        """Cumulative arc length at each node, starting at 0."""
        gaps = np.linalg.norm(np.diff(self.nodes, axis=0), axis=1)
        return np.concatenate([[0.0], np.cumsum(gaps)])

    def length(self) -> float:
        return float(np.sum(np.linalg.norm(np.diff(self.nodes, axis=0), axis=1)))

    def reversed(self) -> "Polyline":
        return Polyline(self.nodes[::-1].copy(), self.kind)


def point_to_segment(p, a, b):
    """Distance from point p to closed segment [a, b].

    Returns (distance, foot, normal). normal is the unit perpendicular of
    b - a, signed so normal . (p - foot) >= 0 when the foot is interior.
    """
    p = np.asarray(p, dtype=float)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    d = b - a
    seg_len = float(np.linalg.norm(d))
    if seg_len < 1e-9:
        raise DegenerateSegment("segment endpoints coincide")
    t = float(np.dot(p - a, d)) / (seg_len * seg_len)
    t_clamped = min(1.0, max(0.0, t))
    foot = a + t_clamped * d
    dist = float(np.linalg.norm(p - foot))
    normal = np.array([-d[1], d[0]]) / seg_len
    if float(np.dot(normal, p - foot)) < 0.0:
        normal = -normal
    return dist, foot, normal


def points_to_segments(points: np.ndarray, starts: np.ndarray, ends: np.ndarray):
    """Clamped distances from each point to each segment, vectorized.

    points: (N, 2); starts/ends: (S, 2). Returns (dist, t) with shapes
    (N, S): Euclidean distance to the closed segment and the clamped
    projection parameter.
    """
    p = np.asarray(points, dtype=float)[:, None, :]
    a = np.asarray(starts, dtype=float)[None, :, :]
    d = np.asarray(ends, dtype=float)[None, :, :] - a
    seg_len2 = np.sum(d * d, axis=2)
    t = np.clip(np.sum((p - a) * d, axis=2) / seg_len2, 0.0, 1.0)
    foot = a + t[:, :, None] * d
    dist = np.linalg.norm(p - foot, axis=2)
    return dist, t


def transform_polyline(pose: Pose2, line: Polyline) -> Polyline:
    """Rigidly transform every node; kind and node count are preserved."""
    return Polyline(pose.apply(line.nodes), line.kind)


def polyline_hausdorff(a: Polyline, b: Polyline, step: float = 0.05) -> float:
    """Symmetric Hausdorff distance between two polylines.

    Both polylines are densely resampled at `step` spacing, so the result
    is exact only up to the sampling density; good enough for map checks.
    """
    sa = densify(a.nodes, step)
    sb = densify(b.nodes, step)
    da, _ = points_to_segments(sa, b.nodes[:-1], b.nodes[1:])
    db, _ = points_to_segments(sb, a.nodes[:-1], a.nodes[1:])
    return max(float(da.min(axis=1).max()), float(db.min(axis=1).max()))


def densify(nodes: np.ndarray, step: float) -> np.ndarray:
    """Resample a node chain so consecutive samples are at most `step` apart."""
    out = [nodes[:1]]
    for i in range(len(nodes) - 1):
        a, b = nodes[i], nodes[i + 1]
        n = max(1, int(math.ceil(np.linalg.norm(b - a) / step)))
        ts = np.linspace(0.0, 1.0, n + 1)[1:]
        out.append(a + ts[:, None] * (b - a))
    return np.vstack(out)
