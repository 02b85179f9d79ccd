"""Merging of registered, overlapping polylines into continuous runs.

After matching, successive local maps carry near-duplicate stretches of
the same boundary. Overlaps are detected with a distance buffer,
intersection points between the two polylines are found (synthesized at
overlap-endpoint projections for near-collinear runs, where exact
crossings may not exist), and the polylines are stitched by tracing
along nodes through the intersections.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import Polyline, points_to_segments


class KindMismatch(ValueError):
    """Only polylines of the same boundary kind can be concatenated."""


class NoIntersections(ValueError):
    """Nothing to stitch; caller should keep the polylines separate."""


@dataclass(frozen=True)
class Intersection:
    point: np.ndarray
    seg_a: int
    t_a: float  # parameter within segment seg_a
    seg_b: int
    t_b: float
    arc_a: float  # arc length along a at the intersection
    arc_b: float


def find_overlaps(a: Polyline, b: Polyline, buffer: float = 0.5):
    """Do the polylines run within `buffer` of each other anywhere?

    Returns (overlap, range_a, range_b): the index ranges of nodes of
    each polyline that lie within buffer of the other (None when empty).
    """
    da, _ = points_to_segments(a.nodes, b.nodes[:-1], b.nodes[1:])
    db, _ = points_to_segments(b.nodes, a.nodes[:-1], a.nodes[1:])
    near_a = np.flatnonzero(da.min(axis=1) <= buffer)
    near_b = np.flatnonzero(db.min(axis=1) <= buffer)
    overlap = len(near_a) > 0 or len(near_b) > 0
    range_a = (int(near_a[0]), int(near_a[-1])) if len(near_a) else None
    range_b = (int(near_b[0]), int(near_b[-1])) if len(near_b) else None
    return overlap, range_a, range_b


def _cross2(a, b) -> float:
    """Scalar z-component of the 2D cross product."""
    return float(a[0] * b[1] - a[1] * b[0])


def _segment_intersection(p1, p2, p3, p4, eps=1e-12):
    """Exact intersection of segments [p1,p2] and [p3,p4].

    Returns a list of (point, t_on_first, t_on_second); collinear
    overlapping segments contribute both overlap endpoints.
    """
    d1 = p2 - p1
    d2 = p4 - p3
    denom = _cross2(d1, d2)
    diff = p3 - p1
    if abs(denom) > eps:
        t = _cross2(diff, d2) / denom
        u = _cross2(diff, d1) / denom
        if -eps <= t <= 1 + eps and -eps <= u <= 1 + eps:
            t = min(1.0, max(0.0, t))
            u = min(1.0, max(0.0, u))
            return [(p1 + t * d1, t, u)]
        return []
    # parallel: collinear check
    if abs(_cross2(diff, d1)) > eps * max(1.0, float(np.linalg.norm(d1))):
        return []
    len1_sq = float(np.dot(d1, d1))
    u3 = float(np.dot(p3 - p1, d1)) / len1_sq
    u4 = float(np.dot(p4 - p1, d1)) / len1_sq
    lo, hi = min(u3, u4), max(u3, u4)
    lo_c, hi_c = max(0.0, lo), min(1.0, hi)
    if lo_c > hi_c + eps:
        return []
    out = []
    len2_sq = float(np.dot(d2, d2))
    for t in {lo_c, hi_c}:
        point = p1 + t * d1
        u = float(np.dot(point - p3, d2)) / len2_sq
        out.append((point, t, min(1.0, max(0.0, u))))
    return out


def intersect_polylines(a: Polyline, b: Polyline) -> list[Intersection]:
    """All exact intersection points, ordered by arc length along a."""
    arcs_a = a.arc_lengths()
    arcs_b = b.arc_lengths()
    found = []
    for i in range(a.n_segments):
        p1, p2 = a.segment(i)
        for j in range(b.n_segments):
            p3, p4 = b.segment(j)
            for point, t, u in _segment_intersection(p1, p2, p3, p4):
                arc_a = arcs_a[i] + t * (arcs_a[i + 1] - arcs_a[i])
                arc_b = arcs_b[j] + u * (arcs_b[j + 1] - arcs_b[j])
                found.append(Intersection(point, i, t, j, u, float(arc_a), float(arc_b)))
    found.sort(key=lambda x: x.arc_a)
    # collinear pairs sharing a node produce duplicates; keep one per arc position
    out = []
    for inter in found:
        if out and abs(inter.arc_a - out[-1].arc_a) < 1e-7:
            continue
        out.append(inter)
    return out


def _project(poly: Polyline, point: np.ndarray):
    """Nearest point on poly: (distance, seg index, t, arc length)."""
    dist, t = points_to_segments(point[None, :], poly.nodes[:-1], poly.nodes[1:])
    s = int(np.argmin(dist[0]))
    arcs = poly.arc_lengths()
    arc = float(arcs[s] + t[0, s] * (arcs[s + 1] - arcs[s]))
    return float(dist[0, s]), s, float(t[0, s]), arc


def overlap_intersections(a: Polyline, b: Polyline, buffer: float = 0.5) -> list[Intersection]:
    """Exact intersections plus synthesized ones for near-collinear overlaps.

    Registered duplicate boundaries rarely cross transversally, so the
    endpoints of each polyline's overlap interval are projected onto the
    other polyline and added as intersections.
    """
    inters = intersect_polylines(a, b)
    _, range_a, range_b = find_overlaps(a, b, buffer)
    arcs_a = a.arc_lengths()
    arcs_b = b.arc_lengths()

    extra = []
    if range_a is not None:
        for idx in {range_a[0], range_a[1]}:
            node = a.nodes[idx]
            dist, seg_b, t_b, arc_b = _project(b, node)
            if dist <= buffer:
                seg_a = min(idx, a.n_segments - 1)
                t_a = 0.0 if idx < a.n_segments else 1.0
                extra.append(Intersection(b.nodes[seg_b] + t_b * (b.nodes[seg_b + 1] - b.nodes[seg_b]),
                                          seg_a, t_a, seg_b, t_b, float(arcs_a[idx]), arc_b))
    if range_b is not None:
        for idx in {range_b[0], range_b[1]}:
            node = b.nodes[idx]
            dist, seg_a, t_a, arc_a = _project(a, node)
            if dist <= buffer:
                seg_b = min(idx, b.n_segments - 1)
                t_b = 0.0 if idx < b.n_segments else 1.0
                point = a.nodes[seg_a] + t_a * (a.nodes[seg_a + 1] - a.nodes[seg_a])
                extra.append(Intersection(point, seg_a, t_a, seg_b, t_b, arc_a, float(arcs_b[idx])))

    merged = list(inters)
    for cand in sorted(extra, key=lambda x: x.arc_a):
        if any(abs(cand.arc_a - k.arc_a) < 0.05 for k in merged):
            continue
        merged.append(cand)
    merged.sort(key=lambda x: x.arc_a)
    return merged


def _nodes_between(poly: Polyline, arc_lo: float, arc_hi: float) -> np.ndarray:
    arcs = poly.arc_lengths()
    keep = (arcs > arc_lo + 1e-9) & (arcs < arc_hi - 1e-9)
    return poly.nodes[keep]


def concatenate(a: Polyline, b: Polyline, intersections: list[Intersection]) -> Polyline:
    """Stitch two overlapping polylines into one continuous polyline.

    Trace from whichever polyline extends furthest behind the first
    intersection, switch polylines at each intersection, and finish along
    whichever extends furthest past the last one. Node order within each
    polyline is preserved.
    """
    if a.kind is not b.kind:
        raise KindMismatch(f"{a.kind} vs {b.kind}")
    if not intersections:
        raise NoIntersections("no intersection points to stitch at")

    inters = sorted(intersections, key=lambda x: x.arc_a)
    # orient b so both polylines advance together through the intersections
    if len(inters) >= 2 and inters[-1].arc_b < inters[0].arc_b:
        len_b = b.length()
        b = b.reversed()
        inters = [
            Intersection(i.point, i.seg_a, i.t_a, b.n_segments - 1 - i.seg_b,
                         1.0 - i.t_b, i.arc_a, len_b - i.arc_b)
            for i in inters
        ]

    arcs = {True: [i.arc_a for i in inters], False: [i.arc_b for i in inters]}
    m = len(inters)

    on_a = arcs[True][0] >= arcs[False][0]  # longer back extension wins
    poly = {True: a, False: b}
    nodes = [_nodes_between(poly[on_a], -math.inf, arcs[on_a][0])]

    for k in range(m):
        nodes.append(inters[k].point[None, :])
        if k < m - 1:
            on_a = not on_a
            nodes.append(_nodes_between(poly[on_a], arcs[on_a][k], arcs[on_a][k + 1]))
    rem_a = a.length() - arcs[True][-1]
    rem_b = b.length() - arcs[False][-1]
    if abs(rem_a - rem_b) < 1e-9:
        on_a = len(a) >= len(b)
    else:
        on_a = rem_a > rem_b
    nodes.append(_nodes_between(poly[on_a], arcs[on_a][-1], math.inf))

    stacked = np.vstack([n for n in nodes if len(n)])
    keep = [0]
    for i in range(1, len(stacked)):
        if np.linalg.norm(stacked[i] - stacked[keep[-1]]) > 1e-9:
            keep.append(i)
    return Polyline(stacked[keep], a.kind)


def _boxes_apart(a: Polyline, b: Polyline, buffer: float) -> bool:
    lo_a, hi_a = a.nodes.min(axis=0), a.nodes.max(axis=0)
    lo_b, hi_b = b.nodes.min(axis=0), b.nodes.max(axis=0)
    return bool(np.any(lo_a - buffer > hi_b) or np.any(lo_b - buffer > hi_a))


def merge_polylines(existing: list[Polyline], new: list[Polyline], buffer: float = 0.5) -> list[Polyline]:
    """Fold new polylines into a map, concatenating wherever they overlap."""
    result = list(existing)
    for line in new:
        merged = line
        changed = True
        while changed:
            changed = False
            for i, other in enumerate(result):
                if other.kind is not merged.kind:
                    continue
                if _boxes_apart(merged, other, buffer):
                    continue
                overlap, _, _ = find_overlaps(merged, other, buffer)
                if not overlap:
                    continue
                inters = overlap_intersections(merged, other, buffer)
                if not inters:
                    continue
                merged = concatenate(merged, other, inters)
                result.pop(i)
                changed = True
                break
        result.append(merged)
    return result
