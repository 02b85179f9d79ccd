"""Polyline-to-polyline registration (iterative closest line).

Each iteration matches source nodes to their nearest target segment,
then solves a small-angle linearized point-to-line least squares for the
SE(2) increment. Straight-only geometry leaves the along-line direction
unobservable; that rank deficiency is detected and flagged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import BoundaryKind, Pose2, points_to_segments, se2_compose
from .vectorize import LVM


class NoCorrespondences(ValueError):
    """No source node found a target segment within the rejection threshold."""


class SingularSystem(ValueError):
    """Normal-equation matrix is rank deficient (degenerate geometry)."""

    def __init__(self, msg, normal_matrix=None, rhs=None):
        super().__init__(msg)
        self.normal_matrix = normal_matrix
        self.rhs = rhs


class ZeroMotion(ValueError):
    """Relative error undefined for a near-zero ground-truth motion."""


@dataclass(frozen=True)
class Correspondence:
    source_node_index: tuple[int, int]  # (polyline, node)
    target_segment: tuple[int, int]  # (polyline, segment)
    normal: np.ndarray  # unit normal of the target segment
    signed_distance: float  # along normal, transformed source node to segment line
    point: np.ndarray  # source node after the current transform


@dataclass
class MatchParams:
    max_iterations: int = 50
    tol_xy: float = 1e-4
    tol_theta: float = 1e-5
    rejection_threshold: float = 1.0
    threshold_decay: float = 0.7
    threshold_floor: float = 0.3
    condition_bound: float = 1e6
    min_correspondences: int = 3


@dataclass
class MatchResult:
    transform: Pose2
    iterations: int
    mean_abs_residual: float
    rms_residual: float
    correspondence_count: int
    degenerate: bool
    converged: bool
    information_matrix: np.ndarray


def _segment_table(lvm: LVM):
    """Stack all road-boundary segments: (starts, ends, (poly, seg) index)."""
    starts, ends, index = [], [], []
    for pi, line in enumerate(lvm.polylines):
        if line.kind is not BoundaryKind.ROAD:
            continue
        starts.append(line.nodes[:-1])
        ends.append(line.nodes[1:])
        index.extend((pi, si) for si in range(line.n_segments))
    if not starts:
        return np.empty((0, 2)), np.empty((0, 2)), []
    return np.vstack(starts), np.vstack(ends), index


def _node_table(lvm: LVM):
    nodes, index = [], []
    for pi, line in enumerate(lvm.polylines):
        if line.kind is not BoundaryKind.ROAD:
            continue
        nodes.append(line.nodes)
        index.extend((pi, ni) for ni in range(len(line.nodes)))
    if not nodes:
        return np.empty((0, 2)), []
    return np.vstack(nodes), index


def find_correspondences(
    source: LVM, target: LVM, current: Pose2, rejection_threshold: float = 1.0
) -> list[Correspondence]:
    """Nearest target segment for every transformed source node.

    Candidate selection uses the clamped (closed-segment) distance so
    nodes are never matched past a polyline's end; the stored residual is
    the signed distance to the segment's infinite line.
    """
    src_nodes, src_index = _node_table(source)
    starts, ends, seg_index = _segment_table(target)
    if len(src_nodes) == 0 or len(starts) == 0:
        raise NoCorrespondences("no road-boundary geometry to match")

    p = current.apply(src_nodes)
    dist, t = points_to_segments(p, starts, ends)
    best = np.argmin(dist, axis=1)
    best_dist = dist[np.arange(len(p)), best]
    keep = best_dist <= rejection_threshold
    if not keep.any():
        raise NoCorrespondences("all candidate pairs beyond the rejection threshold")

    out = []
    for i in np.flatnonzero(keep):
        s = int(best[i])
        a, b = starts[s], ends[s]
        d = b - a
        normal = np.array([-d[1], d[0]]) / np.linalg.norm(d)
        foot = a + t[i, s] * d
        if float(np.dot(normal, p[i] - foot)) < 0.0:
            normal = -normal
        signed = float(np.dot(normal, p[i] - a))
        out.append(Correspondence(src_index[i], seg_index[s], normal, signed, p[i].copy()))
    return out


def _normal_equations(correspondences: list[Correspondence]):
    a = np.empty((len(correspondences), 3))
    b = np.empty(len(correspondences))
    for i, c in enumerate(correspondences):
        px, py = c.point
        a[i] = (c.normal[0], c.normal[1], c.normal[0] * (-py) + c.normal[1] * px)
        b[i] = -c.signed_distance
    return a.T @ a, a.T @ b


def solve_step(correspondences: list[Correspondence], condition_bound: float = 1e6) -> Pose2:
    """SE(2) increment minimizing the linearized point-to-line objective."""
    if len(correspondences) < 3:
        raise NoCorrespondences("need at least 3 correspondences for a step")
    h, g = _normal_equations(correspondences)
    if np.linalg.cond(h) > condition_bound:
        raise SingularSystem("degenerate matching geometry", normal_matrix=h, rhs=g)
    dx, dy, dtheta = np.linalg.solve(h, g)
    return Pose2(dx, dy, dtheta)


def _pinv_step(h: np.ndarray, g: np.ndarray, condition_bound: float) -> Pose2:
    # minimal-norm step in the observable subspace only
    dx, dy, dtheta = np.linalg.pinv(h, rcond=1.0 / condition_bound) @ g
    return Pose2(dx, dy, dtheta)


def icl_match(
    source: LVM, target: LVM, initial: Pose2 = Pose2(), params: MatchParams = MatchParams()
) -> MatchResult:
    """Iterate correspondence search and linearized solves until convergence.

    The rejection threshold tightens each iteration down to a floor.
    Degenerate geometry falls back to a pseudo-inverse step (observable
    directions only) and flags the result.
    """
    current = initial
    degenerate = False
    converged = False
    iterations = 0
    threshold = params.rejection_threshold

    for _ in range(params.max_iterations):
        corr = find_correspondences(source, target, current, threshold)
        if len(corr) < params.min_correspondences:
            raise NoCorrespondences(
                f"only {len(corr)} correspondences, need {params.min_correspondences}"
            )
        try:
            delta = solve_step(corr, params.condition_bound)
        except SingularSystem as exc:
            degenerate = True
            delta = _pinv_step(exc.normal_matrix, exc.rhs, params.condition_bound)
        current = se2_compose(delta, current)
        iterations += 1
        threshold = max(params.threshold_floor, threshold * params.threshold_decay)
        if math.hypot(delta.x, delta.y) < params.tol_xy and abs(delta.theta) < params.tol_theta:
            converged = True
            break

    corr = find_correspondences(source, target, current, threshold)
    residuals = np.array([c.signed_distance for c in corr])
    h, _ = _normal_equations(corr)
    if np.linalg.cond(h) > params.condition_bound:
        degenerate = True
    rms = float(np.sqrt(np.mean(residuals**2)))
    sigma2 = max(rms**2, 1e-8)
    return MatchResult(
        transform=current,
        iterations=iterations,
        mean_abs_residual=float(np.mean(np.abs(residuals))),
        rms_residual=rms,
        correspondence_count=len(corr),
        degenerate=degenerate,
        converged=converged,
        information_matrix=(h + h.T) / (2.0 * sigma2),
    )


def objective(source: LVM, target: LVM, pose: Pose2, rejection_threshold: float = 1.0) -> float:
    """Sum of squared point-to-line residuals at a given transform."""
    corr = find_correspondences(source, target, pose, rejection_threshold)
    return float(sum(c.signed_distance**2 for c in corr))


def match_error(result: MatchResult, ground_truth: Pose2) -> tuple[float, float]:
    """(absolute drift in meters, drift / ground-truth travel)."""
    magnitude = math.hypot(ground_truth.x, ground_truth.y)
    if magnitude < 1e-6:
        raise ZeroMotion("relative error undefined for near-zero motion")
    absolute = math.hypot(result.transform.x - ground_truth.x, result.transform.y - ground_truth.y)
    return absolute, absolute / magnitude


def save_match_result(result: MatchResult, path) -> None:
    tri = result.information_matrix[np.triu_indices(3)]
    with open(path, "w") as f:
        f.write("# match result v1\n")
        f.write(f"transform {result.transform.x:.9f} {result.transform.y:.9f} {result.transform.theta:.9f}\n")
        f.write(f"iterations {result.iterations}\n")
        f.write(f"mean_abs_residual {result.mean_abs_residual:.9f}\n")
        f.write(f"rms_residual {result.rms_residual:.9f}\n")
        f.write(f"correspondences {result.correspondence_count}\n")
        f.write(f"degenerate {'true' if result.degenerate else 'false'}\n")
        f.write(f"converged {'true' if result.converged else 'false'}\n")
        f.write("information " + " ".join(f"{v:.9e}" for v in tri) + "\n")


def load_match_result(path) -> MatchResult:
    vals = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, rest = line.split(None, 1)
            vals[key] = rest
    x, y, theta = (float(v) for v in vals["transform"].split())
    tri = [float(v) for v in vals["information"].split()]
    info = np.zeros((3, 3))
    info[np.triu_indices(3)] = tri
    info = info + np.triu(info, 1).T
    return MatchResult(
        transform=Pose2(x, y, theta),
        iterations=int(vals["iterations"]),
        mean_abs_residual=float(vals["mean_abs_residual"]),
        rms_residual=float(vals["rms_residual"]),
        correspondence_count=int(vals["correspondences"]),
        degenerate=vals["degenerate"] == "true",
        converged=vals["converged"] == "true",
        information_matrix=info,
    )
