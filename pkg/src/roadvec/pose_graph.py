"""Pose graph construction, loop closure and nonlinear least squares.

Nodes are SE(2) vehicle poses, edges are relative-pose measurements
(odometry or polyline matching) weighted by information matrices. The
solver is damped iteratively-relinearized least squares on the sparse
normal equations with node 0 held fixed as the gauge anchor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from .geometry import Pose2, se2_compose, se2_inverse, wrap_angle
from .matching import MatchParams, NoCorrespondences, icl_match
from .vectorize import LVM


class DisconnectedGraph(ValueError):
    """Optimization requires every node reachable from the anchor."""


class NonPositiveDefinite(ValueError):
    """Edge information matrices must be symmetric positive definite."""


class EdgeKind(Enum):
    ODOMETRY = "odometry"
    MATCHING = "matching"


@dataclass
class GraphNode:
    id: int
    pose: Pose2
    lvm_ref: str | None = None


@dataclass
class GraphEdge:
    from_id: int
    to_id: int
    measurement: Pose2
    information: np.ndarray
    kind: EdgeKind = EdgeKind.ODOMETRY

    def __post_init__(self):
        self.information = np.asarray(self.information, dtype=float)
        if self.from_id == self.to_id:
            raise ValueError("self edges are not allowed")


@dataclass
class LoopParams:
    radius: float = 10.0
    min_index_gap: int = 30
    error_threshold: float = 0.2  # mean absolute residual, meters
    min_correspondences: int = 20


@dataclass
class PoseGraph:
    nodes: list[GraphNode] = field(default_factory=list)
    edges: list[GraphEdge] = field(default_factory=list)
    lvms: dict[int, LVM] = field(default_factory=dict)

    def add_node(self, pose: Pose2, lvm: LVM | None = None) -> GraphNode:
        node = GraphNode(len(self.nodes), pose, lvm_ref=f"lvm_{len(self.nodes)}" if lvm else None)
        self.nodes.append(node)
        if lvm is not None:
            self.lvms[node.id] = lvm
        return node

    def add_edge(self, edge: GraphEdge) -> None:
        self.edges.append(edge)

    def poses(self) -> list[Pose2]:
        return [n.pose for n in self.nodes]


def residual(edge: GraphEdge, xi: Pose2, xj: Pose2) -> np.ndarray:
    """SE(2) error of the edge: inv(measurement) + (inv(xi) + xj)."""
    err = se2_compose(se2_inverse(edge.measurement), se2_compose(se2_inverse(xi), xj))
    return np.array([err.x, err.y, wrap_angle(err.theta)])


_J90 = np.array([[0.0, -1.0], [1.0, 0.0]])


def _edge_jacobians(edge: GraphEdge, xi: Pose2, xj: Pose2):
    """Analytic Jacobians of the residual w.r.t. xi and xj."""
    rz_t = edge.measurement.rotation().T
    ri_t = xi.rotation().T
    dt = xj.translation() - xi.translation()
    ji = np.zeros((3, 3))
    ji[:2, :2] = -rz_t @ ri_t
    ji[:2, 2] = rz_t @ (-_J90 @ ri_t) @ dt
    ji[2, 2] = -1.0
    jj = np.zeros((3, 3))
    jj[:2, :2] = rz_t @ ri_t
    jj[2, 2] = 1.0
    return ji, jj


def graph_objective(graph: PoseGraph, poses: list[Pose2] | None = None) -> float:
    poses = poses if poses is not None else graph.poses()
    total = 0.0
    for edge in graph.edges:
        e = residual(edge, poses[edge.from_id], poses[edge.to_id])
        total += float(e @ edge.information @ e)
    return total


def linearize(graph: PoseGraph, poses: list[Pose2] | None = None):
    """Sparse normal equations at the current estimate, anchor removed.

    Returns (H, b) over the free variables (all nodes except node 0),
    where the Gauss-Newton step solves H * delta = b.
    """
    poses = poses if poses is not None else graph.poses()
    n_free = len(poses) - 1
    rows, cols, vals = [], [], []
    b = np.zeros(3 * n_free)

    def var(node_id: int) -> int | None:
        return None if node_id == 0 else 3 * (node_id - 1)

    def add_block(r: int, c: int, block: np.ndarray):
        for i in range(3):
            for j in range(3):
                rows.append(r + i)
                cols.append(c + j)
                vals.append(block[i, j])

    for edge in graph.edges:
        e = residual(edge, poses[edge.from_id], poses[edge.to_id])
        ji, jj = _edge_jacobians(edge, poses[edge.from_id], poses[edge.to_id])
        omega = edge.information
        vi, vj = var(edge.from_id), var(edge.to_id)
        if vi is not None:
            add_block(vi, vi, ji.T @ omega @ ji)
            b[vi : vi + 3] -= ji.T @ omega @ e
        if vj is not None:
            add_block(vj, vj, jj.T @ omega @ jj)
            b[vj : vj + 3] -= jj.T @ omega @ e
        if vi is not None and vj is not None:
            add_block(vi, vj, ji.T @ omega @ jj)
            add_block(vj, vi, jj.T @ omega @ ji)

    h = sp.coo_matrix((vals, (rows, cols)), shape=(3 * n_free, 3 * n_free)).tocsc()
    return h, b


def _check_graph(graph: PoseGraph) -> None:
    for edge in graph.edges:
        omega = edge.information
        if not np.allclose(omega, omega.T, atol=1e-9):
            raise NonPositiveDefinite("information matrix not symmetric")
        if np.min(np.linalg.eigvalsh((omega + omega.T) / 2)) <= 0:
            raise NonPositiveDefinite("information matrix not positive definite")
    seen = {0}
    frontier = [0]
    adj: dict[int, list[int]] = {}
    for edge in graph.edges:
        adj.setdefault(edge.from_id, []).append(edge.to_id)
        adj.setdefault(edge.to_id, []).append(edge.from_id)
    while frontier:
        cur = frontier.pop()
        for nxt in adj.get(cur, []):
            if nxt not in seen:
                seen.add(nxt)
                frontier.append(nxt)
    if len(seen) != len(graph.nodes):
        raise DisconnectedGraph("graph has nodes unreachable from the anchor")


@dataclass
class OptimizeStats:
    initial_objective: float
    final_objective: float
    iterations: int


def optimize(
    graph: PoseGraph,
    max_iterations: int = 50,
    tol: float = 1e-9,
    initial_damping: float = 1e-4,
) -> OptimizeStats:
    """Minimize the weighted squared residuals over all node poses.

    Damped relinearized least squares: damping is multiplied by 10 when a
    step would increase the objective and divided by 10 on acceptance.
    Node 0 stays fixed. The graph's node poses are updated in place.
    """
    _check_graph(graph)
    poses = graph.poses()
    objective = graph_objective(graph, poses)
    initial = objective
    damping = initial_damping
    iterations = 0

    for _ in range(max_iterations):
        h, b = linearize(graph, poses)
        accepted = False
        for _ in range(30):
            h_damped = h + damping * sp.identity(h.shape[0], format="csc")
            delta = spsolve(h_damped, b)
            candidate = [poses[0]] + [
                Pose2(
                    p.x + delta[3 * (i - 1)],
                    p.y + delta[3 * (i - 1) + 1],
                    wrap_angle(p.theta + delta[3 * (i - 1) + 2]),
                )
                for i, p in enumerate(poses)
                if i > 0
            ]
            new_objective = graph_objective(graph, candidate)
            if new_objective <= objective + 1e-15:
                poses = candidate
                damping = max(damping / 10.0, 1e-12)
                accepted = True
                break
            damping *= 10.0
        iterations += 1
        if not accepted:
            break
        decrease = objective - new_objective
        objective = new_objective
        if decrease < tol:
            break

    for node, pose in zip(graph.nodes, poses):
        node.pose = pose
    return OptimizeStats(initial, objective, iterations)


def detect_loop_candidates(
    graph: PoseGraph, current_id: int, radius: float = 10.0, min_index_gap: int = 30
) -> list[int]:
    """Nodes spatially near the current node but temporally distant."""
    cur = graph.nodes[current_id].pose
    out = []
    for node in graph.nodes:
        if abs(node.id - current_id) < min_index_gap:
            continue
        if math.hypot(node.pose.x - cur.x, node.pose.y - cur.y) <= radius:
            out.append(node.id)
    return out


def try_close_loop(
    graph: PoseGraph,
    current_id: int,
    candidate_id: int,
    params: LoopParams = LoopParams(),
    match_params: MatchParams = MatchParams(),
) -> GraphEdge | None:
    """Match the two nodes' LVMs; return an accepted loop edge or None.

    The match is seeded with the current relative pose estimate. Accepts
    only converged, non-degenerate matches below the residual threshold
    with enough correspondences.
    """
    if current_id not in graph.lvms or candidate_id not in graph.lvms:
        return None
    seed = se2_compose(
        se2_inverse(graph.nodes[candidate_id].pose), graph.nodes[current_id].pose
    )
    try:
        result = icl_match(
            graph.lvms[current_id], graph.lvms[candidate_id], seed, match_params
        )
    except NoCorrespondences:
        return None
    if (
        result.degenerate
        or not result.converged
        or result.mean_abs_residual > params.error_threshold
        or result.correspondence_count < params.min_correspondences
    ):
        return None
    # a valid closure corrects at most the drift that put the candidate in
    # range; a larger jump means the match locked onto the wrong stretch
    correction = math.hypot(result.transform.x - seed.x, result.transform.y - seed.y)
    if correction > params.radius:
        return None
    return GraphEdge(
        from_id=candidate_id,
        to_id=current_id,
        measurement=result.transform,
        information=result.information_matrix,
        kind=EdgeKind.MATCHING,
    )


def save_graph(graph: PoseGraph, path) -> None:
    """One record per node and per edge; diff-friendly."""
    with open(path, "w") as f:
        f.write("# pose graph v1\n")
        for node in graph.nodes:
            f.write(f"node {node.id} {node.pose.x:.9f} {node.pose.y:.9f} {node.pose.theta:.9f}\n")
        for edge in graph.edges:
            tri = edge.information[np.triu_indices(3)]
            f.write(
                f"edge {edge.kind.value} {edge.from_id} {edge.to_id} "
                f"{edge.measurement.x:.9f} {edge.measurement.y:.9f} {edge.measurement.theta:.9f} "
                + " ".join(f"{v:.9e}" for v in tri)
                + "\n"
            )


def load_graph(path) -> PoseGraph:
    graph = PoseGraph()
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if parts[0] == "node":
                graph.nodes.append(
                    GraphNode(int(parts[1]), Pose2(*(float(v) for v in parts[2:5])))
                )
            elif parts[0] == "edge":
                info = np.zeros((3, 3))
                info[np.triu_indices(3)] = [float(v) for v in parts[7:13]]
                info = info + np.triu(info, 1).T
                graph.edges.append(
                    GraphEdge(
                        int(parts[2]),
                        int(parts[3]),
                        Pose2(*(float(v) for v in parts[4:7])),
                        info,
                        EdgeKind(parts[1]),
                    )
                )
            else:
                raise ValueError(f"bad graph record: {line!r}")
    return graph
