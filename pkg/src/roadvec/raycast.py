"""Exact cell traversal of rays through a binary occupancy mask.

Rays are expressed in grid units (1 unit = 1 cell side, x along rows,
y along cols). Callers convert to meters with the grid resolution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass
class RayTrace:
    """Outcome of tracing one ray from an interior origin to the border."""

    hit: bool
    hit_cell: tuple[int, int] | None
    hit_t: float  # entry distance (grid units) into the hit cell
    end_point: np.ndarray  # hit entry point, or border exit point on a miss
    free_cells: np.ndarray  # (K, 2) cells crossed before the hit / border


def _axis_crossings(u: float, d: float, t_max: float) -> np.ndarray:
    """Parameters t of integer-plane crossings along one axis, t < t_max."""
    if d == 0.0:
        return np.empty(0)
    if d > 0.0:
        planes = np.arange(math.floor(u) + 1, math.floor(u + t_max * d) + 1)
    else:
        planes = np.arange(math.ceil(u) - 1, math.ceil(u + t_max * d) - 2, -1)
    t = (planes - u) / d
    return t[t < t_max - 1e-12]


def trace_ray(mask: np.ndarray, origin: np.ndarray, direction: np.ndarray) -> RayTrace:
    """Walk the ray cell by cell; stop at the first occupied cell or border.

    origin must lie strictly inside the grid extent. direction is a unit
    vector; distances are in grid units.
    """
    rows, cols = mask.shape
    ux, uy = float(origin[0]), float(origin[1])
    dx, dy = float(direction[0]), float(direction[1])

    t_exit = math.inf
    if dx > 0:
        t_exit = (rows - ux) / dx
    elif dx < 0:
        t_exit = -ux / dx
    if dy > 0:
        t_exit = min(t_exit, (cols - uy) / dy)
    elif dy < 0:
        t_exit = min(t_exit, -uy / dy)

    tx = _axis_crossings(ux, dx, t_exit)
    ty = _axis_crossings(uy, dy, t_exit)
    ts = np.concatenate([tx, ty])
    step_r = np.concatenate([np.full(len(tx), 1 if dx > 0 else -1), np.zeros(len(ty))])
    step_c = np.concatenate([np.zeros(len(tx)), np.full(len(ty), 1 if dy > 0 else -1)])
    order = np.argsort(ts, kind="stable")
    ts = ts[order]

    r0, c0 = int(math.floor(ux)), int(math.floor(uy))
    r_seq = np.clip(r0 + np.concatenate([[0], np.cumsum(step_r[order])]).astype(int), 0, rows - 1)
    c_seq = np.clip(c0 + np.concatenate([[0], np.cumsum(step_c[order])]).astype(int), 0, cols - 1)
    entry_t = np.concatenate([[0.0], ts])

    occ = mask[r_seq, c_seq]
    if occ.any():
        k = int(np.argmax(occ))
        t_hit = float(entry_t[k])
        return RayTrace(
            hit=True,
            hit_cell=(int(r_seq[k]), int(c_seq[k])),
            hit_t=t_hit,
            end_point=np.array([ux + t_hit * dx, uy + t_hit * dy]),
            free_cells=np.column_stack([r_seq[:k], c_seq[:k]]),
        )
    return RayTrace(
        hit=False,
        hit_cell=None,
        hit_t=float(t_exit),
        end_point=np.array([ux + t_exit * dx, uy + t_exit * dy]),
        free_cells=np.column_stack([r_seq, c_seq]),
    )


def sweep(mask: np.ndarray, origin: np.ndarray, n_rays: int, start_angle: float = 0.0):
    """Cast a full clockwise fan of n_rays rays from origin.

    Ray ids increase clockwise (decreasing mathematical angle). Returns
    (traces, free_mask): the per-ray RayTrace list and the union of all
    crossed free cells as a boolean mask.
    """
    rows, cols = mask.shape
    free = np.zeros((rows, cols), dtype=bool)
    traces = []
    step = 2.0 * math.pi / n_rays
    for i in range(n_rays):
        ang = start_angle - i * step
        tr = trace_ray(mask, origin, np.array([math.cos(ang), math.sin(ang)]))
        traces.append(tr)
        if len(tr.free_cells):
            free[tr.free_cells[:, 0], tr.free_cells[:, 1]] = True
    return traces, free
