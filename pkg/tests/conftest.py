"""Shared fixtures: simulated drives are expensive, so they are built
once per session and reused across test modules."""

import numpy as np
import pytest

from roadvec.geometry import Pose2, se2_compose, se2_inverse
from roadvec.simulator import (
    MotionNoise,
    SceneKind,
    SceneParams,
    TrajectoryParams,
    drive,
    generate_scene,
)


@pytest.fixture(scope="session")
def straight_scene():
    return generate_scene(SceneKind.STRAIGHT, SceneParams(), seed=0)


@pytest.fixture(scope="session")
def straight_frames_clean(straight_scene):
    """Noise-free drive down the straight corridor."""
    return drive(straight_scene, TrajectoryParams(), MotionNoise(), seed=0)


@pytest.fixture(scope="session")
def straight_frames_noisy(straight_scene):
    """Same drive with realistic scan range noise."""
    return drive(
        straight_scene, TrajectoryParams(), MotionNoise(scan_sigma=0.02), seed=0
    )


def rasterize_walls(scene, anchor: Pose2, config, step: float = 0.02):
    """Ground-truth cell raster of the scene's boundary walls, in the
    grid frame anchored at `anchor`."""
    raster = np.zeros((config.rows, config.cols), dtype=bool)
    inv = se2_inverse(anchor)
    for wall in scene.curbs:
        for a, b in zip(wall.nodes[:-1], wall.nodes[1:]):
            n = max(2, int(np.linalg.norm(b - a) / step) + 1)
            pts = a + np.linspace(0.0, 1.0, n)[:, None] * (b - a)
            rel = inv.apply(pts)
            rc = config.to_cells(rel)
            ok = config.in_bounds(rc)
            raster[rc[ok, 0], rc[ok, 1]] = True
    return raster


def dilate(mask: np.ndarray, cells: int = 1) -> np.ndarray:
    out = mask.copy()
    for dr in range(-cells, cells + 1):
        for dc in range(-cells, cells + 1):
            out |= np.roll(np.roll(mask, dr, axis=0), dc, axis=1)
    return out
