"""Scan projection, ground elimination, obstacle marking, and log-odds
fusion into a local grid map (LGM)."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from roadvec.geometry import Pose2
from roadvec.grid_fusion import (
    EmptyFrame,
    GridConfig,
    OccupancyGrid,
    PoseOutOfBounds,
    ScanFrame,
    eliminate_ground,
    fuse_frame,
    load_lgm,
    mark_obstacles,
    occupied_cells,
    preprocess_boundary,
    project_scan,
    save_lgm,
)

from conftest import dilate, rasterize_walls


def small_config(**overrides):
    defaults = dict(rows=41, cols=41, anchor_row=20, anchor_col=20)
    defaults.update(overrides)
    return GridConfig(**defaults)


def ground_plane(x0, x1, y0, y1, z=0.0, step=0.1):
    xs = np.arange(x0, x1, step)
    ys = np.arange(y0, y1, step)
    gx, gy = np.meshgrid(xs, ys)
    pts = np.column_stack([gx.ravel(), gy.ravel(), np.full(gx.size, z)])
    return pts


class TestGridConfig:
    def test_rejects_bad_dimensions(self):
        with pytest.raises(ValueError):
            GridConfig(rows=0)
        with pytest.raises(ValueError):
            GridConfig(resolution=-0.1)

    def test_rejects_bad_threshold(self):
        with pytest.raises(ValueError):
            GridConfig(occupancy_threshold=1.5)

    def test_rejects_bad_logodds(self):
        with pytest.raises(ValueError):
            GridConfig(logodds_hit=-1.0)

    def test_cell_round_trip(self):
        cfg = GridConfig()
        rc = cfg.to_cells(np.array([[1.0, 0.0], [0.0, 0.0], [-2.0, 3.0]]))
        centers = cfg.cell_centers(rc)
        back = cfg.to_cells(centers)
        assert np.array_equal(rc, back)


class TestProjectScan:
    def test_single_point(self):
        cfg = GridConfig()
        grid = project_scan(ScanFrame(np.array([[1.0, 0.0, 0.2]])), cfg)
        populated = np.argwhere(grid.counts > 0)
        assert len(populated) == 1
        r, c = populated[0]
        cell = grid.cell(r, c)
        assert cell.z_min == pytest.approx(0.2)
        assert cell.z_max == pytest.approx(0.2)
        # the populated cell is the one containing (1.0, 0.0)
        assert np.array_equal(cfg.to_cells(np.array([[1.0, 0.0]]))[0], (r, c))

    def test_z_delta(self):
        grid = project_scan(
            ScanFrame(np.array([[1.0, 0.0, 0.0], [1.0, 0.0, 0.5]])), GridConfig()
        )
        r, c = np.argwhere(grid.counts > 0)[0]
        assert grid.cell(r, c).z_delta == pytest.approx(0.5)

    def test_out_of_bounds_dropped(self):
        grid = project_scan(ScanFrame(np.array([[200.0, 0.0, 0.0]])), GridConfig())
        assert grid.counts.sum() == 0

    def test_empty_frame(self):
        with pytest.raises(EmptyFrame):
            project_scan(ScanFrame(np.zeros((0, 3))), GridConfig())


class TestEliminateGround:
    def test_flat_ground_never_obstacle(self):
        cfg = small_config()
        pts = ground_plane(-2.0, 2.0, -2.0, 2.0, z=0.0)
        labels = eliminate_ground(project_scan(ScanFrame(pts), cfg))
        assert not labels.any()

    def test_curb_points_exactly_labeled(self):
        cfg = small_config(obstacle_height_delta=0.10)
        ground = ground_plane(-2.0, 2.0, -2.0, 2.0, z=0.0)
        curb = ground_plane(-2.0, 2.0, 1.0, 1.2, z=0.15)
        pts = np.vstack([ground, curb])
        labels = eliminate_ground(project_scan(ScanFrame(pts), cfg))
        expected = pts[:, 2] > 0.10
        assert np.array_equal(labels, expected)
        assert labels.sum() == len(curb)

    def test_single_point_per_block_is_ground(self):
        cfg = small_config()
        # one point per coarse block, wildly different heights
        pts = np.array([[0.0, 0.0, 5.0], [1.0, 1.0, -3.0], [-1.5, 0.5, 2.0]])
        labels = eliminate_ground(project_scan(ScanFrame(pts), cfg))
        assert not labels.any()


class TestMarkObstacles:
    def test_curb_mask(self):
        cfg = small_config(obstacle_height_delta=0.10)
        ground = ground_plane(-2.0, 2.0, -2.0, 2.0, z=0.0)
        curb = ground_plane(-2.0, 2.0, 1.0, 1.2, z=0.2)
        pts = np.vstack([ground, curb])
        grid = project_scan(ScanFrame(pts), cfg)
        mask = mark_obstacles(grid, eliminate_ground(grid))
        expected = np.zeros_like(mask)
        rc = cfg.to_cells(curb[:, :2])
        expected[rc[:, 0], rc[:, 1]] = True
        assert np.array_equal(mask, expected)

    def test_overhang_not_marked(self):
        cfg = small_config(vehicle_span=(0.1, 2.0))
        ground = ground_plane(-2.0, 2.0, -2.0, 2.0, z=0.0)
        overhang = np.array([[1.0, 1.0, 3.5]])
        grid = project_scan(ScanFrame(np.vstack([ground, overhang])), cfg)
        mask = mark_obstacles(grid, eliminate_ground(grid))
        assert not mask.any()

    def test_no_obstacles_empty_mask(self):
        cfg = small_config()
        grid = project_scan(ScanFrame(ground_plane(-1, 1, -1, 1)), cfg)
        mask = mark_obstacles(grid, eliminate_ground(grid))
        assert not mask.any()


class TestFuseFrame:
    def test_single_hit_matches_bayes_odds(self):
        cfg = small_config()
        lgm = OccupancyGrid(cfg)
        mask = np.zeros((cfg.rows, cfg.cols), dtype=bool)
        mask[20, 25] = True
        fuse_frame(lgm, mask, Pose2())
        # independent oracle: prior odds 1, one update of odds ratio e^0.85
        odds = 1.0 * math.exp(0.85)
        assert lgm.occupancy()[20, 25] == pytest.approx(odds / (1.0 + odds))
        assert lgm.occupancy()[20, 25] == pytest.approx(0.7006, abs=5e-4)

    def test_hits_cancel_equal_misses(self):
        cfg = small_config(logodds_hit=0.85, logodds_miss=-0.85)
        lgm = OccupancyGrid(cfg)
        hit = np.zeros((cfg.rows, cfg.cols), dtype=bool)
        hit[20, 25] = True
        free = np.zeros_like(hit)
        free[20, 25] = True
        empty = np.zeros_like(hit)
        for _ in range(5):
            fuse_frame(lgm, hit, Pose2())
        for _ in range(5):
            fuse_frame(lgm, empty, Pose2(), free_mask=free)
        assert lgm.log_odds[20, 25] == pytest.approx(0.0, abs=1e-12)
        assert lgm.frame_count == 10

    def test_clamp_saturation(self):
        cfg = small_config(logodds_clamp=10.0)
        lgm = OccupancyGrid(cfg)
        mask = np.zeros((cfg.rows, cfg.cols), dtype=bool)
        mask[20, 25] = True
        for _ in range(20):
            fuse_frame(lgm, mask, Pose2())
        assert lgm.log_odds[20, 25] == 10.0

    def test_pose_out_of_bounds(self):
        cfg = small_config()
        lgm = OccupancyGrid(cfg)
        mask = np.zeros((cfg.rows, cfg.cols), dtype=bool)
        mask[20, 25] = True
        with pytest.raises(PoseOutOfBounds):
            fuse_frame(lgm, mask, Pose2(500.0, 0.0, 0.0))

    def test_pose_maps_cells(self):
        cfg = small_config()
        lgm = OccupancyGrid(cfg)
        mask = np.zeros((cfg.rows, cfg.cols), dtype=bool)
        mask[20, 20] = True  # cell at the vehicle anchor, metric (0, 0)
        fuse_frame(lgm, mask, Pose2(1.0, 0.0, 0.0))
        rc = cfg.to_cells(np.array([[1.0, 0.0]]))[0]
        assert lgm.log_odds[rc[0], rc[1]] == pytest.approx(cfg.logodds_hit)


class TestOccupiedCells:
    def test_fresh_grid_empty(self):
        assert not occupied_cells(OccupancyGrid(small_config())).any()

    def test_single_saturated_cell(self):
        cfg = small_config()
        lgm = OccupancyGrid(cfg)
        lgm.log_odds[7, 9] = cfg.logodds_clamp
        mask = occupied_cells(lgm)
        assert mask.sum() == 1 and mask[7, 9]

    def test_threshold_boundary(self):
        cfg = small_config(occupancy_threshold=0.65)
        lgm = OccupancyGrid(cfg)
        lgm.log_odds[1, 1] = math.log(0.65 / 0.35) + 1e-9  # just above
        lgm.log_odds[2, 2] = math.log(0.65 / 0.35) - 1e-9  # just below
        mask = occupied_cells(lgm)
        assert mask[1, 1] and not mask[2, 2]


class TestPreprocessBoundary:
    def test_keeps_first_hit_only(self):
        # four axis-aligned rays so exactly one ray covers the hit cells
        cfg = small_config(preprocess_rays=4)
        mask = np.zeros((cfg.rows, cfg.cols), dtype=bool)
        mask[20, 25] = True  # 1 m from the anchor along +y
        mask[20, 30] = True  # behind it on the same ray
        boundary, free = preprocess_boundary(mask, cfg)
        assert boundary[20, 25]
        assert not boundary[20, 30]
        assert not free[20, 25]
        # cells leading up to the hit are free, except the one just before
        assert free[20, 22]
        assert not free[20, 24]

    def test_empty_mask_all_free(self):
        cfg = small_config()
        boundary, free = preprocess_boundary(
            np.zeros((cfg.rows, cfg.cols), dtype=bool), cfg
        )
        assert not boundary.any()
        assert free.any()


class TestFusionProperties:
    @given(st.lists(st.sampled_from([0.85, -0.4]), min_size=1, max_size=20), st.randoms())
    @settings(max_examples=50, deadline=None)
    def test_permutation_invariance(self, deltas, rnd):
        """Hit/miss updates on one cell commute while clamping is inactive."""
        if max(abs(np.cumsum(deltas).min()), np.cumsum(deltas).max()) >= 10.0:
            return
        cfg = small_config()

        def run(seq):
            lgm = OccupancyGrid(cfg)
            hit = np.zeros((cfg.rows, cfg.cols), dtype=bool)
            hit[3, 3] = True
            empty = np.zeros_like(hit)
            for d in seq:
                if d > 0:
                    fuse_frame(lgm, hit, Pose2())
                else:
                    fuse_frame(lgm, empty, Pose2(), free_mask=hit)
            return lgm.log_odds[3, 3]

        shuffled = list(deltas)
        rnd.shuffle(shuffled)
        assert run(deltas) == pytest.approx(run(shuffled), abs=1e-12)

    def test_monotone_in_hits(self):
        cfg = small_config()
        lgm = OccupancyGrid(cfg)
        mask = np.zeros((cfg.rows, cfg.cols), dtype=bool)
        mask[4, 4] = True
        prev = lgm.occupancy()[4, 4]
        for _ in range(30):
            fuse_frame(lgm, mask, Pose2())
            cur = lgm.occupancy()[4, 4]
            assert cur >= prev
            prev = cur


class TestFusionImprovesSingleFrames:
    def test_fused_f1_beats_every_single_frame(self, straight_scene, straight_frames_noisy):
        """Multi-frame fusion recovers the curb raster better than any
        one frame's obstacle mask does."""
        from roadvec.pipeline import PipelineConfig, frame_to_boundary

        cfg = PipelineConfig().grid
        frames = straight_frames_noisy[2:12]
        anchor = frames[len(frames) // 2].true_pose
        truth = dilate(rasterize_walls(straight_scene, anchor, cfg), 1)

        def f1(mask):
            tp = (mask & truth).sum()
            if mask.sum() == 0 or tp == 0:
                return 0.0
            precision = tp / mask.sum()
            recall = (mask & truth).sum() / max(
                1, (truth & coverage).sum()
            )
            return 2 * precision * recall / (precision + recall)

        import roadvec.geometry as geo

        single_masks = []
        fused = OccupancyGrid(cfg)
        coverage = np.zeros((cfg.rows, cfg.cols), dtype=bool)
        for fr in frames:
            boundary, free = frame_to_boundary(fr.scan.points, cfg)
            rel = geo.se2_compose(geo.se2_inverse(anchor), fr.true_pose)
            lgm_i = OccupancyGrid(cfg)
            fuse_frame(lgm_i, boundary, rel, free)
            single_masks.append(occupied_cells(lgm_i))
            fuse_frame(fused, boundary, rel, free)
            rc = cfg.to_cells(rel.apply(cfg.cell_centers(np.argwhere(boundary))))
            ok = cfg.in_bounds(rc)
            coverage[rc[ok, 0], rc[ok, 1]] = True

        fused_f1 = f1(occupied_cells(fused))
        assert fused_f1 > 0.5
        assert all(fused_f1 > f1(m) for m in single_masks)

    def test_fused_mask_within_one_cell_of_truth(
        self, straight_scene, straight_frames_noisy
    ):
        from roadvec.pipeline import PipelineConfig, frame_to_boundary
        import roadvec.geometry as geo

        cfg = PipelineConfig().grid
        frames = straight_frames_noisy[2:12]
        anchor = frames[len(frames) // 2].true_pose
        fused = OccupancyGrid(cfg)
        for fr in frames:
            boundary, free = frame_to_boundary(fr.scan.points, cfg)
            rel = geo.se2_compose(geo.se2_inverse(anchor), fr.true_pose)
            fuse_frame(fused, boundary, rel, free)
        truth = dilate(rasterize_walls(straight_scene, anchor, cfg), 1)
        mask = occupied_cells(fused)
        assert mask.sum() > 100
        outside = mask & ~truth
        assert outside.sum() / mask.sum() < 0.02


class TestPersistence:
    def test_round_trip_bit_exact(self, tmp_path):
        cfg = small_config()
        lgm = OccupancyGrid(cfg)
        rng = np.random.default_rng(0)
        lgm.log_odds[:] = rng.normal(size=lgm.log_odds.shape)
        lgm.z_min[:] = rng.normal(size=lgm.z_min.shape)
        lgm.z_max[:] = lgm.z_min + rng.random(size=lgm.z_max.shape)
        lgm.counts[:] = rng.integers(0, 5, size=lgm.counts.shape)
        lgm.frame_count = 7
        path = tmp_path / "grid.lgm"
        save_lgm(lgm, path)
        back = load_lgm(path)
        assert np.array_equal(back.log_odds, lgm.log_odds)
        assert np.array_equal(back.z_min, lgm.z_min)
        assert np.array_equal(back.z_max, lgm.z_max)
        assert np.array_equal(back.counts, lgm.counts)
        assert back.frame_count == 7
        assert back.config == cfg
