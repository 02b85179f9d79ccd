"""Polyline-to-polyline registration (iterative closest line)."""

import math

import numpy as np
import pytest

from roadvec.geometry import BoundaryKind, Polyline, Pose2, se2_compose, se2_inverse, transform_polyline
from roadvec.matching import (
    MatchParams,
    NoCorrespondences,
    SingularSystem,
    ZeroMotion,
    find_correspondences,
    icl_match,
    load_match_result,
    match_error,
    objective,
    save_match_result,
    solve_step,
)
from roadvec.vectorize import LVM


def square_lvm(size=8.0, pose=Pose2()):
    """Closed square boundary: fully constrains x, y and heading."""
    s = size / 2
    nodes = np.array([[-s, -s], [s, -s], [s, s], [-s, s], [-s, -s + 1e-3]])
    return LVM([transform_polyline(pose, Polyline(nodes))], simplified=True)


def l_shape_lvm(pose=Pose2()):
    line = Polyline(np.array([[0.0, 4.0], [6.0, 4.0], [6.0, -3.0]]))
    return LVM([transform_polyline(pose, line)], simplified=True)


def straight_lvm(y=4.0, x0=-10.0, x1=10.0, n=21):
    nodes = np.column_stack([np.linspace(x0, x1, n), np.full(n, y)])
    return LVM([Polyline(nodes)], simplified=True)


def transformed(lvm: LVM, pose: Pose2) -> LVM:
    return LVM(
        [transform_polyline(pose, p) for p in lvm.polylines],
        simplified=lvm.simplified,
    )


class TestFindCorrespondences:
    def test_self_match_zero_distance(self):
        lvm = l_shape_lvm()
        corr = find_correspondences(lvm, lvm, Pose2(), 1.0)
        assert len(corr) == 3
        for c in corr:
            assert c.signed_distance == pytest.approx(0.0, abs=1e-12)

    def test_parallel_offset_same_signed_distance(self):
        target = straight_lvm(y=0.0)
        source = straight_lvm(y=0.0)
        corr = find_correspondences(source, target, Pose2(0.0, 0.3, 0.0), 1.0)
        assert len(corr) == 21
        dists = [c.signed_distance for c in corr]
        assert np.allclose(np.abs(dists), 0.3)
        assert len(set(np.sign(dists))) == 1

    def test_full_rejection(self):
        target = straight_lvm(y=0.0)
        source = straight_lvm(y=0.0)
        with pytest.raises(NoCorrespondences):
            find_correspondences(source, target, Pose2(0.0, 5.0, 0.0), 1.0)

    def test_infinite_boundaries_excluded(self):
        target = l_shape_lvm()
        noise = Polyline(np.array([[100.0, 100.0], [101.0, 100.0]]), BoundaryKind.INFINITE)
        source = LVM([noise, *l_shape_lvm().polylines], simplified=True)
        corr = find_correspondences(source, target, Pose2(), 1.0)
        assert len(corr) == 3  # only road-boundary nodes participate


class TestSolveStep:
    def test_zero_residual_identity(self):
        lvm = square_lvm()
        corr = find_correspondences(lvm, lvm, Pose2(), 1.0)
        delta = solve_step(corr)
        assert (delta.x, delta.y, delta.theta) == pytest.approx((0, 0, 0), abs=1e-9)

    def test_tangent_translation_singular(self):
        target = straight_lvm(y=4.0)
        source = straight_lvm(y=4.0, x0=-9.0, x1=9.0)
        corr = find_correspondences(source, target, Pose2(), 1.0)
        with pytest.raises(SingularSystem):
            solve_step(corr)

    def test_l_shape_one_step_recovery(self):
        target = l_shape_lvm()
        offset = Pose2(0.2, -0.1, 0.0)
        source = transformed(target, offset)
        corr = find_correspondences(source, target, Pose2(), 1.0)
        delta = solve_step(corr)
        assert delta.x == pytest.approx(-0.2, abs=1e-6)
        assert delta.y == pytest.approx(0.1, abs=1e-6)
        assert delta.theta == pytest.approx(0.0, abs=1e-6)

    def test_matches_hand_assembled_normal_equations(self):
        target = l_shape_lvm()
        source = transformed(target, Pose2(0.15, -0.05, 0.01))
        corr = find_correspondences(source, target, Pose2(), 1.0)
        # independent assembly: rows n_x, n_y, n_x*(-p_y) + n_y*p_x
        a = np.array(
            [
                [c.normal[0], c.normal[1], -c.normal[0] * c.point[1] + c.normal[1] * c.point[0]]
                for c in corr
            ]
        )
        b = np.array([-c.signed_distance for c in corr])
        expected, *_ = np.linalg.lstsq(a, b, rcond=None)
        delta = solve_step(corr)
        assert (delta.x, delta.y, delta.theta) == pytest.approx(tuple(expected), abs=1e-9)

    def test_linearized_objective_never_increases(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            offset = Pose2(*rng.uniform(-0.3, 0.3, 2), rng.uniform(-0.05, 0.05))
            target = square_lvm()
            source = transformed(target, offset)
            corr = find_correspondences(source, target, Pose2(), 1.0)
            delta = solve_step(corr)
            j_pre = sum(c.signed_distance**2 for c in corr)
            # residuals against the same fixed lines after the step
            rot = delta.rotation()
            t = np.array([delta.x, delta.y])
            j_post = 0.0
            for c in corr:
                foot = c.point - c.signed_distance * c.normal  # point on the line
                moved = rot @ c.point + t
                j_post += float(np.dot(c.normal, moved - foot)) ** 2
            assert j_post <= j_pre + 1e-12


class TestIclMatch:
    def test_self_match(self):
        lvm = square_lvm()
        result = icl_match(lvm, lvm, Pose2())
        assert result.converged and not result.degenerate
        assert (result.transform.x, result.transform.y, result.transform.theta) == pytest.approx(
            (0, 0, 0), abs=1e-6
        )
        assert result.mean_abs_residual == pytest.approx(0.0, abs=1e-9)
        assert result.iterations == 1

    def test_recovers_known_offset(self):
        offset = Pose2(0.5, 0.2, math.radians(2.0))
        target = square_lvm()
        # source nodes are the target's seen from a frame displaced by
        # `offset`, so the source->target transform is `offset` itself
        source = transformed(target, se2_inverse(offset))
        result = icl_match(source, target, Pose2())
        assert result.converged
        assert result.transform.x == pytest.approx(offset.x, abs=1e-3)
        assert result.transform.y == pytest.approx(offset.y, abs=1e-3)
        assert result.transform.theta == pytest.approx(offset.theta, abs=1e-4)

    def test_straight_line_flagged_degenerate(self):
        target = straight_lvm()
        source = straight_lvm(x0=-9.5, x1=9.5)
        result = icl_match(source, target, Pose2(0.0, 0.1, 0.0), MatchParams(min_correspondences=3))
        assert result.degenerate

    def test_frame_consistency(self):
        offset = Pose2(0.4, -0.3, math.radians(3.0))
        target = square_lvm()
        source = transformed(target, offset)
        fwd = icl_match(source, target, Pose2()).transform
        rev = icl_match(target, source, Pose2()).transform
        back = se2_compose(fwd, rev)
        tol = 2e-3
        assert math.hypot(back.x, back.y) < tol
        assert abs(back.theta) < tol

    def test_information_matrix_spd(self):
        offset = Pose2(0.3, 0.1, 0.01)
        target = square_lvm()
        source = transformed(target, offset)
        result = icl_match(source, target, Pose2())
        info = result.information_matrix
        assert np.allclose(info, info.T)
        assert np.min(np.linalg.eigvalsh(info)) > 0

    def test_grid_search_oracle_small_instance(self):
        target = l_shape_lvm()
        true_offset = Pose2(0.03, -0.02, math.radians(0.3))
        source = transformed(target, true_offset)
        result = icl_match(source, target, Pose2())
        # dense grid over the offset neighborhood
        best, best_j = None, math.inf
        for tx in np.arange(-0.06, 0.0601, 0.01):
            for ty in np.arange(-0.06, 0.0601, 0.01):
                for th in np.radians(np.arange(-0.6, 0.601, 0.1)):
                    j = objective(source, target, Pose2(tx, ty, th))
                    if j < best_j:
                        best, best_j = (tx, ty, th), j
        assert abs(result.transform.x - best[0]) <= 0.01 + 1e-9
        assert abs(result.transform.y - best[1]) <= 0.01 + 1e-9
        assert abs(result.transform.theta - best[2]) <= math.radians(0.1) + 1e-9


class TestMatchError:
    def test_exact_result(self):
        target = square_lvm()
        source = transformed(target, se2_inverse(Pose2(0.5, 0.0, 0.0)))
        result = icl_match(source, target, Pose2())
        absolute, relative = match_error(result, Pose2(0.5, 0.0, 0.0))
        assert absolute < 2e-3
        assert relative < 4e-3

    def test_paper_style_relative_error(self):
        target = square_lvm()
        result = icl_match(square_lvm(), target, Pose2())
        result.transform = Pose2(0.07, 0.0, 0.0)
        absolute, relative = match_error(result, Pose2(0.74, 0.0, 0.0))
        assert absolute == pytest.approx(0.67, abs=1e-9)
        assert relative == pytest.approx(0.67 / 0.74, abs=1e-9)

    def test_offset_by_007_on_074(self):
        target = square_lvm()
        result = icl_match(square_lvm(), target, Pose2())
        result.transform = Pose2(0.74 + 0.07, 0.0, 0.0)
        absolute, relative = match_error(result, Pose2(0.74, 0.0, 0.0))
        assert absolute == pytest.approx(0.07, abs=1e-9)
        assert relative == pytest.approx(0.0946, abs=2e-4)

    def test_zero_motion(self):
        result = icl_match(square_lvm(), square_lvm(), Pose2())
        with pytest.raises(ZeroMotion):
            match_error(result, Pose2())


class TestPersistence:
    def test_round_trip(self, tmp_path):
        target = square_lvm()
        source = transformed(target, Pose2(0.3, -0.2, 0.02))
        result = icl_match(source, target, Pose2())
        path = tmp_path / "match.txt"
        save_match_result(result, path)
        back = load_match_result(path)
        assert back.transform.x == pytest.approx(result.transform.x, abs=1e-8)
        assert back.transform.y == pytest.approx(result.transform.y, abs=1e-8)
        assert back.transform.theta == pytest.approx(result.transform.theta, abs=1e-8)
        assert back.iterations == result.iterations
        assert back.converged == result.converged
        assert back.degenerate == result.degenerate
        assert back.correspondence_count == result.correspondence_count
        assert back.information_matrix == pytest.approx(result.information_matrix, rel=1e-6)
