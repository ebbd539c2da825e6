import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from subgoal_drive.errors import CoincidentPointError, DegeneratePathError, InvalidVectorError
from subgoal_drive.geometry import (Branch, PathSpec, Pose, ProgressCursor, branch_array, discretize_branch,
                                    discretize_path, navigation_command, route_command, route_commands,
                                    select_subgoal, subgoal_angle,
                                    subgoal_direction)


def unit(deg):
    r = math.radians(deg)
    return np.array([math.cos(r), math.sin(r)])


def rotate_right(v, deg):
    r = -math.radians(deg)
    c, s = math.cos(r), math.sin(r)
    return np.array([[c, -s], [s, c]]) @ v


def straight_path(n=10, spacing=2.0):
    return PathSpec(np.column_stack([np.arange(n) * spacing, np.zeros(n)]), spacing)


class TestDiscretizePath:
    def test_collinear_half_meter(self):
        traj = np.column_stack([np.arange(21) * 0.5, np.zeros(21)])
        p = discretize_path(traj, 2.0)
        assert p.subgoal_points[:, 0].tolist() == [0, 2, 4, 6, 8, 10]

    def test_two_points_kept(self):
        p = discretize_path([[0, 0], [5, 0]], 2.0)
        assert len(p) == 2

    def test_collapse_raises(self):
        with pytest.raises(DegeneratePathError):
            discretize_path([[0, 0], [0.5, 0], [1.0, 0]], 2.0)

    def test_pathspec_rejects_close_points(self):
        with pytest.raises(DegeneratePathError):
            PathSpec(np.array([[0, 0], [1, 0]]), 2.0)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.tuples(st.floats(-50, 50), st.floats(-50, 50)), min_size=2, max_size=60))
    def test_spacing_invariant(self, pts):
        try:
            p = discretize_path(pts, 2.0)
        except DegeneratePathError:
            return
        gaps = np.hypot(*np.diff(p.subgoal_points, axis=0).T)
        assert np.all(gaps >= 2.0)
        assert np.array_equal(p.subgoal_points[0], np.asarray(pts[0], dtype=float))


class TestSelectSubgoal:
    def test_first_point_beyond_lookahead(self):
        path = straight_path()
        goal, cur = select_subgoal(path, ProgressCursor(0), Pose([0, 0], [1, 0]), 3.0)
        assert goal.tolist() == [4.0, 0.0]
        assert cur.last_passed_index == 1

    def test_terminal_clamp(self):
        path = straight_path(5)
        goal, cur = select_subgoal(path, ProgressCursor(2), Pose([7.0, 0], [1, 0]), 3.0)
        assert goal.tolist() == [8.0, 0.0]
        assert cur.last_passed_index == 4

    def test_advances_one_index_per_step(self):
        path = straight_path(20)
        cur = ProgressCursor(0)
        goals = []
        for k in range(6):
            g, cur = select_subgoal(path, cur, Pose([2.0 * k, 0], [1, 0]), 3.0)
            goals.append(g[0])
        assert np.all(np.diff(goals) == 2.0)

    def test_cursor_never_rewinds(self):
        path = straight_path(20)
        _, cur = select_subgoal(path, ProgressCursor(8), Pose([0, 0], [1, 0]), 3.0)
        assert cur.last_passed_index == 8

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(0, 1.5), min_size=1, max_size=40))
    def test_cursor_monotone(self, steps):
        path = straight_path(30)
        cur = ProgressCursor(0)
        x = 0.0
        for s in steps:
            x += s
            _, new = select_subgoal(path, cur, Pose([x, 0.3], [1, 0]), 3.0)
            assert new.last_passed_index >= cur.last_passed_index
            cur = new


class TestDirectionAndAngle:
    def test_direction_examples(self):
        assert np.allclose(subgoal_direction([3, 4], Pose([0, 0], [1, 0])), [0.6, 0.8], atol=1e-12)
        assert np.allclose(subgoal_direction([0, 5], Pose([0, 0], [1, 0])), [0, 1], atol=1e-12)

    def test_direction_coincident(self):
        with pytest.raises(CoincidentPointError):
            subgoal_direction([1, 1], Pose([1, 1], [1, 0]))

    def test_direction_norm(self):
        rng = np.random.default_rng(0)
        a = rng.uniform(-100, 100, (1000, 2))
        b = rng.uniform(-100, 100, (1000, 2))
        for p, q in zip(a, b):
            assert abs(np.linalg.norm(subgoal_direction(q, Pose(p, [1, 0]))) - 1) < 1e-9

    def test_angle_examples(self):
        assert subgoal_angle([1, 0], [0, 1]) == pytest.approx(90.0)
        assert subgoal_angle([0, 1], [0, 1]) == 0.0
        assert subgoal_angle([-1, 0], [0, 1]) == pytest.approx(-90.0)

    def test_exact_rear_is_plus_180(self):
        for h in ([0, 1], [1, 0], [0, -1], [-1, 0]):
            h = np.array(h, dtype=float)
            assert subgoal_angle(-h, h) == 180.0

    def test_invalid_vector(self):
        with pytest.raises(InvalidVectorError):
            subgoal_angle([2, 0], [0, 1])

    @settings(max_examples=300, deadline=None)
    @given(st.floats(-180, 180, exclude_min=True, exclude_max=True), st.floats(-180, 180))
    def test_composition(self, phi, yaw):
        h = unit(yaw)
        assert subgoal_angle(rotate_right(h, phi), h) == pytest.approx(phi, abs=1e-9)

    @settings(max_examples=300, deadline=None)
    @given(st.floats(-179.9, 179.9), st.floats(-180, 180))
    def test_antisymmetry(self, phi, yaw):
        h = unit(yaw)
        d = rotate_right(h, phi)
        reflected = 2 * np.dot(d, h) * h - d
        assert subgoal_angle(d, h) == pytest.approx(-subgoal_angle(reflected, h), abs=1e-9)

    def test_navigation_command_straight(self):
        angle, cur = navigation_command(straight_path(), ProgressCursor(0), Pose([0, 0], [1, 0]))
        assert angle == 0.0 and cur.last_passed_index == 1


class TestBranch:
    @pytest.mark.parametrize("angle,branch", [(-45, Branch.LEFT), (-180, Branch.LEFT), (-10.000001, Branch.LEFT),
                                              (-10, Branch.STRAIGHT), (0, Branch.STRAIGHT), (10, Branch.STRAIGHT),
                                              (10.000001, Branch.RIGHT), (180, Branch.RIGHT)])
    def test_partition(self, angle, branch):
        assert discretize_branch(angle) is branch

    @settings(max_examples=300, deadline=None)
    @given(st.floats(-180, 180))
    def test_vectorized_matches(self, a):
        assert branch_array([a])[0] == discretize_branch(a)


def _turning_path(turn_at, sign, radius=8.0, n_arc=8):
    """Straight along +x to x=turn_at, then a quarter arc (sign +1 right, -1 left), then straight."""
    pts = [(x, 0.0) for x in np.arange(0.0, turn_at, 2.5)]
    cx, cy = turn_at, -sign * radius
    for a in np.linspace(0, math.pi / 2, n_arc + 1):
        pts.append((cx + radius * math.sin(a), cy + sign * radius * math.cos(a)))
    ex, ey = pts[-1]
    for d in np.arange(2.5, 30.0, 2.5):
        pts.append((ex, ey - sign * d))
    return discretize_path(np.array(pts))


def test_route_command_straight_road():
    path = discretize_path(np.array([(x, 0.0) for x in np.arange(0.0, 60.0, 2.5)]))
    assert set(route_commands(path, range(len(path)))) == {Branch.STRAIGHT}


@pytest.mark.parametrize("sign,branch", [(1, Branch.RIGHT), (-1, Branch.LEFT)])
def test_route_command_turns(sign, branch):
    path = _turning_path(40.0, sign)
    pts = path.subgoal_points
    far = int(np.argmin(np.abs(pts[:, 0] - 15.0)))
    near = int(np.argmin(np.abs(pts[:, 0] - 33.0)))
    assert route_command(path, far) is Branch.STRAIGHT
    assert route_command(path, near) is branch
    # stays on the turn command while inside the arc
    mid = near + 3
    assert route_command(path, mid) is branch
    # back to straight well after the turn
    assert route_command(path, len(path) - 2) is Branch.STRAIGHT


def test_route_command_clamps_index():
    path = _turning_path(10.0, 1)
    assert route_command(path, -5) is route_command(path, 0)
    assert route_command(path, 10 ** 6) is route_command(path, len(path) - 2)
