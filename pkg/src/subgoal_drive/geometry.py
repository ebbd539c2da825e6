"""Path discretization, subgoal tracking and the subgoal-angle navigation command.

Frame conventions: world x to the right, y up. Angles returned by
:func:`subgoal_angle` are in degrees, positive when the subgoal lies to the
right (clockwise) of the heading.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .errors import CoincidentPointError, DegeneratePathError, InvalidVectorError

DEFAULT_SPACING = 2.0
DEFAULT_LOOKAHEAD = 3.0
STRAIGHT_HALF_WIDTH = 10.0


class Branch(enum.IntEnum):
    LEFT = 0
    STRAIGHT = 1
    RIGHT = 2


@dataclass(frozen=True)
class Pose:
    position: np.ndarray
    heading: np.ndarray
    speed: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float).reshape(2))
        object.__setattr__(self, "heading", np.asarray(self.heading, dtype=float).reshape(2))
        if abs(np.hypot(*self.heading) - 1.0) > 1e-9:
            raise InvalidVectorError(f"heading must be unit length, got {self.heading}")
        if not self.speed >= 0.0:
            raise ValueError(f"speed must be >= 0, got {self.speed}")

    @classmethod
    def from_yaw(cls, x: float, y: float, yaw: float, speed: float = 0.0) -> "Pose":
        return cls(np.array([x, y]), np.array([math.cos(yaw), math.sin(yaw)]), speed)

    @property
    def yaw(self) -> float:
        return math.atan2(self.heading[1], self.heading[0])

    @property
    def right(self) -> np.ndarray:
        """Unit vector pointing to the right of the heading."""
        return np.array([self.heading[1], -self.heading[0]])


@dataclass(frozen=True)
class PathSpec:
    subgoal_points: np.ndarray
    spacing_min: float = DEFAULT_SPACING

    def __post_init__(self):
        pts = np.asarray(self.subgoal_points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
            raise DegeneratePathError("a path needs at least two subgoal points")
        gaps = np.hypot(*np.diff(pts, axis=0).T)
        if np.any(gaps < self.spacing_min):
            raise DegeneratePathError(
                f"adjacent subgoal points closer than {self.spacing_min} m (min gap {gaps.min():.4f})")
        pts.setflags(write=False)
        object.__setattr__(self, "subgoal_points", pts)

    def __len__(self) -> int:
        return len(self.subgoal_points)

    @property
    def final_point(self) -> np.ndarray:
        return self.subgoal_points[-1]

    def length(self) -> float:
        return float(np.hypot(*np.diff(self.subgoal_points, axis=0).T).sum())


@dataclass(frozen=True)
class ProgressCursor:
    last_passed_index: int = 0


def discretize_path(trajectory, spacing_min: float = DEFAULT_SPACING) -> PathSpec:
    """Greedy chronological filter: keep a point once it is ``spacing_min`` from the last kept one."""
    if spacing_min <= 0:
        raise ValueError("spacing_min must be positive")
    pts = np.asarray(trajectory, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
        raise DegeneratePathError("trajectory needs at least two 2D points")
    kept = [0]
    last = pts[0]
    for i in range(1, len(pts)):
        p = pts[i]
        if math.hypot(p[0] - last[0], p[1] - last[1]) >= spacing_min:
            kept.append(i)
            last = p
    if len(kept) < 2:
        raise DegeneratePathError(
            f"trajectory collapses to a single point at spacing {spacing_min} m")
    return PathSpec(pts[kept].copy(), spacing_min)


def select_subgoal(path: PathSpec, cursor: ProgressCursor, pose: Pose,
                   lookahead_min: float = DEFAULT_LOOKAHEAD):
    """Return ``(subgoal_point, cursor)``.

    The cursor moves past consecutive points lying within ``lookahead_min`` of
    the vehicle; the subgoal is the first point at or after the cursor that is
    farther than ``lookahead_min``. Near the end of the path the final point is
    returned.
    """
    pts = path.subgoal_points
    n = len(pts)
    if n == 0:
        raise DegeneratePathError("empty path")
    px, py = pose.position
    j = min(max(cursor.last_passed_index, 0), n - 1)
    while j < n and math.hypot(pts[j, 0] - px, pts[j, 1] - py) <= lookahead_min:
        j += 1
    new_index = max(cursor.last_passed_index, j - 1)
    new_index = min(new_index, n - 1)
    goal = pts[min(j, n - 1)]
    return goal, ProgressCursor(new_index)


def subgoal_direction(subgoal, pose: Pose) -> np.ndarray:
    delta = np.asarray(subgoal, dtype=float) - pose.position
    norm = math.hypot(delta[0], delta[1])
    if norm == 0.0:
        raise CoincidentPointError("subgoal coincides with the vehicle position")
    return delta / norm


def subgoal_angle(direction, heading, tol: float = 1e-6) -> float:
    """Signed angle in degrees from ``heading`` to ``direction``, right-positive, in (-180, 180]."""
    dx, dy = float(direction[0]), float(direction[1])
    hx, hy = float(heading[0]), float(heading[1])
    if abs(math.hypot(dx, dy) - 1.0) > tol or abs(math.hypot(hx, hy) - 1.0) > tol:
        raise InvalidVectorError("subgoal_angle expects unit vectors")
    cross = hx * dy - hy * dx
    dot = hx * dx + hy * dy
    deg = -math.degrees(math.atan2(cross, dot))
    if deg <= -180.0:
        deg = 180.0
    # atan2(-0.0, negative) yields -pi, negated to +180; also fold -0.0
    return deg + 0.0


def discretize_branch(angle_deg: float) -> Branch:
    if angle_deg < -STRAIGHT_HALF_WIDTH:
        return Branch.LEFT
    if angle_deg <= STRAIGHT_HALF_WIDTH:
        return Branch.STRAIGHT
    return Branch.RIGHT


def branch_array(angles_deg) -> np.ndarray:
    """Vectorized :func:`discretize_branch` returning int branch ids."""
    a = np.asarray(angles_deg, dtype=float)
    return np.where(a < -STRAIGHT_HALF_WIDTH, Branch.LEFT,
                    np.where(a <= STRAIGHT_HALF_WIDTH, Branch.STRAIGHT, Branch.RIGHT)).astype(np.int64)


def navigation_command(path: PathSpec, cursor: ProgressCursor, pose: Pose,
                       lookahead_min: float = DEFAULT_LOOKAHEAD):
    """Subgoal selection followed by the angle computation; returns ``(angle_deg, cursor)``."""
    goal, cursor = select_subgoal(path, cursor, pose, lookahead_min)
    delta = goal - pose.position
    if math.hypot(delta[0], delta[1]) == 0.0:
        return 0.0, cursor
    return subgoal_angle(subgoal_direction(goal, pose), pose.heading), cursor


COMMAND_LOOKAHEAD = 15.0
COMMAND_LOOKBACK = 6.0
COMMAND_TURN = 45.0
# discrete commands fed to a network as a stand-in angle
COMMAND_ANGLES = np.array([-90.0, 0.0, 90.0])


def route_command(path: PathSpec, index: int, lookahead: float = COMMAND_LOOKAHEAD,
                  lookback: float = COMMAND_LOOKBACK, turn_deg: float = COMMAND_TURN) -> Branch:
    """Planner-style command from the route alone.

    Left/right when the path turns by more than ``turn_deg`` between a point
    ``lookback`` meters behind point ``index`` and ``lookahead`` meters past it,
    straight otherwise. The ego pose plays no part.
    """
    pts = path.subgoal_points
    seg = np.diff(pts, axis=0)
    lens = np.hypot(seg[:, 0], seg[:, 1])
    i = min(max(int(index), 0), len(seg) - 1)
    j = i
    back = 0.0
    while j > 0 and back + lens[j - 1] <= lookback:
        j -= 1
        back += lens[j]
    ref = seg[j]
    best, ahead, k = 0.0, 0.0, i
    while k < len(seg) and ahead <= lookahead:
        d = seg[k]
        # positive = clockwise = right
        turn = -math.degrees(math.atan2(ref[0] * d[1] - ref[1] * d[0], ref[0] * d[0] + ref[1] * d[1]))
        if abs(turn) > abs(best):
            best = turn
        ahead += lens[k]
        k += 1
    if best > turn_deg:
        return Branch.RIGHT
    if best < -turn_deg:
        return Branch.LEFT
    return Branch.STRAIGHT


def route_commands(path: PathSpec, indices, **kw) -> np.ndarray:
    return np.array([route_command(path, i, **kw) for i in np.asarray(indices).ravel()], dtype=np.int64)
