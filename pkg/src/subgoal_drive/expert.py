"""Scripted demonstrator: proportional steering on the subgoal angle plus stop rules.

The expert stops for red lights governing its lane and for actors inside the
corridor swept along the path ahead. Recovery viewpoints, laterally offset to
either side, carry steer labels nudged back toward the lane.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import PathSpec, Pose, ProgressCursor, navigation_command
from .sim import Action, ChannelMode, Sensor, WorldState


@dataclass(frozen=True)
class ExpertConfig:
    steer_gain: float = 1.0 / 30.0  # steer per degree of subgoal angle
    stop_range: float = 7.0
    red_stop_range: float = 6.0
    recovery_offset: float = 1.0
    recovery_correction: float = 0.3  # steer per meter of lateral offset
    corridor_margin: float = 0.4
    lookahead_min: float = 3.0

    def __post_init__(self):
        if self.steer_gain <= 0 or self.stop_range <= 0 or self.red_stop_range <= 0:
            raise ValueError("expert gain and ranges must be positive")
        if not 0 <= self.recovery_offset < 2.0:
            raise ValueError("recovery_offset must be below half the lane width")


def steer_from_angle(angle_deg: float, cfg: ExpertConfig) -> float:
    return float(np.clip(cfg.steer_gain * angle_deg, -1.0, 1.0))


def red_light_ahead(world: WorldState, pose: Pose, red_stop_range: float) -> bool:
    town = world.town
    half_lane = town.lane_width / 2
    for ap in town.approaches:
        if float(np.dot(ap.direction, pose.heading)) < 0.7:
            continue
        rel = ap.stop_point - pose.position
        ahead = float(rel @ pose.heading)
        if not 0.0 < ahead <= red_stop_range:
            continue
        if abs(float(rel @ pose.right)) >= half_lane:
            continue
        if not town.light_is_green(ap.node, ap.axis, world.tick):
            return True
    return False


def _corridor(pose: Pose, path: PathSpec, cursor: ProgressCursor, length: float, spacing: float = 0.5):
    pts = [pose.position]
    for p in path.subgoal_points[cursor.last_passed_index + 1:]:
        if float((p - pose.position) @ pose.heading) <= 0.0 and len(pts) == 1:
            continue
        pts.append(p)
        if np.linalg.norm(p - pose.position) > length + 2.0:
            break
    if len(pts) == 1:
        pts.append(pose.position + length * pose.heading)
    pts = np.asarray(pts)
    seg = np.hypot(*np.diff(pts, axis=0).T)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    s = np.arange(0.0, min(length, cum[-1]) + 1e-9, spacing)
    return np.stack([np.interp(s, cum, pts[:, 0]), np.interp(s, cum, pts[:, 1])], axis=1)


def _rect_distance(points: np.ndarray, pose: Pose, half) -> np.ndarray:
    rel = points - pose.position
    a = np.abs(rel @ pose.heading) - half[0]
    b = np.abs(rel @ pose.right) - half[1]
    return np.hypot(np.maximum(a, 0.0), np.maximum(b, 0.0))


def obstacle_ahead(world: WorldState, path: PathSpec, cursor: ProgressCursor, cfg: ExpertConfig) -> bool:
    ego = world.ego
    front = world.config.ego_half_extents[0]
    corridor = _corridor(ego, path, cursor, cfg.stop_range + front)
    clearance = world.config.ego_half_extents[1] + cfg.corridor_margin
    for a in world.actors:
        if np.linalg.norm(a.pose.position - ego.position) > cfg.stop_range + front + 6.0:
            continue
        if np.any(_rect_distance(corridor, a.pose, a.footprint) < clearance):
            return True
    return False


def expert_action(world: WorldState, path: PathSpec, cursor: ProgressCursor, cfg: ExpertConfig | None = None):
    """Return ``(Action, subgoal_angle_deg, cursor)`` for the ego's current pose."""
    cfg = cfg or ExpertConfig()
    angle, cursor = navigation_command(path, cursor, world.ego, cfg.lookahead_min)
    steer = steer_from_angle(angle, cfg)
    stop = red_light_ahead(world, world.ego, cfg.red_stop_range) or obstacle_ahead(world, path, cursor, cfg)
    return Action(steer, 0 if stop else 1), angle, cursor


def offset_pose(pose: Pose, lateral: float) -> Pose:
    """Pose shifted ``lateral`` meters to the right (negative shifts left)."""
    return Pose(pose.position + lateral * pose.right, pose.heading, pose.speed)


def recovery_views(world: WorldState, path: PathSpec, cursor: ProgressCursor, center: Action,
                   cfg: ExpertConfig | None = None):
    """``[(pose, angle, action)]`` for the left then right offset viewpoints.

    The left view is labeled with a rightward correction and vice versa; the
    subgoal angle is recomputed from the offset pose with the same cursor.
    """
    cfg = cfg or ExpertConfig()
    out = []
    delta = cfg.recovery_correction * cfg.recovery_offset  # correction is per meter of offset
    for side, corr in ((-1.0, delta), (1.0, -delta)):
        pose = offset_pose(world.ego, side * cfg.recovery_offset)
        angle, _ = navigation_command(path, cursor, pose, cfg.lookahead_min)
        steer = float(np.clip(center.steer + corr, -1.0, 1.0))
        out.append((pose, angle, Action(steer, center.throttle)))
    return out


def recovery_samples(world: WorldState, path: PathSpec, cursor: ProgressCursor, cfg: ExpertConfig | None,
                     condition_seed: int, sensor: Sensor | None = None, channel_mode=ChannelMode.ASD,
                     center: Action | None = None):
    """Two labeled ``(frame, angle, action)`` samples sensed from the recovery viewpoints."""
    cfg = cfg or ExpertConfig()
    sensor = sensor or Sensor(world.config)
    if center is None:
        center, _, _ = expert_action(world, path, cursor, cfg)
    return [(sensor.sense(world, pose, condition_seed, channel_mode), angle, action)
            for pose, angle, action in recovery_views(world, path, cursor, center, cfg)]
