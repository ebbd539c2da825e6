"""Deterministic 2D driving micro-simulator: kinematic ego, scripted actors, lights and raster sensing."""
from __future__ import annotations

import enum
import hashlib
import math
import struct
from dataclasses import dataclass, replace
from functools import cached_property

import numpy as np

from .errors import InvalidActionError
from .geometry import Pose
from .town import (LANE_OFFSET, TownMap, _right, block_loops, polyline_length,
                   route_polyline)

DEPTH_SCALE = 12.0
QUANT_LEVELS = 255
LIGHT_FACING_COS = 0.5  # cos 60 deg
LIGHT_PATCH_DEPTH = 2.0  # meters of lane before the stop line painted with the light state
QUANT_STEP = DEPTH_SCALE / QUANT_LEVELS

# channel layout of a full (ASD) frame
CH_APPEARANCE, CH_DRIVABLE, CH_VEHICLE, CH_PEDESTRIAN, CH_RED, CH_GREEN, CH_DEPTH = range(7)
SEMANTIC_CHANNELS = (CH_DRIVABLE, CH_VEHICLE, CH_PEDESTRIAN, CH_RED, CH_GREEN)


class ChannelMode(str, enum.Enum):
    AS = "as"
    ASD = "asd"

    @property
    def n_channels(self) -> int:
        return 6 if self is ChannelMode.AS else 7


@dataclass(frozen=True)
class Action:
    steer: float
    throttle: int

    def __post_init__(self):
        if not (math.isfinite(self.steer) and -1.0 <= self.steer <= 1.0):
            raise InvalidActionError(f"steer must be finite and within [-1, 1], got {self.steer}")
        if self.throttle not in (0, 1):
            raise InvalidActionError(f"throttle must be 0 or 1, got {self.throttle}")


class ActorKind(str, enum.Enum):
    VEHICLE = "vehicle"
    PEDESTRIAN = "pedestrian"


class Collision(str, enum.Enum):
    VEHICLE = "vehicle"
    PEDESTRIAN = "pedestrian"
    OTHER = "other"


@dataclass(frozen=True)
class SimConfig:
    dt: float = 0.2
    wheelbase: float = 2.5
    max_steer_deg: float = 35.0
    cruise_speed: float = 5.0
    ego_half_extents: tuple = (2.2, 0.9)
    vehicle_half_extents: tuple = (2.2, 0.9)
    pedestrian_half_extents: tuple = (0.3, 0.3)
    vehicle_speed: float = 3.0
    pedestrian_speed: float = 1.2
    pedestrian_pause_ticks: int = 20
    n_vehicles: int = 6
    n_pedestrians: int = 6
    grid_h: int = 32
    grid_w: int = 32
    cell_size: float = 0.5
    anchor_row: int = 28
    town_size: tuple = (4, 4)

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.pedestrian_speed < self.vehicle_speed:
            raise ValueError("pedestrians must be slower than vehicles")


@dataclass(frozen=True)
class ActorScript:
    """Open-loop script: a polyline traversed at constant speed.

    Vehicles loop and hold at red lights; pedestrians walk back and forth with
    a pause at each end. Neither ever reacts to the ego vehicle.
    """
    kind: ActorKind
    polyline: np.ndarray
    speed: float
    loop: bool
    pause_ticks: int = 0
    stops: tuple = ()  # (arc position of the stop line, node, axis)

    @cached_property
    def cumlen(self) -> np.ndarray:
        seg = np.hypot(*np.diff(self.polyline, axis=0).T)
        return np.concatenate([[0.0], np.cumsum(seg)])

    def pose_at(self, s: float, direction: int = 1) -> Pose:
        cl = self.cumlen
        total = cl[-1]
        s = s % total if self.loop else min(max(s, 0.0), total)
        k = int(np.searchsorted(cl, s, side="right")) - 1
        k = min(max(k, 0), len(self.polyline) - 2)
        seg = self.polyline[k + 1] - self.polyline[k]
        L = math.hypot(seg[0], seg[1])
        t = (s - cl[k]) / L
        p = self.polyline[k] + t * seg
        h = direction * seg / L
        return Pose(p, h)


@dataclass(frozen=True)
class ActorState:
    actor_id: int
    kind: ActorKind
    pose: Pose
    footprint: tuple
    script: ActorScript
    s: float
    direction: int = 1
    pause_left: int = 0


@dataclass(frozen=True)
class WorldState:
    town: TownMap
    config: SimConfig
    tick: int
    ego: Pose
    actors: tuple
    route: np.ndarray  # dense lane centerline the ego is expected to follow
    route_index: int = 0
    collision_flags: frozenset = frozenset()
    contacts: frozenset = frozenset()  # (Collision, actor_id or -1) pairs in contact
    off_lane: bool = False

    @property
    def lights(self) -> dict:
        """Per-intersection phase: ``{node: "ns" | "ew" | "red"}``."""
        out = {}
        for node in self.town.light_offsets:
            if self.town.light_is_green(node, "ns", self.tick):
                out[node] = "ns"
            elif self.town.light_is_green(node, "ew", self.tick):
                out[node] = "ew"
            else:
                out[node] = "red"
        return out

    def serialize(self) -> bytes:
        """Canonical byte encoding of the dynamic state (used for determinism checks)."""
        parts = [struct.pack("<q", self.tick), self.ego.position.tobytes(), self.ego.heading.tobytes(),
                 struct.pack("<d", self.ego.speed), struct.pack("<q", self.route_index),
                 struct.pack("<?", self.off_lane)]
        parts.append(",".join(sorted(f"{c.value}:{i}" for c, i in self.contacts)).encode())
        for a in self.actors:
            parts.append(struct.pack("<qdqq", a.actor_id, a.s, a.direction, a.pause_left))
            parts.append(a.pose.position.tobytes() + a.pose.heading.tobytes())
        return b"".join(parts)

    def digest(self) -> str:
        return hashlib.sha256(self.serialize()).hexdigest()


# world construction ---------------------------------------------------------------------

def _vehicle_script(town: TownMap, loop_nodes, cfg: SimConfig) -> ActorScript:
    seq = list(loop_nodes) + list(loop_nodes[:2])
    pts = route_polyline(town, seq, step=0.5)
    seg = np.hypot(*np.diff(pts, axis=0).T)
    cl = np.concatenate([[0.0], np.cumsum(seg)])
    stops = []
    for ap in town.approaches:
        d = np.hypot(*(pts - ap.stop_point).T)
        k = int(np.argmin(d))
        if d[k] < 0.5:
            tangent = pts[min(k + 1, len(pts) - 1)] - pts[max(k - 1, 0)]
            if np.dot(tangent, ap.direction) > 0:
                stops.append((float(cl[k]), ap.node, ap.axis))
    return ActorScript(ActorKind.VEHICLE, pts, cfg.vehicle_speed, True, 0, tuple(sorted(stops)))


def _pedestrian_script(town: TownMap, edge, frac: float, cfg: SimConfig) -> ActorScript:
    a, b = edge
    pa, pb = town.node_xy(a), town.node_xy(b)
    u = (pb - pa) / np.linalg.norm(pb - pa)
    mid = pa + frac * (pb - pa)
    n = _right(u)
    reach = LANE_OFFSET * 2 + 1.5
    pts = np.stack([mid - reach * n, mid + reach * n])
    return ActorScript(ActorKind.PEDESTRIAN, pts, cfg.pedestrian_speed, False, cfg.pedestrian_pause_ticks)


def spawn_actors(town: TownMap, cfg: SimConfig, seed: int, route=None, clearance: float = 12.0):
    """Scripted actors for one episode. Actors starting within ``clearance`` of the route start are skipped."""
    rng = np.random.default_rng([int(seed), 7919])
    actors = []
    start = None if route is None else np.asarray(route)[0]
    loops = block_loops(town)
    order = rng.permutation(len(loops))
    for k in order[: cfg.n_vehicles]:
        script = _vehicle_script(town, loops[int(k)], cfg)
        s0 = float(rng.uniform(0, script.cumlen[-1]))
        pose = script.pose_at(s0)
        if start is not None and np.linalg.norm(pose.position - start) < clearance:
            continue
        actors.append(ActorState(len(actors), ActorKind.VEHICLE, pose, tuple(cfg.vehicle_half_extents),
                                 script, s0))
    for _ in range(cfg.n_pedestrians):
        edge = town.edges[int(rng.integers(len(town.edges)))]
        frac = float(rng.uniform(0.3, 0.7))
        script = _pedestrian_script(town, edge, frac, cfg)
        s0 = float(rng.uniform(0, script.cumlen[-1]))
        d = 1 if rng.random() < 0.5 else -1
        pose = script.pose_at(s0, d)
        if start is not None and np.linalg.norm(pose.position - start) < clearance:
            continue
        actors.append(ActorState(len(actors), ActorKind.PEDESTRIAN, pose,
                                 tuple(cfg.pedestrian_half_extents), script, s0, d))
    return tuple(actors)


def make_world(town: TownMap, route, cfg: SimConfig | None = None, actors=(), speed: float = 0.0) -> WorldState:
    """Ego placed at the first route point, facing along the route."""
    cfg = cfg or SimConfig()
    route = np.asarray(route, dtype=float)
    k = 1
    while np.linalg.norm(route[k] - route[0]) < 1e-6:
        k += 1
    h = route[k] - route[0]
    ego = Pose(route[0], h / np.linalg.norm(h), speed)
    w = WorldState(town, cfg, 0, ego, tuple(actors), route)
    flags, off, contacts = _infractions(w)
    return replace(w, collision_flags=flags, off_lane=off, contacts=contacts)


# dynamics -------------------------------------------------------------------------------

def integrate_bicycle(pose: Pose, steer: float, throttle: int, cfg: SimConfig, dt: float) -> Pose:
    """Exact constant-input integration. Positive steer turns clockwise (to the right)."""
    v = cfg.cruise_speed * throttle
    if v == 0.0:
        return Pose(pose.position, pose.heading, 0.0)
    omega = -(v / cfg.wheelbase) * math.tan(math.radians(cfg.max_steer_deg) * steer)
    yaw = pose.yaw
    x, y = pose.position
    if abs(omega) < 1e-12:
        x += v * dt * pose.heading[0]
        y += v * dt * pose.heading[1]
        return Pose(np.array([x, y]), pose.heading.copy(), float(v))
    else:
        new_yaw = yaw + omega * dt
        x += (v / omega) * (math.sin(new_yaw) - math.sin(yaw))
        y -= (v / omega) * (math.cos(new_yaw) - math.cos(yaw))
    heading = np.array([math.cos(new_yaw), math.sin(new_yaw)])
    return Pose(np.array([x, y]), heading, float(v))


def _advance_actor(a: ActorState, town: TownMap, tick: int, dt: float) -> ActorState:
    sc = a.script
    if sc.kind is ActorKind.VEHICLE:
        total = sc.cumlen[-1]
        ds = sc.speed * dt
        front = a.footprint[0]
        s_new = a.s + ds
        for s_stop, node, axis in sc.stops:
            # stop line crossed by the front bumper during this tick (loop aware)
            for base in (0.0, total):
                lo = (a.s + front) % total
                target = s_stop + base
                if lo <= target < lo + ds and not town.light_is_green(node, axis, tick):
                    s_new = min(s_new, a.s + (target - lo))
        s_new = s_new % total
        return replace(a, s=s_new, pose=sc.pose_at(s_new))
    # pedestrian: ping-pong with pauses
    if a.pause_left > 0:
        return replace(a, pause_left=a.pause_left - 1)
    total = sc.cumlen[-1]
    s_new = a.s + a.direction * sc.speed * dt
    direction, pause = a.direction, 0
    if s_new >= total:
        s_new, direction, pause = total, -1, sc.pause_ticks
    elif s_new <= 0.0:
        s_new, direction, pause = 0.0, 1, sc.pause_ticks
    pose = sc.pose_at(s_new, a.direction)
    return replace(a, s=s_new, direction=direction, pause_left=pause, pose=pose)


def step(world: WorldState, ego_action, dt: float | None = None) -> WorldState:
    """Advance one tick. ``ego_action`` is any object with ``steer`` and ``throttle``."""
    dt = world.config.dt if dt is None else dt
    if not dt > 0:
        raise ValueError("dt must be positive")
    st, th = float(ego_action.steer), ego_action.throttle
    if not math.isfinite(st) or th not in (0, 1) or abs(st) > 1.0:
        raise InvalidActionError(f"invalid action steer={st} throttle={th}")
    ego = integrate_bicycle(world.ego, st, int(th), world.config, dt)
    actors = tuple(_advance_actor(a, world.town, world.tick, dt) for a in world.actors)
    w = replace(world, tick=world.tick + 1, ego=ego, actors=actors)
    w = replace(w, route_index=_route_progress(w))
    flags, off, contacts = _infractions(w)
    return replace(w, collision_flags=flags, off_lane=off, contacts=contacts)


# infractions ----------------------------------------------------------------------------

def _route_progress(world: WorldState, back: int = 40, ahead: int = 120) -> int:
    lo = max(world.route_index - back, 0)
    hi = min(world.route_index + ahead, len(world.route))
    d = np.hypot(*(world.route[lo:hi] - world.ego.position).T)
    return lo + int(np.argmin(d))


def lane_deviation(world: WorldState) -> float:
    """Distance from the ego center to the nearby stretch of its lane centerline."""
    r = world.route
    i = world.route_index
    lo, hi = max(i - 40, 0), min(i + 120, len(r) - 1)
    a, b = r[lo:hi], r[lo + 1:hi + 1]
    if len(a) == 0:
        return float(np.linalg.norm(r[-1] - world.ego.position))
    ab = b - a
    L2 = np.einsum("ij,ij->i", ab, ab)
    L2[L2 == 0] = 1.0
    t = np.clip(np.einsum("ij,ij->i", world.ego.position - a, ab) / L2, 0.0, 1.0)
    proj = a + t[:, None] * ab
    return float(np.min(np.hypot(*(proj - world.ego.position).T)))


def _corners(pose: Pose, half) -> np.ndarray:
    f, r = pose.heading, pose.right
    hx, hy = half
    return np.array([pose.position + sx * hx * f + sy * hy * r
                     for sx, sy in ((1, 1), (1, -1), (-1, -1), (-1, 1))])


def rects_overlap(pose_a: Pose, half_a, pose_b: Pose, half_b) -> bool:
    """Separating-axis test for two oriented rectangles."""
    ca, cb = _corners(pose_a, half_a), _corners(pose_b, half_b)
    for axis in (pose_a.heading, pose_a.right, pose_b.heading, pose_b.right):
        pa, pb = ca @ axis, cb @ axis
        if pa.max() < pb.min() or pb.max() < pa.min():
            return False
    return True


def footprint_samples(pose: Pose, half, spacing: float = 0.25) -> np.ndarray:
    """Points along the rectangle boundary, no more than ``spacing`` apart."""
    c = _corners(pose, half)
    pts = []
    for k in range(4):
        p0, p1 = c[k], c[(k + 1) % 4]
        n = max(1, int(math.ceil(np.linalg.norm(p1 - p0) / spacing)))
        t = np.arange(n)[:, None] / n
        pts.append(p0 + t * (p1 - p0))
    return np.concatenate(pts)


def _infractions(world: WorldState):
    cfg = world.config
    ego = world.ego
    half = cfg.ego_half_extents
    contacts = set()
    reach = math.hypot(*half) + 3.0
    for a in world.actors:
        if np.linalg.norm(a.pose.position - ego.position) > reach:
            continue
        if rects_overlap(ego, half, a.pose, a.footprint):
            cat = Collision.VEHICLE if a.kind is ActorKind.VEHICLE else Collision.PEDESTRIAN
            contacts.add((cat, a.actor_id))
    if not np.all(world.town.is_drivable(footprint_samples(ego, half))):
        contacts.add((Collision.OTHER, -1))
    flags = frozenset(c for c, _ in contacts)
    off = lane_deviation(world) > world.town.lane_width / 2
    return flags, off, frozenset(contacts)


def infractions(world: WorldState):
    """``(collision_flags, off_lane)`` recomputed from geometry."""
    flags, off, _ = _infractions(world)
    return flags, off


# sensing --------------------------------------------------------------------------------

@dataclass(frozen=True)
class Palette:
    levels: np.ndarray  # background, drivable, vehicle, pedestrian, red, green
    noise: float


def condition_palette(condition_seed: int) -> Palette:
    rng = np.random.default_rng([int(condition_seed), 104729])
    base = np.array([1.5, 4.5, 8.0, 10.0, 6.0, 3.0])
    levels = np.clip(base * rng.uniform(0.75, 1.25) + rng.uniform(-0.6, 0.6, 6), 0.0, DEPTH_SCALE)
    return Palette(levels, float(rng.uniform(0.2, 0.8)))


def quantize(values: np.ndarray) -> np.ndarray:
    """Snap to the 8-bit sensor levels in [0, 12]."""
    codes = np.clip(np.rint(values * (QUANT_LEVELS / DEPTH_SCALE)), 0, QUANT_LEVELS)
    return codes * QUANT_STEP


class Sensor:
    """Egocentric raster renderer; the grid geometry is fixed per :class:`SimConfig`."""

    def __init__(self, cfg: SimConfig):
        self.cfg = cfg
        H, W, c = cfg.grid_h, cfg.grid_w, cfg.cell_size
        rows, cols = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
        self.forward = (cfg.anchor_row - rows) * c
        self.lateral = (cols + 0.5 - W / 2) * c
        self.range = np.hypot(self.forward, self.lateral)
        self.max_range = float(self.range.max())
        self.reach = self.max_range + 3.0

    def cell_world(self, viewpoint: Pose) -> np.ndarray:
        h, r = viewpoint.heading, viewpoint.right
        return (viewpoint.position[None, None, :] + self.forward[..., None] * h
                + self.lateral[..., None] * r)

    def semantic(self, world: WorldState, viewpoint: Pose) -> np.ndarray:
        H, W = self.cfg.grid_h, self.cfg.grid_w
        out = np.zeros((5, H, W), dtype=float)
        pts = self.cell_world(viewpoint)
        out[0] = world.town.is_drivable(pts)
        for a in world.actors:
            if np.linalg.norm(a.pose.position - viewpoint.position) > self.reach:
                continue
            mask = _in_rect(pts, a.pose, a.footprint)
            out[1 if a.kind is ActorKind.VEHICLE else 2][mask] = 1.0
        for ap in world.town.approaches:
            # a signal head is only readable from roughly in front of it
            if float(np.dot(ap.direction, viewpoint.heading)) < LIGHT_FACING_COS:
                continue
            if np.linalg.norm(ap.stop_point - viewpoint.position) > self.reach:
                continue
            patch = Pose(ap.stop_point - 0.5 * LIGHT_PATCH_DEPTH * ap.direction, ap.direction)
            mask = _in_rect(pts, patch, (0.5 * LIGHT_PATCH_DEPTH, LANE_OFFSET))
            green = world.town.light_is_green(ap.node, ap.axis, world.tick)
            out[4 if green else 3][mask] = 1.0
        return out

    def sense(self, world: WorldState, viewpoint: Pose, condition_seed: int, mode=ChannelMode.ASD) -> np.ndarray:
        """Render a ``C x H x W`` frame (channel-major)."""
        mode = ChannelMode(mode)
        sem = self.semantic(world, viewpoint)
        pal = condition_palette(condition_seed)
        cls = np.zeros(sem.shape[1:], dtype=np.int64)
        # later assignments win: pedestrian > vehicle > red > green > drivable > background
        for level_idx, ch in ((1, 0), (5, 4), (4, 3), (2, 1), (3, 2)):
            cls[sem[ch] > 0] = level_idx
        rng = np.random.default_rng([int(condition_seed), int(world.tick)])
        app = pal.levels[cls] + pal.noise * rng.standard_normal(cls.shape)
        frames = [quantize(app)[None], sem]
        if mode is ChannelMode.ASD:
            frames.append(self.depth(sem)[None])
        return np.concatenate(frames, axis=0)

    def depth(self, sem: np.ndarray) -> np.ndarray:
        """Range to occupied cells (actors and non-drivable ground), 12 where nothing is there."""
        occupied = (sem[1] > 0) | (sem[2] > 0) | (sem[0] == 0)
        d = np.full(occupied.shape, DEPTH_SCALE)
        d[occupied] = quantize(DEPTH_SCALE * self.range[occupied] / self.max_range)
        return d


def _in_rect(pts: np.ndarray, pose: Pose, half) -> np.ndarray:
    rel = pts - pose.position
    a = rel @ pose.heading
    b = rel @ pose.right
    return (np.abs(a) <= half[0]) & (np.abs(b) <= half[1])


def sense(world: WorldState, viewpoint: Pose, condition_seed: int, channel_mode=ChannelMode.ASD,
          sensor: Sensor | None = None) -> np.ndarray:
    sensor = sensor or Sensor(world.config)
    return sensor.sense(world, viewpoint, condition_seed, channel_mode)


def red_light_visible(frame: np.ndarray) -> bool:
    return bool(frame[CH_RED].any())


def route_for_nodes(town: TownMap, nodes) -> np.ndarray:
    return route_polyline(town, nodes)


__all__ = [
    "Action", "ActorKind", "ActorScript", "ActorState", "ChannelMode", "Collision", "Palette", "Sensor", "SimConfig",
    "WorldState", "condition_palette", "footprint_samples", "infractions", "integrate_bicycle", "lane_deviation",
    "make_world", "polyline_length", "quantize", "rects_overlap", "red_light_visible", "sense", "spawn_actors",
    "step",
]
