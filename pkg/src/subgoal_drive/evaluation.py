"""Closed-loop rollouts over held-out paths and the success / normal-driving / collision metrics."""
from __future__ import annotations

import csv
import json
import math
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .expert import ExpertConfig, expert_action
from .geometry import PathSpec, ProgressCursor, discretize_path, navigation_command, route_command
from .model import ModelParameters, command_input, forward
from .sim import (Action, Collision, Sensor, SimConfig, make_world, spawn_actors, step)
from .town import TownMap, random_route

TRAIN_CONDITION_SEEDS = (1, 3, 5, 7, 9, 12, 14)
EVAL_CONDITION_SEEDS = (2, 4, 6, 8, 10, 11, 13)
CATEGORIES = (Collision.VEHICLE, Collision.PEDESTRIAN, Collision.OTHER)


@dataclass(frozen=True)
class EvalConfig:
    n_paths: int = 50
    path_length: float = 300.0
    max_ticks: int = 900
    goal_radius: float = 3.0
    stuck_timeout: int = 100
    condition_seeds: tuple = EVAL_CONDITION_SEEDS
    train_condition_seeds: tuple = TRAIN_CONDITION_SEEDS
    actors: bool = True
    route_seed: int = 1000
    attribution_window: int = 50
    start_speed: float | None = None  # None: cruise speed
    town_seed: int = 2

    def __post_init__(self):
        object.__setattr__(self, "condition_seeds", tuple(int(s) for s in self.condition_seeds))
        object.__setattr__(self, "train_condition_seeds", tuple(int(s) for s in self.train_condition_seeds))
        if set(self.condition_seeds) & set(self.train_condition_seeds):
            raise ConfigError("evaluation condition seeds must be disjoint from training seeds")
        if self.n_paths < 1 or self.max_ticks < 1 or self.goal_radius <= 0 or self.stuck_timeout < 1:
            raise ConfigError("invalid evaluation config")


@dataclass
class EpisodeResult:
    success: bool
    distance_total: float
    distance_non_normal: float
    collisions: dict  # category value -> count
    termination: str  # "goal" | "timeout" | "stuck"
    ticks: int = 0
    path_index: int = 0
    condition_seed: int = 0
    steer_deviation: float = 0.0
    throttle_deviation: float = 0.0
    failure_cause: str | None = None

    def __post_init__(self):
        if self.distance_non_normal > self.distance_total + 1e-9:
            raise ValueError("non-normal distance exceeds total distance")


@dataclass
class EvalReport:
    success_rate: float
    normal_driving_rate: float | None
    collisions_per_km: dict  # category value -> float or None
    episodes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"success_rate": self.success_rate, "normal_driving_rate": self.normal_driving_rate,
                "collisions_per_km": dict(self.collisions_per_km),
                "episodes": [asdict(e) for e in self.episodes]}

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def read_json(cls, path) -> "EvalReport":
        d = json.loads(Path(path).read_text())
        return cls(d["success_rate"], d["normal_driving_rate"], d["collisions_per_km"],
                   [EpisodeResult(**e) for e in d["episodes"]])

    def summary_row(self) -> dict:
        def fmt(v):
            return "undefined" if v is None else repr(float(v))
        return {"success_rate": fmt(self.success_rate), "normal_driving_rate": fmt(self.normal_driving_rate),
                **{f"collision_{c.value}_per_km": fmt(self.collisions_per_km[c.value]) for c in CATEGORIES}}

    def write_csv(self, path) -> None:
        row = self.summary_row()
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(row))
            w.writeheader()
            w.writerow(row)

    def write_episodes_csv(self, path) -> None:
        fields = ["path_index", "condition_seed", "success", "termination", "ticks", "distance_total",
                  "distance_non_normal", *[f"collisions_{c.value}" for c in CATEGORIES],
                  "steer_deviation", "throttle_deviation", "failure_cause"]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=fields)
            w.writeheader()
            for e in self.episodes:
                d = asdict(e)
                for c in CATEGORIES:
                    d[f"collisions_{c.value}"] = e.collisions.get(c.value, 0)
                w.writerow({k: d[k] for k in fields})


# policies ----------------------------------------------------------------------------------

class ExpertPolicy:
    name = "expert"

    def __init__(self, cfg: ExpertConfig | None = None):
        self.cfg = cfg or ExpertConfig()

    def reset(self, sensor, condition_seed):
        pass

    def act(self, world, path, cursor, angle):
        action, _, _ = expert_action(world, path, cursor, self.cfg)
        return action


class NetworkPolicy:
    """Senses a k-frame stack from the ego pose and runs the network (argmax throttle)."""

    name = "network"

    def __init__(self, model: ModelParameters):
        self.model = model
        self.frames: deque = deque(maxlen=model.dims.k)

    def reset(self, sensor, condition_seed):
        self.sensor = sensor
        self.condition_seed = condition_seed
        self.frames.clear()

    def act(self, world, path, cursor, angle):
        frame = self.sensor.sense(world, world.ego, self.condition_seed, self.model.channel_mode)
        if not self.frames:
            self.frames.extend([frame] * self.model.dims.k)
        else:
            self.frames.append(frame)
        obs = np.concatenate(list(self.frames), axis=0)[None]
        command = route_command(path, cursor.last_passed_index)
        out = forward(self.model, obs, [world.ego.speed], command_input(self.model, [angle], [command]))
        steer = float(np.clip(out.steer[0], -1.0, 1.0))
        return Action(steer, int(out.throttle[0]))


class ConstantPolicy:
    def __init__(self, steer: float = 0.0, throttle: int = 0):
        self.action = Action(steer, throttle)

    def reset(self, sensor, condition_seed):
        pass

    def act(self, world, path, cursor, angle):
        return self.action


# paths -------------------------------------------------------------------------------------

def drive_positions(town: TownMap, route, sim_cfg: SimConfig, expert_cfg: ExpertConfig | None = None,
                    max_ticks: int = 5000, spacing: float = 2.0) -> np.ndarray:
    """Positions of the expert driving ``route`` in an actor-free world until the end of its path."""
    path = discretize_path(route, spacing)
    world = make_world(town, route, sim_cfg)
    cursor = ProgressCursor(0)
    pos = [world.ego.position]
    for _ in range(max_ticks):
        action, _, cursor = expert_action(world, path, cursor, expert_cfg)
        if cursor.last_passed_index >= len(path) - 1:
            break
        world = step(world, action)
        pos.append(world.ego.position)
    return np.asarray(pos)


@dataclass(frozen=True)
class EvalPath:
    index: int
    route: np.ndarray
    path: PathSpec


def generate_eval_paths(town: TownMap, cfg: EvalConfig, sim_cfg: SimConfig,
                        expert_cfg: ExpertConfig | None = None, n: int | None = None):
    """Held-out paths reconstructed from the expert's own positions, as the recorded data would be."""
    n = cfg.n_paths if n is None else n
    out = []
    for i in range(n):
        rng = np.random.default_rng([cfg.route_seed, i])
        _, route = random_route(town, rng, cfg.path_length)
        positions = drive_positions(town, route, sim_cfg, expert_cfg)
        out.append(EvalPath(i, route, discretize_path(positions, 2.0)))
    return out


# rollout -----------------------------------------------------------------------------------

def rollout(policy, town: TownMap, route, path: PathSpec, cfg: EvalConfig, sim_cfg: SimConfig, *,
            condition_seed: int, actor_seed: int = 0, actors: bool | None = None,
            expert_cfg: ExpertConfig | None = None, sensor: Sensor | None = None, trace: list | None = None,
            path_index: int = 0, actor_states=None) -> EpisodeResult:
    """Drive ``policy`` closed-loop along ``path``.

    Collisions and lane departures make a tick non-normal but never end the
    episode; it ends at the goal, after ``max_ticks`` or after
    ``stuck_timeout`` ticks without path progress.
    """
    actors = cfg.actors if actors is None else actors
    sensor = sensor or Sensor(sim_cfg)
    expert_cfg = expert_cfg or ExpertConfig()
    if actor_states is not None:
        acts = tuple(actor_states)
    else:
        acts = spawn_actors(town, sim_cfg, actor_seed, route) if actors else ()
    speed = sim_cfg.cruise_speed if cfg.start_speed is None else cfg.start_speed
    world = make_world(town, route, sim_cfg, acts, speed)
    policy.reset(sensor, condition_seed)
    cursor = ProgressCursor(0)
    n = len(path)
    counts = {c.value: 0 for c in CATEGORIES}
    for c, _ in world.contacts:
        counts[c.value] += 1
    total = non_normal = 0.0
    best, last_progress = 0, 0
    dev_steer, dev_thr = [], []
    termination = "timeout"
    t = 0
    for t in range(cfg.max_ticks):
        angle, cursor = navigation_command(path, cursor, world.ego, expert_cfg.lookahead_min)
        if (cursor.last_passed_index >= n - 1
                and np.linalg.norm(world.ego.position - path.final_point) <= cfg.goal_radius):
            termination = "goal"
            break
        if cursor.last_passed_index > best:
            best, last_progress = cursor.last_passed_index, t
        elif t - last_progress >= cfg.stuck_timeout:
            termination = "stuck"
            break
        action = policy.act(world, path, cursor, angle)
        ref, _, _ = expert_action(world, path, cursor, expert_cfg)
        dev_steer.append(abs(action.steer - ref.steer) / 2.0)
        dev_thr.append(float(action.throttle != ref.throttle))
        nxt = step(world, action)
        d = float(np.linalg.norm(nxt.ego.position - world.ego.position))
        total += d
        if nxt.collision_flags or nxt.off_lane:
            non_normal += d
        for c, _ in nxt.contacts - world.contacts:
            counts[c.value] += 1
        if trace is not None:
            trace.append({"tick": world.tick, "x": float(world.ego.position[0]), "y": float(world.ego.position[1]),
                          "yaw": world.ego.yaw, "speed": world.ego.speed, "angle": angle,
                          "steer": action.steer, "throttle": action.throttle,
                          "expert_steer": ref.steer, "expert_throttle": ref.throttle,
                          "collisions": sorted(c.value for c in nxt.collision_flags), "off_lane": nxt.off_lane})
        world = nxt
    else:
        t = cfg.max_ticks
    success = termination == "goal"
    w = cfg.attribution_window
    sd = float(np.mean(dev_steer[-w:])) if dev_steer else 0.0
    td = float(np.mean(dev_thr[-w:])) if dev_thr else 0.0
    cause = None if success else ("steer" if sd >= td else "throttle")
    return EpisodeResult(success, total, min(non_normal, total), counts, termination, t, path_index,
                         int(condition_seed), sd, td, cause)


def aggregate(results) -> EvalReport:
    results = list(results)
    if not results:
        raise ValueError("aggregate needs at least one episode result")
    ok = [r for r in results if r.success]
    success_rate = 100.0 * len(ok) / len(results)
    dist = math.fsum(r.distance_total for r in ok)
    if not ok or dist <= 0.0:
        return EvalReport(success_rate, None, {c.value: None for c in CATEGORIES}, results)
    normal = math.fsum(r.distance_total - r.distance_non_normal for r in ok)
    ndr = 100.0 * normal / dist
    km = dist / 1000.0
    per_km = {c.value: sum(r.collisions.get(c.value, 0) for r in ok) / km for c in CATEGORIES}
    return EvalReport(success_rate, ndr, per_km, results)


def _eval_one(args):
    policy, town, ep, cfg, sim_cfg, cond, actor_seed, expert_cfg, want_trace = args
    trace = [] if want_trace else None
    res = rollout(policy, town, ep.route, ep.path, cfg, sim_cfg, condition_seed=cond, actor_seed=actor_seed,
                  expert_cfg=expert_cfg, trace=trace, path_index=ep.index)
    return res, trace


def evaluate(policy, town: TownMap, paths, cfg: EvalConfig, sim_cfg: SimConfig,
             expert_cfg: ExpertConfig | None = None, jobs: int = 1, traces: bool = False):
    """Roll out every path (condition seeds cycle over ``cfg.condition_seeds``).

    Returns ``(EvalReport, traces)``; ``traces`` is a list of per-episode tick
    dicts, or ``None`` entries when tracing is off.
    """
    work = [(policy, town, ep, cfg, sim_cfg, cfg.condition_seeds[ep.index % len(cfg.condition_seeds)],
             cfg.route_seed + ep.index, expert_cfg, traces) for ep in paths]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            out = list(pool.map(_eval_one, work))
    else:
        out = [_eval_one(w) for w in work]
    return aggregate([r for r, _ in out]), [tr for _, tr in out]
