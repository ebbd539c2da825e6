"""Episode recording and persistence, path reconstruction, steer balancing and throttle weights.

Episode file layout (all little-endian)::

    offset 0   magic        6 bytes  b"SGDRV1"
    offset 6   version      uint16   (1)
    offset 8   town_seed    int64
               cond_seed    int64
               dt           float64
               k            uint32   frame-stack depth
               episode_id   uint32
               n_ticks      uint32
               H, W, C      uint16 x3
               n_views      uint16
               n_path       uint32
    offset 56  path         n_path x 2 float64
               records      n_ticks x RECORD_DTYPE (fixed stride, packed)
               frames       n_ticks x n_views x C x H x W uint8, channel-major

Frames hold sensor codes: semantic channels store 0/1, appearance and depth
store ``round(value * 255 / 12)``.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, DegeneratePathError, FormatError, RecordingError
from .expert import ExpertConfig, expert_action, recovery_views
from .geometry import DEFAULT_SPACING, PathSpec, ProgressCursor, discretize_path, route_commands
from .sim import (CH_APPEARANCE, CH_DEPTH, CH_RED, QUANT_STEP, Action, ChannelMode, Collision, Sensor,
                  SimConfig, make_world, spawn_actors, step)
from .town import TownMap

MAGIC = b"SGDRV1"
VERSION = 1
HEADER = struct.Struct("<6sHqqdIIIHHHHI")
N_VIEWS = 3  # center, left recovery, right recovery
N_CHANNELS = 7

RECORD_DTYPE = np.dtype([
    ("tick", "<u4"), ("x", "<f8"), ("y", "<f8"), ("hx", "<f8"), ("hy", "<f8"), ("speed", "<f8"),
    ("cursor", "<i4"), ("angle", "<f8", (N_VIEWS,)), ("steer", "<f8", (N_VIEWS,)),
    ("throttle", "u1", (N_VIEWS,)), ("flags", "u1"), ("red", "u1"),
])

FLAG_BITS = {Collision.VEHICLE: 1, Collision.PEDESTRIAN: 2, Collision.OTHER: 4}
OFF_LANE_BIT = 8

CHANNEL_SCALE = np.ones(N_CHANNELS)
CHANNEL_SCALE[[CH_APPEARANCE, CH_DEPTH]] = QUANT_STEP


def encode_frame(frame: np.ndarray) -> np.ndarray:
    codes = frame / CHANNEL_SCALE[:, None, None]
    return np.rint(codes).astype(np.uint8)


def decode_frames(codes: np.ndarray) -> np.ndarray:
    """uint8 codes ``(..., C, H, W)`` back to sensor values."""
    return codes * CHANNEL_SCALE[:codes.shape[-3], None, None]


@dataclass
class EpisodeLog:
    town_seed: int
    condition_seed: int
    dt: float
    k: int
    episode_id: int
    path: np.ndarray
    records: np.ndarray
    frames: np.ndarray  # uint8 codes (n_ticks, n_views, C, H, W)

    def __post_init__(self):
        if len(self.records) and np.any(np.diff(self.records["tick"].astype(np.int64)) <= 0):
            raise DataError("ticks must be strictly increasing")

    def __len__(self):
        return len(self.records)

    @property
    def positions(self) -> np.ndarray:
        return np.stack([self.records["x"], self.records["y"]], axis=1)

    def to_bytes(self) -> bytes:
        n, v, c, h, w = self.frames.shape
        head = HEADER.pack(MAGIC, VERSION, self.town_seed, self.condition_seed, self.dt, self.k,
                           self.episode_id, n, h, w, c, v, len(self.path))
        return (head + np.ascontiguousarray(self.path, dtype="<f8").tobytes()
                + np.ascontiguousarray(self.records, dtype=RECORD_DTYPE).tobytes()
                + np.ascontiguousarray(self.frames, dtype=np.uint8).tobytes())

    def save(self, path) -> str:
        """Write the episode file and return its sha256."""
        data = self.to_bytes()
        path = Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(data)
        tmp.replace(path)
        return hashlib.sha256(data).hexdigest()

    @classmethod
    def load(cls, path, mmap: bool = True) -> "EpisodeLog":
        path = Path(path)
        with open(path, "rb") as fh:
            raw = fh.read(HEADER.size)
        if len(raw) < HEADER.size:
            raise FormatError(f"{path}: truncated header")
        magic, version, town_seed, cond, dt, k, eid, n, h, w, c, v, npath = HEADER.unpack(raw)
        if magic != MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        if version != VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        off = HEADER.size
        expected = off + 16 * npath + RECORD_DTYPE.itemsize * n + n * v * c * h * w
        if path.stat().st_size != expected:
            raise FormatError(f"{path}: size {path.stat().st_size} != expected {expected}")
        path_pts = np.fromfile(path, dtype="<f8", count=2 * npath, offset=off).reshape(npath, 2)
        off += 16 * npath
        records = np.fromfile(path, dtype=RECORD_DTYPE, count=n, offset=off)
        off += RECORD_DTYPE.itemsize * n
        shape = (n, v, c, h, w)
        if mmap and n:
            frames = np.memmap(path, dtype=np.uint8, mode="r", offset=off, shape=shape)
        else:
            frames = np.fromfile(path, dtype=np.uint8, count=int(np.prod(shape)), offset=off).reshape(shape)
        return cls(town_seed, cond, dt, k, eid, path_pts, records, frames)


def record_episode(town: TownMap, route, expert_cfg: ExpertConfig, sim_cfg: SimConfig, *,
                   condition_seed: int, actor_seed: int, length: int, episode_id: int = 0, k: int = 4,
                   actors: bool = True, stuck_timeout: int = 150, spacing: float = DEFAULT_SPACING,
                   sensor: Sensor | None = None, start_speed: float | None = None) -> EpisodeLog:
    """Drive the expert along ``route`` for ``length`` ticks, logging three viewpoints per tick.

    The episode ends early if the path's final subgoal is reached. Raises
    :class:`RecordingError` if the expert makes no progress for ``stuck_timeout`` ticks.
    """
    path = discretize_path(route, spacing)
    sensor = sensor or Sensor(sim_cfg)
    acts = spawn_actors(town, sim_cfg, actor_seed, route) if actors else ()
    speed = sim_cfg.cruise_speed if start_speed is None else start_speed
    world = make_world(town, route, sim_cfg, acts, speed)
    cursor = ProgressCursor(0)
    records = np.zeros(length, dtype=RECORD_DTYPE)
    frames = np.zeros((length, N_VIEWS, N_CHANNELS, sim_cfg.grid_h, sim_cfg.grid_w), dtype=np.uint8)
    last_progress, best = 0, 0
    n = 0
    for t in range(length):
        action, angle, cursor = expert_action(world, path, cursor, expert_cfg)
        views = [(world.ego, angle, action)] + recovery_views(world, path, cursor, action, expert_cfg)
        rec = records[t]
        rec["tick"] = world.tick
        rec["x"], rec["y"] = world.ego.position
        rec["hx"], rec["hy"] = world.ego.heading
        rec["speed"] = world.ego.speed
        rec["cursor"] = cursor.last_passed_index
        flags = sum(FLAG_BITS[c] for c in world.collision_flags) + (OFF_LANE_BIT if world.off_lane else 0)
        rec["flags"] = flags
        for vi, (pose, ang, act) in enumerate(views):
            frame = sensor.sense(world, pose, condition_seed, ChannelMode.ASD)
            frames[t, vi] = encode_frame(frame)
            rec["angle"][vi] = ang
            rec["steer"][vi] = act.steer
            rec["throttle"][vi] = act.throttle
            if vi == 0:
                rec["red"] = int(frame[CH_RED].any())
        n = t + 1
        if cursor.last_passed_index > best:
            best, last_progress = cursor.last_passed_index, t
        elif t - last_progress > stuck_timeout:
            raise RecordingError(f"expert made no progress for {stuck_timeout} ticks (episode {episode_id})")
        if cursor.last_passed_index >= len(path) - 1:
            break
        world = step(world, action)
    return EpisodeLog(town.seed, condition_seed, sim_cfg.dt, k, episode_id, path.subgoal_points.copy(),
                      records[:n].copy(), frames[:n].copy())


def reconstruct_path(log: EpisodeLog, spacing_min: float = DEFAULT_SPACING) -> PathSpec:
    if len(log) == 0:
        raise DegeneratePathError("empty episode log")
    return discretize_path(log.positions, spacing_min)


# training samples -------------------------------------------------------------------------

SAMPLE_DTYPE = np.dtype([
    ("episode", "<i4"), ("view", "<i4"), ("tick", "<i4"), ("speed", "<f8"), ("angle", "<f8"),
    ("steer", "<f8"), ("throttle", "<i4"), ("red", "u1"), ("weight", "<f8"), ("command", "<i4"),
])


@dataclass(frozen=True)
class TrainingSample:
    observation: np.ndarray  # (k, C, H, W), oldest frame first
    speed: float
    command: float
    label: Action
    weight: float = 1.0
    red_light: bool = False


def sample_table(logs) -> np.ndarray:
    """One row per (episode, viewpoint, tick); rows index into the episode frames."""
    rows = []
    for log in logs:
        n = len(log)
        r = log.records
        commands = route_commands(PathSpec(log.path, 0.0), r["cursor"])
        for v in range(log.frames.shape[1]):
            t = np.zeros(n, dtype=SAMPLE_DTYPE)
            t["episode"] = log.episode_id
            t["view"] = v
            t["tick"] = np.arange(n)
            t["speed"] = r["speed"]
            t["angle"] = r["angle"][:, v]
            t["steer"] = r["steer"][:, v]
            t["throttle"] = r["throttle"][:, v]
            t["red"] = r["red"]
            t["weight"] = 1.0
            t["command"] = commands
            rows.append(t)
    if not rows:
        return np.zeros(0, dtype=SAMPLE_DTYPE)
    return np.concatenate(rows)


def stack_indices(tick: int, k: int) -> np.ndarray:
    """Frame ticks for a k-stack ending at ``tick``; early ticks replicate frame 0."""
    return np.maximum(np.arange(tick - k + 1, tick + 1), 0)


class Dataset:
    """Sample table plus lazily loaded episode frames."""

    def __init__(self, logs, table: np.ndarray | None = None, k: int = 4):
        self.logs = {log.episode_id: log for log in logs}
        self.k = k
        self.table = sample_table(self.logs.values()) if table is None else table

    def __len__(self):
        return len(self.table)

    def observations(self, rows: np.ndarray, mode=ChannelMode.ASD) -> np.ndarray:
        """``(B, k*C, H, W)`` float64 stacks for the given table rows."""
        mode = ChannelMode(mode)
        C = mode.n_channels
        first = next(iter(self.logs.values()))
        _, _, _, H, W = first.frames.shape
        out = np.empty((len(rows), self.k, N_CHANNELS, H, W), dtype=np.uint8)
        for i, row in enumerate(rows):
            log = self.logs[int(row["episode"])]
            out[i] = log.frames[stack_indices(int(row["tick"]), self.k), int(row["view"])]
        vals = decode_frames(out[:, :, :C])
        return vals.reshape(len(rows), self.k * C, H, W)

    def sample(self, i: int) -> TrainingSample:
        row = self.table[i]
        log = self.logs[int(row["episode"])]
        obs = decode_frames(log.frames[stack_indices(int(row["tick"]), self.k), int(row["view"])])
        return TrainingSample(obs, float(row["speed"]), float(row["angle"]),
                              Action(float(row["steer"]), int(row["throttle"])), float(row["weight"]),
                              bool(row["red"]))

    def with_table(self, table: np.ndarray) -> "Dataset":
        return Dataset(self.logs.values(), table, self.k)


# balancing --------------------------------------------------------------------------------

@dataclass(frozen=True)
class BalanceSpec:
    n_bins: int = 199
    cap_per_bin: int = 200
    rng_seed: int = 0
    light_injection_count: int | None = None  # None: 10% of the capped set

    def __post_init__(self):
        if self.n_bins < 3 or self.n_bins % 2 == 0:
            raise ValueError("n_bins must be odd and >= 3")
        if self.cap_per_bin < 1:
            raise ValueError("cap_per_bin must be >= 1")


def steer_bins(steer, n_bins: int) -> np.ndarray:
    """Equal-width bins over [-1, 1]; steer == 1 falls in the last bin."""
    s = np.asarray(steer, dtype=float)
    idx = np.floor((s + 1.0) / 2.0 * n_bins).astype(np.int64)
    return np.clip(idx, 0, n_bins - 1)


def steer_histogram(steer, n_bins: int = 199) -> np.ndarray:
    return np.bincount(steer_bins(steer, n_bins), minlength=n_bins)


def balance_indices(steer, red, spec: BalanceSpec) -> np.ndarray:
    steer = np.asarray(steer, dtype=float)
    red = np.asarray(red, dtype=bool)
    if len(steer) == 0:
        return np.zeros(0, dtype=np.int64)
    rng = np.random.default_rng(spec.rng_seed)
    bins = steer_bins(steer, spec.n_bins)
    keep = []
    for b in range(spec.n_bins):
        members = np.flatnonzero(bins == b)
        if len(members) > spec.cap_per_bin:
            members = np.sort(rng.choice(members, spec.cap_per_bin, replace=False))
        keep.append(members)
    kept = np.concatenate(keep)
    count = spec.light_injection_count
    if count is None:
        count = int(round(0.1 * len(kept)))
    lights = np.flatnonzero(red)
    if count > 0 and len(lights):
        extra = rng.choice(lights, count, replace=count > len(lights))
        kept = np.concatenate([kept, extra])
    return kept[rng.permutation(len(kept))]


def balance(samples, spec: BalanceSpec):
    """Cap every steer bin at ``spec.cap_per_bin`` and re-inject red-light samples.

    Accepts a sample table (structured array) or a sequence of :class:`TrainingSample`.
    """
    if isinstance(samples, np.ndarray):
        return samples[balance_indices(samples["steer"], samples["red"], spec)]
    steer = [s.label.steer for s in samples]
    red = [s.red_light for s in samples]
    return [samples[i] for i in balance_indices(steer, red, spec)]


def throttle_class_weights(throttle) -> tuple:
    """Inverse-frequency weights ``(w_stop, w_go)`` with ``w_c = N / (2 N_c)``."""
    th = np.asarray([s.label.throttle for s in throttle] if not isinstance(throttle, np.ndarray)
                    else (throttle["throttle"] if throttle.dtype.names else throttle))
    n = len(th)
    n1 = int(np.count_nonzero(th == 1))
    n0 = n - n1
    if n0 == 0 or n1 == 0:
        raise DataError("throttle weights need both classes present")
    return n / (2.0 * n0), n / (2.0 * n1)


def apply_class_weights(table: np.ndarray, weights) -> np.ndarray:
    out = table.copy()
    out["weight"] = np.where(out["throttle"] == 1, weights[1], weights[0])
    return out


# index / table persistence --------------------------------------------------------------------

INDEX_NAME = "index.json"
BALANCED_NAME = "balanced.csv"


def write_index(directory, entries, config: dict | None = None) -> Path:
    directory = Path(directory)
    doc = {"format": MAGIC.decode(), "version": VERSION, "episodes": sorted(entries, key=lambda e: e["episode_id"])}
    if config is not None:
        doc["config"] = config
    tmp = directory / (INDEX_NAME + ".tmp")
    tmp.write_text(json.dumps(doc, indent=2, sort_keys=True))
    tmp.replace(directory / INDEX_NAME)
    return directory / INDEX_NAME


def read_index(directory) -> dict:
    p = Path(directory) / INDEX_NAME
    if not p.exists():
        raise DataError(f"no dataset index at {p}")
    return json.loads(p.read_text())


def load_logs(directory, mmap: bool = True):
    directory = Path(directory)
    idx = read_index(directory)
    return [EpisodeLog.load(directory / e["file"], mmap=mmap) for e in idx["episodes"]]


TABLE_COLUMNS = SAMPLE_DTYPE.names


def write_table(path, table: np.ndarray) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(TABLE_COLUMNS) + "\n")
        for row in table:
            fh.write(",".join(repr(row[c].item()) for c in TABLE_COLUMNS) + "\n")


def read_table(path) -> np.ndarray:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].split(",") != list(TABLE_COLUMNS):
        raise FormatError(f"{path}: unexpected sample table header")
    out = np.zeros(len(lines) - 1, dtype=SAMPLE_DTYPE)
    for i, line in enumerate(lines[1:]):
        vals = line.split(",")
        for c, v in zip(TABLE_COLUMNS, vals):
            out[i][c] = float(v) if SAMPLE_DTYPE[c].kind == "f" else int(v)
    return out
