"""Glue shared by the CLI and the acceptance suite: collecting, balancing and loading datasets."""
from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import (BalanceSpec, Dataset, apply_class_weights, balance, record_episode,
                      sample_table, throttle_class_weights, write_index)
from .errors import ConfigError, DataError, RecordingError
from .evaluation import TRAIN_CONDITION_SEEDS
from .expert import ExpertConfig
from .sim import SimConfig
from .town import TownMap, generate_town, random_route

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DataConfig:
    episodes: int = 50
    length: int = 500  # ticks per episode
    town_seed: int = 1
    route_seed: int = 0
    condition_seeds: tuple = TRAIN_CONDITION_SEEDS
    actors: bool = True
    k: int = 4
    n_bins: int = 199
    cap_per_bin: int = 200
    light_injection: int | None = None
    balance_seed: int = 0
    max_attempts: int = 5

    def __post_init__(self):
        object.__setattr__(self, "condition_seeds", tuple(int(s) for s in self.condition_seeds))
        if self.episodes < 0 or self.length < 1 or self.k < 1 or not self.condition_seeds:
            raise ConfigError("invalid data config")

    def balance_spec(self) -> BalanceSpec:
        return BalanceSpec(self.n_bins, self.cap_per_bin, self.balance_seed, self.light_injection)


def episode_name(i: int) -> str:
    return f"episode_{i:04d}.sgd"


def collect_one(town: TownMap, i: int, cfg: DataConfig, sim_cfg: SimConfig, expert_cfg: ExpertConfig):
    """Record episode ``i``; a stuck expert retries on a fresh route (deterministically)."""
    cond = cfg.condition_seeds[i % len(cfg.condition_seeds)]
    route_len = cfg.length * sim_cfg.cruise_speed * sim_cfg.dt + 20.0
    for attempt in range(cfg.max_attempts):
        rng = np.random.default_rng([cfg.route_seed, i, attempt])
        _, route = random_route(town, rng, route_len)
        try:
            return record_episode(town, route, expert_cfg, sim_cfg, condition_seed=cond,
                                  actor_seed=cfg.route_seed * 100003 + i * 31 + attempt, length=cfg.length,
                                  episode_id=i, k=cfg.k, actors=cfg.actors)
        except RecordingError as exc:
            log.warning("episode %d attempt %d: %s", i, attempt, exc)
    raise RecordingError(f"episode {i}: expert stuck on {cfg.max_attempts} routes")


def _collect_job(args):
    town, i, cfg, sim_cfg, expert_cfg, out_dir = args
    ep = collect_one(town, i, cfg, sim_cfg, expert_cfg)
    digest = ep.save(Path(out_dir) / episode_name(i))
    return {"file": episode_name(i), "episode_id": i, "condition_seed": ep.condition_seed,
            "ticks": len(ep), "sha256": digest}


def collect(out_dir, cfg: DataConfig, sim_cfg: SimConfig | None = None, expert_cfg: ExpertConfig | None = None,
            jobs: int = 1, town: TownMap | None = None, extra: dict | None = None):
    """Record ``cfg.episodes`` episodes into ``out_dir`` and write the index last."""
    sim_cfg = sim_cfg or SimConfig()
    expert_cfg = expert_cfg or ExpertConfig()
    town = town or generate_town(cfg.town_seed, sim_cfg.town_size)
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {out_dir}: {exc}") from exc
    town.save(out_dir / "town.txt")
    work = [(town, i, cfg, sim_cfg, expert_cfg, str(out_dir)) for i in range(cfg.episodes)]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            entries = list(pool.map(_collect_job, work))
    else:
        entries = [_collect_job(w) for w in work]
    write_index(out_dir, entries, {"town_seed": cfg.town_seed, "town_digest": town.digest(), **(extra or {})})
    return entries


def balanced_table(logs, cfg: DataConfig):
    """Balance the raw sample table and attach throttle class weights.

    Returns ``(raw_table, balanced_table, class_weights)``; weights are ``None``
    when a throttle class is missing (all samples then keep weight 1).
    """
    raw = sample_table(logs)
    bal = balance(raw, cfg.balance_spec())
    try:
        weights = throttle_class_weights(bal["throttle"])
    except DataError:
        weights = None
    if weights is not None:
        bal = apply_class_weights(bal, weights)
    return raw, bal, weights


def build_dataset(logs, cfg: DataConfig) -> Dataset:
    logs = list(logs)
    _, bal, _ = balanced_table(logs, cfg)
    return Dataset(logs, bal, cfg.k)
