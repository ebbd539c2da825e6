"""Behavior-cloning objective and the Adam training loop with per-epoch learning-rate decay."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import NonFiniteLossError, RuntimeFailure
from .model import LossValue, ModelParameters, NetworkOutput, backward, command_input, compute_loss
from .nn import Adam
from .sim import Action

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 0.5
    lr0: float = 1e-3
    lr_decay: float = 0.9
    batch_size: int = 16
    epochs: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")
        if not self.lr0 > 0 or not 0 < self.lr_decay <= 1:
            raise ValueError("need lr0 > 0 and 0 < lr_decay <= 1")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")


def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    return cfg.lr0 * cfg.lr_decay ** epoch


def epoch_permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([int(seed), int(epoch)]).permutation(n)


def loss(output: NetworkOutput, label, lam: float, weights=None) -> LossValue:
    """Batch-mean loss against an :class:`Action`, a list of them, or a ``(steer, throttle)`` pair of arrays."""
    if isinstance(label, Action):
        label = [label]
    if isinstance(label, (list, tuple)) and label and isinstance(label[0], Action):
        steer = np.array([a.steer for a in label])
        throttle = np.array([a.throttle for a in label])
    else:
        steer, throttle = label
    steer, throttle = np.atleast_1d(steer), np.atleast_1d(throttle)
    if weights is not None:
        weights = np.broadcast_to(np.asarray(weights, dtype=np.float64), steer.shape)
    return compute_loss(output, steer, throttle, weights, lam)


@dataclass
class TrainReport:
    rows: list = field(default_factory=list)  # dicts: epoch, steer_loss, throttle_loss, total, lr
    wall_time: float = 0.0
    checkpoints: list = field(default_factory=list)

    CSV_FIELDS = ("epoch", "steer_loss", "throttle_loss", "total", "lr")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=self.CSV_FIELDS)
            w.writeheader()
            for row in self.rows:
                w.writerow({k: repr(row[k]) if isinstance(row[k], float) else row[k] for k in self.CSV_FIELDS})

    @classmethod
    def read_csv(cls, path) -> "TrainReport":
        with open(path, newline="") as fh:
            rows = [{"epoch": int(r["epoch"]), **{k: float(r[k]) for k in cls.CSV_FIELDS[1:]}}
                    for r in csv.DictReader(fh)]
        return cls(rows)


class TrainingDiverged(RuntimeFailure):
    def __init__(self, message, report: TrainReport):
        super().__init__(message)
        self.report = report


def train(params: ModelParameters, dataset, cfg: TrainConfig, checkpoint_dir=None, progress=None):
    """Minibatch Adam over ``dataset`` (a :class:`~subgoal_drive.dataset.Dataset`).

    Returns ``(trained_params, TrainReport)``; the input parameters are not modified.
    A checkpoint is written after every epoch when ``checkpoint_dir`` is given.
    """
    model = params.copy()
    table = dataset.table
    n = len(table)
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    opt = Adam(cfg.beta1, cfg.beta2, cfg.eps)
    report = TrainReport()
    t_start = time.perf_counter()
    if checkpoint_dir is not None:
        checkpoint_dir = Path(checkpoint_dir)
        checkpoint_dir.mkdir(parents=True, exist_ok=True)
    for epoch in range(cfg.epochs):
        lr = learning_rate(cfg, epoch)
        perm = epoch_permutation(n, cfg.rng_seed, epoch)
        sums = np.zeros(3)
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            rows = table[idx]
            obs = dataset.observations(rows, model.channel_mode)
            try:
                lv, grads = backward(model, obs, rows["speed"],
                                     command_input(model, rows["angle"], rows["command"]), rows["steer"],
                                     rows["throttle"], rows["weight"], cfg.lam)
            except NonFiniteLossError as exc:
                report.wall_time = time.perf_counter() - t_start
                raise TrainingDiverged(f"epoch {epoch}: {exc} (dataset row {int(idx[exc.sample_index])})",
                                       report) from exc
            opt.step(model.params, grads, lr)
            sums += len(idx) * np.array([lv.steer, lv.throttle, lv.total])
        steer_l, thr_l, total = sums / n
        report.rows.append({"epoch": epoch, "steer_loss": float(steer_l), "throttle_loss": float(thr_l),
                            "total": float(total), "lr": lr})
        log.info("epoch %d lr=%.6f steer=%.5f throttle=%.5f total=%.5f", epoch, lr, steer_l, thr_l, total)
        if progress is not None:
            progress(report.rows[-1])
        if checkpoint_dir is not None:
            p = checkpoint_dir / f"epoch_{epoch:03d}.ckpt"
            model.save(p)
            report.checkpoints.append(str(p))
    report.wall_time = time.perf_counter() - t_start
    return model, report
