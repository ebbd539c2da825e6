"""Command-line entry point: collect -> balance -> train -> eval -> report."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import plotting
from .config import RESOLVED_NAME, RunConfig, load_config, parse_value
from .dataset import (BALANCED_NAME, Dataset, load_logs, read_index, read_table, steer_histogram, write_table)
from .errors import ConfigError, DataError, RuntimeFailure, SubgoalDriveError
from .evaluation import CATEGORIES, EvalReport, ExpertPolicy, NetworkPolicy, evaluate, generate_eval_paths
from .model import ModelParameters, build_model, model_size_mb
from .pipeline import balanced_table, collect
from .sim import ChannelMode
from .town import generate_town
from .training import TrainReport, train

log = logging.getLogger("subgoal_drive")

CHECKPOINT_NAME = "model.ckpt"
TRAIN_REPORT_NAME = "train_report.csv"
EVAL_REPORT_NAME = "eval_report.json"


def _overrides(args) -> dict:
    out = {}
    for item in args.set or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = parse_value(v.strip())
    flag_keys = {"episodes": "data.episodes", "town_seed": None, "arch": "model.arch",
                 "channels": "model.channels", "epochs": "train.epochs", "paths": "eval.n_paths"}
    for attr, key in flag_keys.items():
        v = getattr(args, attr, None)
        if v is None:
            continue
        if attr == "town_seed":
            key = "eval.town_seed" if args.command == "eval" else "data.town_seed"
        out[key] = v
    if getattr(args, "seed", None) is not None:
        # the global seed drives weight init and minibatch shuffling
        out.update({"seed": args.seed, "model.seed": args.seed, "train.rng_seed": args.seed})
    if getattr(args, "no_actors", False):
        out["eval.actors" if args.command == "eval" else "data.actors"] = False
    return out


def _config(args, base_dir=None) -> RunConfig:
    values_file = args.config
    if values_file is None and base_dir is not None and (Path(base_dir) / RESOLVED_NAME).exists():
        values_file = Path(base_dir) / RESOLVED_NAME
    return load_config(values_file, _overrides(args))


def _mkdir(path) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {p}: {exc}") from exc
    return p


# commands -----------------------------------------------------------------------------------

def cmd_collect(args) -> int:
    cfg = _config(args)
    out = _mkdir(args.out)
    town = generate_town(cfg.data.town_seed, cfg.sim.town_size)
    entries = collect(out, cfg.data, cfg.sim, cfg.expert, jobs=args.jobs, town=town,
                      extra={"channels": ChannelMode.ASD.value, "k": cfg.data.k})
    cfg.write(out)
    print(f"collected {len(entries)} episodes ({sum(e['ticks'] for e in entries)} ticks) in {out}")
    return 0


def _write_histogram(path, counts) -> None:
    n = len(counts)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin", "lo", "hi", "count"])
        for b, c in enumerate(counts):
            w.writerow([b, repr(-1.0 + 2.0 * b / n), repr(-1.0 + 2.0 * (b + 1) / n), int(c)])


def cmd_balance(args) -> int:
    data = Path(args.data)
    cfg = _config(args)
    read_index(data)
    logs = load_logs(data)
    raw, bal, weights = balanced_table(logs, cfg.data)
    out = _mkdir(args.out or data)
    write_table(out / BALANCED_NAME, bal)
    pre = steer_histogram(raw["steer"], cfg.data.n_bins)
    post = steer_histogram(bal["steer"], cfg.data.n_bins)
    _write_histogram(out / "histogram_pre.csv", pre)
    _write_histogram(out / "histogram_post.csv", post)
    (out / "class_weights.json").write_text(json.dumps(
        {"stop": None if weights is None else weights[0], "go": None if weights is None else weights[1]}, indent=2))
    if len(raw):
        plotting.steer_histograms(pre, post, out / "histograms.png")
    cfg.write(out)
    print(f"balanced {len(raw)} -> {len(bal)} samples; class weights {weights}")
    return 0


def _load_dataset(data: Path, cfg: RunConfig) -> Dataset:
    idx = read_index(data)
    meta = idx.get("config", {})
    mode = ChannelMode(cfg.model.channels)
    stored = ChannelMode(meta.get("channels", ChannelMode.ASD.value))
    if mode.n_channels > stored.n_channels:
        raise ConfigError(f"model channels {mode.value} need data the dataset ({stored.value}) does not store")
    if int(meta.get("k", cfg.data.k)) != cfg.model.dims.k:
        raise ConfigError(f"dataset k={meta.get('k')} does not match model k={cfg.model.dims.k}")
    table_path = data / BALANCED_NAME
    if not table_path.exists():
        raise DataError(f"{table_path} not found; run 'balance' first")
    table = read_table(table_path)
    if len(table) == 0:
        raise DataError("balanced dataset is empty")
    return Dataset(load_logs(data), table, cfg.model.dims.k)


def cmd_train(args) -> int:
    cfg = _config(args)
    data = Path(args.data)
    ds = _load_dataset(data, cfg)
    out = _mkdir(args.out)
    params = build_model(cfg.model.arch, cfg.model.channels, cfg.model.dims, cfg.model.seed)
    model, report = train(params, ds, cfg.train, checkpoint_dir=out / "checkpoints",
                          progress=lambda r: print(f"epoch {r['epoch']}: total={r['total']:.5f}"))
    model.save(out / CHECKPOINT_NAME)
    report.write_csv(out / TRAIN_REPORT_NAME)
    cfg.write(out)
    print(f"trained {cfg.model.arch}/{cfg.model.channels} ({model.count} parameters) in {report.wall_time:.1f}s")
    return 0


def cmd_eval(args) -> int:
    run = Path(args.run) if args.run else None
    cfg = _config(args, run)
    if args.policy == "expert":
        policy = ExpertPolicy(cfg.expert)
    else:
        ckpt = Path(args.checkpoint) if args.checkpoint else (run / CHECKPOINT_NAME if run else None)
        if ckpt is None:
            raise ConfigError("eval needs --checkpoint, --run or --policy expert")
        if not ckpt.exists():
            raise DataError(f"checkpoint not found: {ckpt}")
        model = ModelParameters.load(ckpt)
        if model.channel_mode != ChannelMode(cfg.model.channels):
            raise ConfigError(f"checkpoint channel mode {model.channel_mode.value} does not match the sensing "
                              f"config ({cfg.model.channels})")
        policy = NetworkPolicy(model)
    out = _mkdir(args.out or run or ".")
    town = generate_town(cfg.eval.town_seed, cfg.sim.town_size)
    paths = generate_eval_paths(town, cfg.eval, cfg.sim, cfg.expert)
    report, traces = evaluate(policy, town, paths, cfg.eval, cfg.sim, cfg.expert, jobs=args.jobs, traces=True)
    report.write_json(out / EVAL_REPORT_NAME)
    report.write_csv(out / "eval_summary.csv")
    report.write_episodes_csv(out / "eval_episodes.csv")
    tdir = _mkdir(out / "traces")
    for ep, tr in zip(report.episodes, traces):
        with open(tdir / f"episode_{ep.path_index:04d}.jsonl", "w") as fh:
            for rec in tr:
                fh.write(json.dumps(rec) + "\n")
    if args.policy == "expert" or not run or out != run:
        cfg.write(out)
    row = report.summary_row()
    print(" ".join(f"{k}={v}" for k, v in row.items()))
    return 0


COMPARISON_FIELDS = ["run", "arch", "channels", "success_rate", "normal_driving_rate",
                     *[f"collision_{c.value}_per_km" for c in CATEGORIES], "size_mb"]


def _run_row(run: Path) -> dict:
    rep = EvalReport.read_json(run / EVAL_REPORT_NAME)
    row = {"run": run.name, "arch": "", "channels": "", "size_mb": ""}
    if (run / CHECKPOINT_NAME).exists():
        m = ModelParameters.load(run / CHECKPOINT_NAME)
        row.update(arch=m.arch.value, channels=m.channel_mode.value, size_mb=f"{model_size_mb(m):.4f}")
    else:
        row.update(arch="expert")
    row.update(rep.summary_row())
    return row, rep


def _mean(vals):
    vals = [v for v in vals if v is not None]
    return "undefined" if not vals else repr(float(np.mean(vals)))


def cmd_report(args) -> int:
    runs = [Path(r) for r in args.runs if (Path(r) / EVAL_REPORT_NAME).exists()]
    if not runs:
        raise DataError("no evaluated runs found (expected eval_report.json in each run directory)")
    out = _mkdir(args.out)
    rows, reports, curves = [], {}, {}
    for run in runs:
        row, rep = _run_row(run)
        rows.append(row)
        reports[run.name] = (row, rep)
        if (run / TRAIN_REPORT_NAME).exists():
            tr = TrainReport.read_csv(run / TRAIN_REPORT_NAME)
            curves[run.name] = tr.rows
            tr.write_csv(out / f"loss_{run.name}.csv")
    with open(out / "comparison.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=COMPARISON_FIELDS)
        w.writeheader()
        w.writerows(rows)
    with open(out / "failures.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "episodes", "goal", "timeout", "stuck", "steer_caused", "throttle_caused"])
        for name, (_, rep) in reports.items():
            eps = rep.episodes
            w.writerow([name, len(eps), *[sum(e.termination == t for e in eps) for t in ("goal", "timeout", "stuck")],
                        sum(e.failure_cause == "steer" for e in eps), sum(e.failure_cause == "throttle" for e in eps)])
    # per (arch, channels) means over seeds; the vehicle+pedestrian column is the depth comparison
    groups = {}
    for name, (row, rep) in reports.items():
        groups.setdefault((row["arch"], row["channels"]), []).append(rep)
    with open(out / "groups.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["arch", "channels", "runs", "mean_success_rate", "mean_normal_driving_rate",
                    "mean_vehicle_plus_pedestrian_per_km"])
        for (arch, ch), reps in sorted(groups.items()):
            vp = [None if r.collisions_per_km["vehicle"] is None
                  else r.collisions_per_km["vehicle"] + r.collisions_per_km["pedestrian"] for r in reps]
            w.writerow([arch, ch, len(reps), _mean([r.success_rate for r in reps]),
                        _mean([r.normal_driving_rate for r in reps]), _mean(vp)])
    if curves:
        plotting.loss_curves(curves, out / "loss_curves.png")
    plotting.metric_bars(rows, out / "metrics.png")
    print(f"report for {len(rows)} runs written to {out}")
    return 0


# parser ---------------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="subgoal-drive", description="Subgoal-angle imitation driving pipeline.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, jobs=False):
        sp.add_argument("--config", help="JSON or key=value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
        sp.add_argument("--seed", type=int)
        if jobs:
            sp.add_argument("--jobs", type=int, default=1, help="parallel worker processes")

    sp = sub.add_parser("collect", help="record expert episodes in the training town")
    common(sp, jobs=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--episodes", type=int)
    sp.add_argument("--town-seed", type=int)
    sp.add_argument("--no-actors", action="store_true")
    sp.set_defaults(func=cmd_collect)

    sp = sub.add_parser("balance", help="balance steer bins and compute throttle class weights")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_balance)

    sp = sub.add_parser("train", help="train a model on a balanced dataset")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--arch", choices=["angle-branched", "angle-input", "discrete-branched"])
    sp.add_argument("--channels", choices=["as", "asd"])
    sp.add_argument("--epochs", type=int)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="closed-loop evaluation on held-out paths")
    common(sp, jobs=True)
    sp.add_argument("--run", help="training run directory (uses its config and model.ckpt)")
    sp.add_argument("--checkpoint")
    sp.add_argument("--policy", choices=["network", "expert"], default="network")
    sp.add_argument("--out")
    sp.add_argument("--paths", type=int)
    sp.add_argument("--town-seed", type=int)
    sp.add_argument("--channels", choices=["as", "asd"])
    sp.add_argument("--no-actors", action="store_true")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("report", help="merge evaluated runs into comparison tables and figures")
    sp.add_argument("runs", nargs="+")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except SubgoalDriveError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return RuntimeFailure.exit_code


if __name__ == "__main__":
    sys.exit(main())
