import csv
import json

import pytest

from subgoal_drive.cli import main
from subgoal_drive.dataset import read_table, write_index

SMALL = ["--set", "data.episodes=2", "--set", "data.length=40", "--set", "data.cap_per_bin=20"]
TINY_MODEL = ["--set", "model.dims.conv_channels=4,4", "--set", "model.dims.feature_dim=8"]
FAST_EVAL = ["--paths", "2", "--set", "eval.path_length=50", "--set", "eval.max_ticks=150"]


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["collect", "--out", str(data), *SMALL]) == 0
    assert main(["balance", "--data", str(data), *SMALL]) == 0
    runs = {}
    for arch, ch in (("angle-input", "as"), ("discrete-branched", "asd")):
        run = root / f"{arch}_{ch}"
        assert main(["train", "--data", str(data), "--out", str(run), "--arch", arch, "--channels", ch,
                     "--epochs", "1", *TINY_MODEL]) == 0
        assert main(["eval", "--run", str(run), *FAST_EVAL]) == 0
        runs[arch] = run
    return root, data, runs


def test_collect_outputs(pipeline):
    _, data, _ = pipeline
    idx = json.loads((data / "index.json").read_text())
    assert len(idx["episodes"]) == 2
    assert (data / "config.json").exists()
    assert all((data / e["file"]).exists() for e in idx["episodes"])


def test_collect_deterministic(pipeline, tmp_path):
    _, data, _ = pipeline
    assert main(["collect", "--out", str(tmp_path), *SMALL]) == 0
    for name in ("episode_0000.sgd", "episode_0001.sgd"):
        assert (tmp_path / name).read_bytes() == (data / name).read_bytes()


def test_balance_outputs(pipeline):
    _, data, _ = pipeline
    for name in ("histogram_pre.csv", "histogram_post.csv"):
        hist = rows(data / name)
        assert len(hist) == 199
    post = [int(r["count"]) for r in rows(data / "histogram_post.csv")]
    assert max(post) <= 20
    assert len(read_table(data / "balanced.csv")) == sum(post)
    assert (data / "histograms.png").stat().st_size > 0
    w = json.loads((data / "class_weights.json").read_text())
    # short actor runs may contain no stop at all; weights are then undefined
    assert set(w) == {"stop", "go"}
    assert all(v is None or v > 0 for v in w.values())


def test_train_outputs(pipeline):
    _, _, runs = pipeline
    run = runs["angle-input"]
    assert (run / "model.ckpt").exists() and (run / "checkpoints" / "epoch_000.ckpt").exists()
    assert (run / "model.ckpt").read_bytes() == (run / "checkpoints" / "epoch_000.ckpt").read_bytes()
    report = rows(run / "train_report.csv")
    assert len(report) == 1 and {"steer_loss", "throttle_loss", "total"} <= set(report[0])
    cfg = json.loads((run / "config.json").read_text())
    assert cfg["model.arch"] == "angle-input" and cfg["train.epochs"] == 1


def test_train_reproducible(pipeline, tmp_path):
    _, data, runs = pipeline
    assert main(["train", "--data", str(data), "--out", str(tmp_path), "--config",
                 str(runs["angle-input"] / "config.json")]) == 0
    assert (tmp_path / "model.ckpt").read_bytes() == (runs["angle-input"] / "model.ckpt").read_bytes()


def test_eval_outputs(pipeline):
    _, _, runs = pipeline
    run = runs["angle-input"]
    rep = json.loads((run / "eval_report.json").read_text())
    assert len(rep["episodes"]) == 2
    assert {"success_rate", "normal_driving_rate", "collisions_per_km"} <= set(rep)
    assert len(list((run / "traces").glob("episode_*.jsonl"))) == 2


def test_eval_expert(tmp_path):
    assert main(["eval", "--policy", "expert", "--out", str(tmp_path), "--no-actors", *FAST_EVAL]) == 0
    rep = json.loads((tmp_path / "eval_report.json").read_text())
    assert rep["success_rate"] == 100.0 and rep["normal_driving_rate"] == 100.0


def test_report(pipeline, tmp_path):
    _, _, runs = pipeline
    assert main(["report", *[str(r) for r in runs.values()], "--out", str(tmp_path)]) == 0
    table = rows(tmp_path / "comparison.csv")
    assert [r["run"] for r in table] == [r.name for r in runs.values()]
    assert {"success_rate", "normal_driving_rate", "collision_vehicle_per_km", "collision_pedestrian_per_km",
            "collision_other_per_km", "size_mb"} <= set(table[0])
    assert len(rows(tmp_path / "failures.csv")) == 2
    assert "mean_vehicle_plus_pedestrian_per_km" in rows(tmp_path / "groups.csv")[0]
    for r in runs.values():
        assert (tmp_path / f"loss_{r.name}.csv").exists()
    assert (tmp_path / "loss_curves.png").exists() and (tmp_path / "metrics.png").exists()


def test_balance_empty(tmp_path):
    write_index(tmp_path, [])
    assert main(["balance", "--data", str(tmp_path)]) == 0
    assert len(read_table(tmp_path / "balanced.csv")) == 0
    assert sum(int(r["count"]) for r in rows(tmp_path / "histogram_post.csv")) == 0


class TestErrors:
    def test_balance_missing_dataset(self, tmp_path):
        assert main(["balance", "--data", str(tmp_path / "nope")]) == 3

    def test_unknown_key(self, tmp_path):
        assert main(["collect", "--out", str(tmp_path), "--set", "data.bogus=1"]) == 2

    def test_train_channel_mismatch(self, pipeline, tmp_path):
        root, data, _ = pipeline
        idx = json.loads((data / "index.json").read_text())
        idx["config"]["channels"] = "as"
        other = tmp_path / "data"
        other.mkdir()
        for f in data.iterdir():
            if f.is_file():
                (other / f.name).write_bytes(f.read_bytes())
        (other / "index.json").write_text(json.dumps(idx))
        assert main(["train", "--data", str(other), "--out", str(tmp_path / "r"), "--channels", "asd"]) == 2

    def test_eval_channel_mismatch(self, pipeline, tmp_path):
        _, _, runs = pipeline
        assert main(["eval", "--run", str(runs["angle-input"]), "--channels", "asd", "--out", str(tmp_path),
                     *FAST_EVAL]) == 2

    def test_eval_missing_checkpoint(self, tmp_path):
        assert main(["eval", "--checkpoint", str(tmp_path / "none.ckpt"), "--out", str(tmp_path)]) == 3

    def test_report_no_runs(self, tmp_path):
        assert main(["report", str(tmp_path), "--out", str(tmp_path / "o")]) == 3

    def test_train_without_balance(self, tmp_path):
        write_index(tmp_path, [])
        assert main(["train", "--data", str(tmp_path), "--out", str(tmp_path / "r")]) == 3
