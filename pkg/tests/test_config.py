import json

import pytest

from subgoal_drive.config import RunConfig, config_from_flat, load_config, parse_assignments
from subgoal_drive.errors import ConfigError


def test_defaults():
    cfg = RunConfig()
    assert cfg.data.episodes == 50 and cfg.data.n_bins == 199
    assert cfg.eval.n_paths == 50
    assert cfg.train.lr0 == 1e-3 and cfg.train.lr_decay == 0.9


def test_flat_roundtrip():
    cfg = config_from_flat({"model.arch": "discrete-branched", "model.channels": "as",
                            "model.dims.conv_channels": [8, 8], "eval.actors": False})
    back = config_from_flat(json.loads(cfg.to_json()))
    assert back == cfg


@pytest.mark.parametrize("key", ["bogus", "data.bogus", "model.dims.bogus", "sim", "seed.x"])
def test_unknown_keys_rejected(key):
    with pytest.raises(ConfigError):
        config_from_flat({key: 1})


def test_bad_values_rejected():
    with pytest.raises(ConfigError):
        config_from_flat({"model.arch": "transformer"})
    with pytest.raises(ConfigError):
        config_from_flat({"train.lam": 2.0})
    with pytest.raises(ConfigError):
        config_from_flat({"train.epochs": 1.5})


def test_k_must_agree():
    with pytest.raises(ConfigError):
        config_from_flat({"data.k": 3})
    assert config_from_flat({"data.k": 3, "model.dims.k": 3}).data.k == 3


def test_overrides_win(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("# sweep\ntrain.epochs = 7\nmodel.channels = as\ndata.condition_seeds = 1,3\n")
    cfg = load_config(p, {"train.epochs": 3})
    assert cfg.train.epochs == 3
    assert cfg.model.channels == "as"
    assert cfg.data.condition_seeds == (1, 3)


def test_json_file(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"train": {"batch_size": 8}, "eval.n_paths": 4}))
    cfg = load_config(p)
    assert cfg.train.batch_size == 8 and cfg.eval.n_paths == 4


def test_written_config_reloads(tmp_path):
    cfg = load_config(None, {"seed": 5, "data.actors": False})
    path = cfg.write(tmp_path)
    assert load_config(path) == cfg


def test_missing_file():
    with pytest.raises(ConfigError):
        load_config("/nonexistent/cfg.json")


def test_parse_assignments():
    assert parse_assignments(["a.b = 1", "c=hello", "", "# x", "d = [1, 2]"]) == {"a.b": 1, "c": "hello",
                                                                                  "d": [1, 2]}
    with pytest.raises(ConfigError):
        parse_assignments(["novalue"])
