import json

import pytest

from mmrobust.config import (
    ConfigError,
    apply_override,
    canonical,
    config_hash,
    default_config,
    dump_config,
    load_config,
    parse_value,
    train_config,
)
from mmrobust.report import CSV_SCHEMAS, csv_text, read_table, write_json, write_table


def test_defaults_validate():
    cfg = load_config()
    assert cfg == default_config()
    t = train_config(cfg)
    assert t.dropout_p == 0.3 and t.forward_noise_std == 0.3 and t.awp_gamma == 0.1 and t.beta_rob == 0.25


def test_file_and_overrides(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"seed": 3, "train": {"method": "beta"}, "model": {"kind": "cnn", "channels": [4, 4]}}))
    cfg = load_config(p, [("train.epochs", 2), ("train.attack.n_steps", 4)])
    assert cfg["seed"] == 3 and cfg["train"]["method"] == "beta" and cfg["train"]["epochs"] == 2
    assert cfg["train"]["attack"]["n_steps"] == 4 and cfg["train"]["attack"]["zeta_attack"] == 0.1
    assert cfg["model"]["channels"] == [4, 4]
    assert train_config(cfg).seed == 3


@pytest.mark.parametrize(
    "patch",
    [
        {"bogus": 1},
        {"train": {"bogus": 1}},
        {"train": {"method": "sgd"}},
        {"train": {"attack": {"bogus": 1}}},
        {"data": {"source": "mnist"}},
        {"model": {"kind": "rnn"}},
    ],
)
def test_invalid_configs(tmp_path, patch):
    p = tmp_path / "c.json"
    p.write_text(json.dumps(patch))
    with pytest.raises(ConfigError):
        load_config(p)


def test_unreadable_configs(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "none.json")
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ConfigError, match="JSON"):
        load_config(tmp_path / "bad.json")
    with pytest.raises(ConfigError):
        apply_override(default_config(), "seed.x", 1)


def test_parse_value():
    assert parse_value("3") == 3 and parse_value("0.5") == 0.5 and parse_value("true") is True
    assert parse_value("[0, 0.1]") == [0, 0.1] and parse_value("beta") == "beta"


def test_round_trip_hash(tmp_path):
    cfg = load_config(None, [("train.method", "beta"), ("eval.zetas", [0, 0.1])])
    p = tmp_path / "c.json"
    p.write_text(dump_config(cfg))
    again = load_config(p)
    assert config_hash(again) == config_hash(cfg) and canonical(again) == canonical(cfg)
    assert config_hash(apply_override(cfg, "seed", 9)) != config_hash(cfg)


def test_csv_headers_pinned():
    assert CSV_SCHEMAS == {
        "mismatch": ("zeta", "mean", "std", "min"),
        "attack": ("zeta", "task_pga", "kl_pga", "random"),
        "landscape": ("alpha", "mean_loss", "trial", "loss"),
        "verify": ("zeta", "verified_accuracy"),
        "membrane": ("bin_lo", "bin_hi", "count"),
        "history": ("epoch", "train_loss", "val_acc"),
    }


def test_csv_text_golden():
    assert csv_text(("zeta", "mean"), [(0.0, 0.5), (0.1, 1 / 3)]) == "zeta,mean\n0.0,0.5\n0.1,0.3333333333333333\n"
    with pytest.raises(ValueError):
        csv_text(("a", "b"), [(1,)])


def test_table_and_json_files(tmp_path):
    write_table(tmp_path / "v.csv", "verify", [(0.0, 0.9), (0.01, 0.5)])
    header, rows = read_table(tmp_path / "v.csv")
    assert header == ["zeta", "verified_accuracy"] and rows == [["0.0", "0.9"], ["0.01", "0.5"]]
    write_json(tmp_path / "m.json", {"b": 1, "a": [1.5]})
    assert (tmp_path / "m.json").read_text() == '{\n  "a": [\n    1.5\n  ],\n  "b": 1\n}\n'
    assert not [p for p in tmp_path.iterdir() if p.suffix == ".tmp"]
