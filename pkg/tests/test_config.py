import dataclasses

import pytest

from sparsemarl import config as cf
from sparsemarl.trainer import TrainConfig


def test_every_key_documented():
    fields = {f.name for f in dataclasses.fields(TrainConfig)}
    assert set(cf.KEY_DOCS) == fields


def test_unknown_keys_rejected():
    with pytest.raises(cf.ConfigError, match="unknown config keys"):
        cf.config_from_dict({"learning_rate": 1e-3})


def test_type_coercion_and_validation():
    cfg = cf.config_from_dict({"lr": 1, "sparsity": 0.5, "seed": 3})
    assert isinstance(cfg.lr, float) and cfg.lr == 1.0
    with pytest.raises(cf.ConfigError):
        cf.config_from_dict({"seed": 1.5})
    with pytest.raises(cf.ConfigError):
        cf.config_from_dict({"evolve": "yes"})
    with pytest.raises(cf.ConfigError):
        cf.config_from_dict({"sparsity": 1.5})


def test_presets_load_and_build():
    names = cf.list_presets()
    assert {"climb", "penalty", "coopgrid"} <= set(names)
    for name in names:
        cfg = cf.build_config(preset=name)
        assert cfg.env == name
        assert cfg.warmup_steps <= cfg.total_steps


def test_precedence_defaults_preset_file_overrides(tmp_path):
    f = tmp_path / "override.yaml"
    f.write_text("sparsity: 0.5\nseed: 9\n")
    cfg = cf.build_config(preset="climb", config_file=f,
                          overrides={"seed": 42})
    assert cfg.env == "climb"          # from preset
    assert cfg.sparsity == 0.5         # from file
    assert cfg.seed == 42              # override wins
    assert cfg.total_steps == cf.preset_dict("climb")["total_steps"]


def test_missing_config_file():
    with pytest.raises(cf.ConfigError, match="not found"):
        cf.build_config(config_file="/nonexistent/path.yaml")


def test_unknown_preset():
    with pytest.raises(cf.ConfigError, match="unknown preset"):
        cf.build_config(preset="starcraft")


def test_config_hash_stable_and_sensitive():
    a = cf.config_hash(TrainConfig())
    b = cf.config_hash(TrainConfig())
    c = cf.config_hash(TrainConfig(seed=1))
    assert a == b
    assert a != c


def test_config_yaml_round_trips(tmp_path):
    cfg = TrainConfig(sparsity=0.75, operator="max", seed=5)
    f = tmp_path / "cfg.yaml"
    f.write_text(cf.config_yaml(cfg))
    loaded = cf.build_config(config_file=f)
    assert loaded == cfg


def test_describe_keys_mentions_defaults():
    text = cf.describe_keys()
    assert "sparsity" in text and "soft_mellowmax" in text


def test_batch_split_presets_sum_to_32():
    for name, (b1, b2) in cf.BATCH_SPLITS.items():
        assert b1 + b2 == 32
        cfg = cf.build_config(overrides={"batch_split": name})
        assert cfg.batch_offline == b1 and cfg.batch_online == b2
    with pytest.raises(cf.ConfigError, match="batch_split"):
        cf.build_config(overrides={"batch_split": "7:1"})
