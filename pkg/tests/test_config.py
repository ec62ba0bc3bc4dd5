import pytest

from futurebev.config import (
    Config,
    apply_override,
    build_config,
    config_from_dict,
    config_hash,
    config_to_dict,
    load_config,
    save_config,
)
from futurebev.errors import ConfigError


def test_defaults_are_valid():
    cfg = build_config()
    assert cfg.world.grid.height == 96
    assert cfg.model.channels == 64
    assert cfg.model.num_queries == 50


def test_yaml_round_trip(tmp_path):
    cfg = build_config("tiny")
    path = tmp_path / "cfg.yaml"
    save_config(cfg, path)
    again = load_config(path)
    assert config_to_dict(again) == config_to_dict(cfg)
    assert config_hash(again) == config_hash(cfg)


def test_presets_change_scale():
    tiny = build_config("tiny")
    paper = build_config("paper")
    assert tiny.world.grid.height < build_config().world.grid.height < paper.world.grid.height


def test_unknown_preset():
    with pytest.raises(ConfigError):
        build_config("enormous")


def test_dotted_override_types():
    cfg = build_config(overrides=["train.lr=1e-3", "model.flow_guided=false", "world.t_out=3"])
    assert cfg.train.lr == pytest.approx(1e-3)
    assert cfg.model.flow_guided is False
    assert cfg.world.t_out == 3


def test_override_rejects_unknown_key():
    cfg = Config()
    with pytest.raises(ConfigError, match="unknown config key"):
        apply_override(cfg, "model.depth=3")


def test_override_rejects_bad_type():
    cfg = Config()
    with pytest.raises(ConfigError):
        apply_override(cfg, "world.t_out=lots")


def test_unknown_file_key_rejected():
    with pytest.raises(ConfigError, match="unknown config key"):
        config_from_dict({"model": {"n_heads": 4}})


def test_validation_catches_head_mismatch():
    with pytest.raises(ConfigError, match="divisible"):
        build_config(overrides=["model.channels=30"])


def test_hash_sensitive_to_values():
    a = build_config()
    b = build_config(overrides=["train.lr=3e-4"])
    assert config_hash(a) != config_hash(b)


def test_preset_plus_file_conflict(tmp_path):
    path = tmp_path / "cfg.yaml"
    save_config(Config(), path)
    with pytest.raises(ConfigError):
        build_config("tiny", config_file=path)
