import pytest

from sfod.config import DEFAULTS, DOCS, ConfigError, RunConfig, parse_assignment
from sfod.engine import AdaptConfig, PretrainConfig


def test_every_default_is_documented():
    assert set(DEFAULTS) == set(DOCS)


def test_defaults_match_engine_dataclasses():
    rc = RunConfig()
    a = AdaptConfig.from_run_config(rc)
    p = PretrainConfig.from_run_config(rc)
    assert a == AdaptConfig(seed=0)
    assert p == PretrainConfig(seed=0)


def test_precedence_file_then_overrides(tmp_path):
    f = tmp_path / "c.toml"
    f.write_text("engine.tau = 0.8\nengine.beta = 0.5\n[pretrain]\nlr = 0.01\n")
    rc = RunConfig.load(f, {"engine.tau": "0.75"})
    assert rc["engine.tau"] == 0.75
    assert rc["pretrain.lr"] == 0.01
    assert rc["engine.beta"] == 0.5
    assert rc["engine.eta"] == DEFAULTS["engine.eta"]


def test_unknown_and_bad_values_rejected(tmp_path):
    with pytest.raises(ConfigError, match="unknown"):
        RunConfig({"engine.taux": 1})
    with pytest.raises(ConfigError):
        RunConfig({"engine.epochs": "three"})
    with pytest.raises(ConfigError):
        RunConfig({"engine.epochs": 2.5})
    with pytest.raises(ConfigError):
        RunConfig({"engine.msp": "maybe"})
    bad = tmp_path / "bad.toml"
    bad.write_text("engine.tau = = 1")
    with pytest.raises(ConfigError, match="bad.toml"):
        RunConfig.load(bad)
    with pytest.raises(ConfigError, match="not found"):
        RunConfig.load(tmp_path / "missing.toml")


def test_coercion():
    rc = RunConfig({"engine.msp": "false", "engine.epochs": "3", "engine.lr": 1})
    assert rc["engine.msp"] is False and rc["engine.epochs"] == 3 and rc["engine.lr"] == 1.0


def test_hash_is_stable_and_sensitive():
    a, b = RunConfig({"seed": 3}), RunConfig({"seed": 3})
    assert a.hash() == b.hash()
    assert a.hash() != RunConfig({"seed": 4}).hash()
    echo = a.echo()
    assert echo["config_hash"] == a.hash() and echo["config"]["seed"] == 3


def test_parse_assignment():
    assert parse_assignment("engine.tau = 0.8") == ("engine.tau", "0.8")
    with pytest.raises(ConfigError):
        parse_assignment("engine.tau")
