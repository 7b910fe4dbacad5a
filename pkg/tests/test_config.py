import json

import pytest

from trafonet.config import CONFIG_ENV_VAR, RunConfig, load_config, parse_override, read_config_file
from trafonet.errors import ConfigError
from trafonet.types import ValueType, coerce_value


def test_coerce_value():
    assert coerce_value(ValueType.INT, "12") == 12
    assert coerce_value(ValueType.INT, 3.0) == 3
    assert coerce_value(ValueType.FLOAT, "1e-3") == 0.001
    assert coerce_value(ValueType.BOOL, "yes") is True
    assert coerce_value(ValueType.BOOL, 0) is False
    assert coerce_value(ValueType.FLOATS, "20, 10,5") == (20.0, 10.0, 5.0)
    assert coerce_value(ValueType.FLOATS, 7) == (7.0,)
    assert coerce_value(ValueType.TEXTS, ["ppo", "dqn-exp"]) == ("ppo", "dqn-exp")
    assert coerce_value(ValueType.INT, None) is None
    with pytest.raises(ValueError):
        coerce_value(ValueType.INT, True)
    with pytest.raises(ValueError):
        coerce_value(ValueType.INT, 2.5)
    with pytest.raises(ValueError):
        coerce_value(ValueType.BOOL, "maybe")


def test_defaults():
    cfg = RunConfig()
    assert cfg.seed == 42
    assert cfg.get("dsp", "hop") == 1024
    assert cfg.get("synth", "snr_levels") == (20.0, 10.0, 5.0, 0.0)
    assert cfg.get("synth", "augment_snr_levels") == (20.0, 10.0, 5.0)
    assert cfg.get("agent", "ppo_activation") == "relu"
    assert cfg.get("agent", "entropy_coef") == 0.05
    assert cfg.get("env", "seed") is None
    assert cfg.get("benchmark", "algos") == ("dqn-linear", "dqn-exp", "ppo")
    assert str(cfg.out_dir) == "runs"


def test_parse_override():
    assert parse_override("nn.epochs=3") == ("nn", "epochs", 3)
    assert parse_override("dsp.window_fn='rect'") == ("dsp", "window_fn", "rect")
    assert parse_override("env.seed=null") == ("env", "seed", None)
    assert parse_override("run.parallel=true") == ("run", "parallel", True)
    assert parse_override("synth.snr_levels=20,0") == ("synth", "snr_levels", "20,0")
    for bad in ("nn.epochs", "epochs=3", "a.b.c=1", ".x=1"):
        with pytest.raises(ConfigError):
            parse_override(bad)


def test_overrides_are_coerced():
    cfg = load_config(overrides=["synth.snr_levels=20,0", "nn.learning_rate=1", "benchmark.algos=ppo"], environ={})
    assert cfg.get("synth", "snr_levels") == (20.0, 0.0)
    assert cfg.get("nn", "learning_rate") == 1.0
    assert isinstance(cfg.get("nn", "learning_rate"), float)
    assert cfg.get("benchmark", "algos") == ("ppo",)
    assert load_config(overrides=["synth.augment_snr_levels="], environ={}).get("synth", "augment_snr_levels") == ()


@pytest.mark.parametrize("item", ["nn.nope=1", "nope.epochs=1", "dsp.window_fn=kaiser", "benchmark.algos=ppo,a2c", "nn.epochs=many", "agent.ppo_activation=tanh"])
def test_bad_overrides(item):
    with pytest.raises(ConfigError):
        load_config(overrides=[item], environ={})


def test_error_names_the_key():
    with pytest.raises(ConfigError) as e:
        load_config(overrides=["nn.epochs=2.5"], environ={})
    assert "nn.epochs" in str(e.value)


def test_source_precedence(tmp_path):
    env_file = tmp_path / "env.json"
    env_file.write_text(json.dumps({"nn": {"epochs": 2, "batch_size": 8}, "run": {"seed": 1}}))
    cli_file = tmp_path / "cli.json"
    cli_file.write_text(json.dumps({"nn": {"epochs": 3}}))
    cfg = load_config(cli_file, ["run.seed=7"], environ={CONFIG_ENV_VAR: str(env_file)})
    assert cfg.get("nn", "batch_size") == 8
    assert cfg.get("nn", "epochs") == 3
    assert cfg.seed == 7


def test_bad_files(tmp_path):
    with pytest.raises(ConfigError):
        read_config_file(tmp_path / "missing.json")
    broken = tmp_path / "broken.json"
    broken.write_text("{nn: 1")
    with pytest.raises(ConfigError):
        read_config_file(broken)
    listed = tmp_path / "list.json"
    listed.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        read_config_file(listed)
    flat = tmp_path / "flat.json"
    flat.write_text(json.dumps({"nn": 3}))
    with pytest.raises(ConfigError):
        load_config(flat, environ={})


def test_to_dict_roundtrip():
    cfg = load_config(overrides=["run.seed=5", "synth.snr_levels=10"], environ={})
    d = cfg.to_dict()
    assert d["synth"]["snr_levels"] == [10.0]
    assert json.loads(json.dumps(d)) == d
    assert RunConfig.from_dict(d) == cfg
    clone = cfg.copy()
    clone.set("run", "seed", 6)
    assert cfg.seed == 5
