import json

import pytest
from click.testing import CliRunner

from trafonet.cli import cli, main
from trafonet.config import CONFIG_ENV_VAR
from trafonet.storage import Storage

TINY_RL = ["--set", "agent.steps=50", "--set", "agent.hidden=8", "--set", "agent.batch=16"]


@pytest.fixture(autouse=True)
def _no_env_config(monkeypatch):
    monkeypatch.delenv(CONFIG_ENV_VAR, raising=False)


def test_help_lists_commands():
    result = CliRunner().invoke(cli, ["--help"])
    assert result.exit_code == 0
    for name in ("gen-data", "train-oltc", "eval-oltc", "oracle-sweep", "train-rl", "eval-rl", "benchmark-rl", "summarize"):
        assert name in result.output


def test_show_config(capsys):
    assert main(["--set", "run.seed=9", "show-config"]) == 0
    assert json.loads(capsys.readouterr().out)["run"]["seed"] == 9
    assert main(["show-config", "--keys"]) == 0
    assert "eps_horizon" in capsys.readouterr().out


def test_unknown_key_exits_1(capsys):
    assert main(["--set", "nn.nope=1", "show-config"]) == 1
    assert "nn.nope" in capsys.readouterr().err


def test_usage_errors_exit_1(tmp_path):
    assert main(["train-rl"]) == 1
    assert main(["summarize", str(tmp_path / "missing.txt")]) == 1
    assert main(["no-such-command"]) == 1


def test_summarize(tmp_path, capsys):
    path = tmp_path / "v.txt"
    path.write_text("4\n1\n3\n2\n")
    assert main(["summarize", str(path)]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["mean"] == 2.5 and out["min"] == 1.0 and out["max"] == 4.0


def test_summarize_rejects_non_numeric_rows(tmp_path, capsys):
    path = tmp_path / "bad.txt"
    path.write_text("1\nabc\n")
    assert main(["summarize", str(path)]) == 1
    err = capsys.readouterr().err
    assert "ERROR" in err and "row 2" in err and "'abc'" in err

    table = tmp_path / "bad.csv"
    table.write_text("i_max\n0.5\nn/a\n")
    assert main(["summarize", str(table), "--column", "i_max"]) == 1
    assert "row 3" in capsys.readouterr().err


def test_oracle_sweep_writes_csv(tmp_path):
    out = tmp_path / "oracle.csv"
    assert main(["oracle-sweep", "--n-episodes", "3", "--out", str(out)]) == 0
    rows = Storage(tmp_path).read_csv("oracle.csv")
    assert len(rows) == 3
    assert list(rows[0]) == ["phi1", "phi2", "phi3", "theta_deg", "i_max"]
    assert main(["oracle-sweep", "--n-episodes", "0", "--out", str(out)]) == 1


def test_gen_data(tmp_path):
    out = tmp_path / "data"
    code = main(["--set", "synth.segment_samples=1024", "gen-data", "--n-per-class", "1", "--snr", "10", "--out", str(out)])
    assert code == 0
    rows = Storage(out).read_csv("manifest.csv")
    assert len(rows) == 7
    assert all(r["snr_db"] == "10.0" for r in rows)
    assert (out / rows[0]["filename"]).exists()
    assert (out / "config.json").exists()


def test_train_then_eval_rl(tmp_path):
    assert main([*TINY_RL, "train-rl", "--algo", "dqn-exp", "--out", str(tmp_path)]) == 0
    ckpt = tmp_path / "dqn-exp.ckpt"
    assert ckpt.exists()
    episodes = tmp_path / "eval.csv"
    assert main(["eval-rl", "--checkpoint", str(ckpt), "--episodes", "5", "--out", str(episodes)]) == 0
    assert len(Storage(tmp_path).read_csv("eval.csv")) == 5


def test_corrupt_checkpoint_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint")
    assert main(["eval-rl", "--checkpoint", str(bad)]) == 2
    assert "offset 0" in capsys.readouterr().err


def test_gradcheck_command(capsys):
    assert main(["--log-level", "WARNING", "gradcheck", "--seed", "3"]) == 0
    assert set(json.loads(capsys.readouterr().out)) == {"mlp_mse", "mlp_ce", "oltc_cnn"}
