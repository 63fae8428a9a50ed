import hashlib
import os
import sys
from unittest.mock import patch

import pytest
from click.testing import CliRunner

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

import config

config.TEST = True

import cli
import experiments
from errors import NumericError


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def demos(runner, tmp_path):
    path = str(tmp_path / "demos.jsonl")
    result = runner.invoke(cli.cli, ["gen-demos", "--episodes", "3", "--seed", "1", "--out", path])
    assert result.exit_code == 0, result.output
    return path


def _hash(path):
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


def _train(runner, tmp_path, demos, method):
    path = str(tmp_path / f"{method}.json")
    result = runner.invoke(
        cli.cli,
        ["train", "--dataset", demos, "--method", method, "--epochs", "1", "--out", path],
    )
    assert result.exit_code == 0, result.output
    return path


def test_gen_demos_output(runner, demos):
    """Test gen-demos writes a header line plus one line per episode"""
    with open(demos) as f:
        assert len(f.readlines()) == 4


def test_gen_demos_seed_override(runner, tmp_path, demos):
    """Test CAUSAL_ACT_SEED replaces the command-line seed"""
    path = str(tmp_path / "override.jsonl")
    result = runner.invoke(
        cli.cli,
        ["gen-demos", "--episodes", "3", "--seed", "9", "--out", path],
        env={"CAUSAL_ACT_SEED": "1"},
    )
    assert result.exit_code == 0, result.output
    assert "reward 4 on 3/3" in result.output
    assert _hash(path) == _hash(demos)


def test_gen_demos_dr_mode(runner, tmp_path):
    path = str(tmp_path / "dr.jsonl")
    result = runner.invoke(
        cli.cli,
        [
            "gen-demos",
            "--distractor-mode",
            "randomized",
            "--dr-exponent",
            "inf",
            "--episodes",
            "2",
            "--out",
            path,
        ],
    )
    assert result.exit_code == 0, result.output


def test_train_and_intervene(runner, tmp_path, demos):
    causal = _train(runner, tmp_path, demos, "causal-act")
    out_dir = str(tmp_path / "intervention")
    result = runner.invoke(
        cli.cli,
        ["intervene", "--checkpoint", causal, "--iterations", "2", "--out-dir", out_dir],
    )
    assert result.exit_code == 0, result.output
    assert "best graph" in result.output
    assert os.path.exists(os.path.join(out_dir, "energy_model.json"))

    result = runner.invoke(
        cli.cli,
        [
            "eval",
            "--checkpoint",
            causal,
            "--graph",
            f"file:{os.path.join(out_dir, 'energy_model.json')}",
            "--distractor-mode",
            "absent",
            "--episodes",
            "2",
            "--seed",
            "0",
        ],
    )
    assert result.exit_code == 0, result.output
    assert "causal-act out-of-distribution seed 0" in result.output


def test_intervene_refuses_baseline_checkpoint(runner, tmp_path, demos):
    act = _train(runner, tmp_path, demos, "act")
    result = runner.invoke(cli.cli, ["intervene", "--checkpoint", act, "--iterations", "1"])
    assert result.exit_code == 1
    assert "never saw graph masks" in result.output


def test_missing_dataset_is_data_error(runner, tmp_path):
    result = runner.invoke(
        cli.cli,
        ["train", "--dataset", str(tmp_path / "nope.jsonl"), "--out", str(tmp_path / "p.json")],
    )
    assert result.exit_code == 2


def test_missing_graph_file_is_data_error(runner, tmp_path, demos):
    act = _train(runner, tmp_path, demos, "act")
    result = runner.invoke(
        cli.cli,
        ["eval", "--checkpoint", act, "--graph", f"file:{tmp_path / 'g.json'}", "--episodes", "1"],
    )
    assert result.exit_code == 2


def test_usage_errors_exit_with_one(runner, tmp_path):
    result = runner.invoke(cli.cli, ["train", "--method", "bogus"])
    assert result.exit_code == 1
    result = runner.invoke(cli.cli, ["no-such-command"])
    assert result.exit_code == 1


def test_bad_config_file_exit_code(runner, tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text('{"eval_episodes": 0}')
    result = runner.invoke(
        cli.cli, ["gen-demos", "--config", str(path), "--out", str(tmp_path / "d.jsonl")]
    )
    assert result.exit_code == 1


def test_numeric_failure_exit_code(runner, tmp_path, demos):
    with patch.object(experiments, "cmd_train", side_effect=NumericError("loss is nan")):
        result = runner.invoke(
            cli.cli, ["train", "--dataset", demos, "--out", str(tmp_path / "p.json")]
        )
    assert result.exit_code == 3
    assert "loss is nan" in result.output


def test_scm_check(runner, tmp_path, demos):
    out = str(tmp_path / "ci.csv")
    result = runner.invoke(
        cli.cli,
        [
            "scm-check",
            "--graphs",
            "50",
            "--trials",
            "3",
            "--samples",
            "2000",
            "--dataset",
            demos,
            "--out",
            out,
        ],
    )
    assert result.exit_code == 0, result.output
    assert "50/50 uniquely solvable" in result.output
    assert "disentanglement" in result.output
    with open(out) as f:
        assert f.readline().startswith("node_a,node_b,cond_set")


def test_main_help():
    assert cli.main(["--help"]) == 0
    with pytest.raises(SystemExit) as exc:
        cli.main(["eval"])
    assert exc.value.code == 1


def test_experiment_config_dr_exponent(tmp_path):
    """Test randomized runs fall back to the experiment-level exponent"""
    path = tmp_path / "cfg.json"
    path.write_text('{"dr_exponent": "inf"}')
    cfg = cli._experiment_config(str(path), None, "randomized")
    assert cfg.env.distractor_mode == "randomized"
    assert cfg.env.dr_exponent == float("inf")
    cfg = cli._experiment_config(str(path), None, "randomized", "3")
    assert cfg.env.dr_exponent == 3.0
    cfg = cli._experiment_config(str(path), None)
    assert cfg.env.dr_exponent == 0.0
