import dataclasses
import hashlib
import json
import os
import sys
from unittest.mock import patch

import pytest

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

import config

config.TEST = True

import experiments
import graph_policy
from errors import ConfigError, DataError
from graph_policy import GraphMask
from models import ExperimentConfig, ResultRow
import objects


@pytest.fixture
def dataset():
    return objects.create_dataset(n_episodes=3)


@pytest.fixture
def tiny_experiment():
    return ExperimentConfig(
        env=objects.create_env_config(),
        train=objects.create_train_config(epochs=1, hidden=(8,)),
        intervention=objects.create_intervention_config(iterations=2),
        eval_episodes=2,
        seeds=(0,),
        n_demos=2,
    )


def _hash(path):
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


def test_presets():
    headline = experiments.load_experiment_config(preset="headline")
    assert headline.env.distractor_mode == "action-correlated"
    assert headline.train.encoder_mode == "identity"
    assert headline.intervention.episodes == 3
    mlp_fixed = experiments.load_experiment_config(preset="mlp-fixed")
    assert mlp_fixed.env.distractor_mode == "fixed"
    assert mlp_fixed.train.encoder_mode == "mlp"
    with pytest.raises(ConfigError):
        experiments.load_experiment_config(preset="nope")


def test_config_file_overrides_preset(tmp_path):
    path = tmp_path / "exp.json"
    path.write_text(json.dumps({"train": {"epochs": 7}, "seeds": [4, 5], "dr_exponents": [0, "inf"]}))
    cfg = experiments.load_experiment_config(str(path), preset="headline")
    assert cfg.train.epochs == 7
    assert cfg.train.encoder_mode == "identity"
    assert cfg.seeds == (4, 5)
    assert cfg.dr_exponents == (0.0, float("inf"))


def test_config_file_unknown_key(tmp_path):
    path = tmp_path / "exp.json"
    path.write_text(json.dumps({"train": {"epoch": 7}}))
    with pytest.raises(ConfigError):
        experiments.load_experiment_config(str(path))


def test_resolve_seeds_override():
    with patch.dict(os.environ, {"CAUSAL_ACT_SEED": "10"}):
        assert experiments.resolve_seeds((0, 1, 2)) == (10, 11, 12)
    with patch.dict(os.environ, {"CAUSAL_ACT_SEED": ""}):
        assert experiments.resolve_seeds((0, 1, 2)) == (0, 1, 2)


def test_training_config_for_methods():
    base = objects.create_train_config()
    act = experiments.training_config_for("act", base, seed=3)
    assert (act.graph_sampling, act.mask_input, act.seed) == ("all-ones", False, 3)
    causal = experiments.training_config_for("causal-act", base, seed=3)
    assert (causal.graph_sampling, causal.mask_input) == ("uniform", True)


def test_cmd_gen_demos(tmp_path):
    """Test the dataset file has one header line per episode plus one"""
    env = objects.create_env_config()
    path_a, path_b = str(tmp_path / "a.jsonl"), str(tmp_path / "b.jsonl")
    experiments.cmd_gen_demos(env, 3, 1, path_a)
    experiments.cmd_gen_demos(env, 3, 1, path_b)
    with open(path_a) as f:
        assert len(f.readlines()) == 4
    assert _hash(path_a) == _hash(path_b)


def test_cmd_train_writes_checkpoint_and_log(tmp_path, dataset):
    cfg = objects.create_train_config(epochs=4)
    act_path = str(tmp_path / "act.json")
    causal_path = str(tmp_path / "causal.json")
    experiments.cmd_train(cfg, dataset, act_path, "act")
    experiments.cmd_train(cfg, dataset, causal_path, "causal-act")
    with open(experiments.log_path_for(act_path)) as f:
        assert len(f.readlines()) == 5
    act = graph_policy.load_checkpoint(act_path)
    causal = graph_policy.load_checkpoint(causal_path)
    assert act.method == "act" and not act.dims.mask_input
    assert causal.method == "causal-act" and causal.dims.mask_input
    assert _hash(act_path) != _hash(causal_path)


def test_cmd_train_dimension_mismatch(tmp_path, dataset):
    env = objects.create_env_config(n_distractors=2)
    with pytest.raises(DataError):
        experiments.cmd_train(
            objects.create_train_config(), dataset, str(tmp_path / "p.json"), env_config=env
        )


def test_cmd_intervene(tmp_path, dataset):
    cfg = objects.create_train_config(epochs=1)
    act_path = str(tmp_path / "act.json")
    causal_path = str(tmp_path / "causal.json")
    experiments.cmd_train(cfg, dataset, act_path, "act")
    experiments.cmd_train(cfg, dataset, causal_path, "causal-act")
    env = objects.create_env_config()
    icfg = objects.create_intervention_config(iterations=3)
    with pytest.raises(ConfigError):
        experiments.cmd_intervene(act_path, env, icfg, str(tmp_path / "out"))

    out_dir = tmp_path / "out"
    g_star, _, records = experiments.cmd_intervene(causal_path, env, icfg, str(out_dir))
    assert len(records) == 3
    trail = (out_dir / "intervention_trail.csv").read_text().splitlines()
    assert len(trail) == 4
    model = json.loads((out_dir / "energy_model.json").read_text())
    assert model["best_graph"] == g_star.to_string()
    assert len(g_star) == env.obs_dim


def test_resolve_graph(tmp_path):
    assert experiments.resolve_graph("all-ones", 3, 0) == GraphMask.ones(3)
    assert experiments.resolve_graph("all-zeros", 3, 0) == GraphMask.zeros(3)
    assert experiments.resolve_graph("random", 16, 4) == experiments.resolve_graph("random", 16, 4)
    assert experiments.resolve_graph("random", 16, 4) != experiments.resolve_graph("random", 16, 5)
    path = tmp_path / "g.txt"
    path.write_text("101")
    assert experiments.resolve_graph(f"file:{path}", 3, 0).bits == (1, 0, 1)
    with pytest.raises(DataError):
        experiments.resolve_graph(f"file:{path}", 4, 0)
    with pytest.raises(DataError):
        experiments.resolve_graph(f"file:{tmp_path / 'missing'}", 3, 0)
    with pytest.raises(ConfigError):
        experiments.resolve_graph("sometimes", 3, 0)


def test_row_method():
    assert experiments.row_method("act", "all-ones") == "act"
    assert experiments.row_method("causal-act", "file:g.json") == "causal-act"
    assert experiments.row_method("causal-act", "random") == "causal-act-random-graph"
    assert experiments.row_method("causal-act", "all-ones") == "causal-act-full-graph"


def test_cmd_eval(tmp_path, dataset):
    """Test evaluation rows count episodes and record the graph used"""
    checkpoint = str(tmp_path / "causal.json")
    experiments.cmd_train(objects.create_train_config(epochs=1), dataset, checkpoint)
    out = str(tmp_path / "results.csv")
    rows = experiments.cmd_eval(
        checkpoint, "random", objects.create_env_config("absent"), 5, (0, 1), out_path=out
    )
    assert [r.seed for r in rows] == [0, 1]
    for row in rows:
        assert row.method == "causal-act-random-graph"
        assert row.condition == "out-of-distribution"
        assert row.touched >= row.lifted >= row.transfer
        assert row.touched * 5 == pytest.approx(round(row.touched * 5))
        assert len(row.graph) == 26
    with open(out) as f:
        assert len(f.readlines()) == 3


def test_experiment_grid(tmp_path, tiny_experiment):
    """Test the grid emits every method row and reruns byte-identically"""
    out_a, out_b = str(tmp_path / "a"), str(tmp_path / "b")
    rows = experiments.cmd_experiment(tiny_experiment, out_a)
    experiments.cmd_experiment(tiny_experiment, out_b)

    ood = [r.method for r in rows if r.condition == "out-of-distribution"]
    assert ood == [
        "act",
        "act-dr k=0",
        "act-dr k=3",
        "act-dr k=6",
        "act-dr k=inf",
        "causal-act",
        "causal-act-random-graph",
        "causal-act-full-graph",
    ]
    in_dist = [r.method for r in rows if r.condition == "in-distribution"]
    assert in_dist == ["act", "causal-act"]
    full = next(r for r in rows if r.method == "causal-act-full-graph")
    assert full.graph == "1" * 26

    for name in ("results.csv", "report.txt"):
        assert _hash(os.path.join(out_a, name)) == _hash(os.path.join(out_b, name))
    assert os.path.exists(os.path.join(out_a, "seed_0", "causal_act.json"))
    assert os.path.exists(os.path.join(out_a, "seed_0", "intervention_trail.csv"))


def test_experiment_failure_keeps_completed_rows(tmp_path, tiny_experiment):
    cfg = dataclasses.replace(tiny_experiment, seeds=(0, 1))
    row = ResultRow("act", "in-distribution", 0, 1.0, 0.5, 0.5, 2, "11")

    def cells(config, seed, out_dir, workers):
        if seed == 1:
            raise DataError("cell failed")
        return [row]

    with patch("experiments._seed_cells", side_effect=cells):
        with pytest.raises(DataError):
            experiments.cmd_experiment(cfg, str(tmp_path))
    lines = (tmp_path / "results.csv").read_text().splitlines()
    assert lines == [
        "method,condition,seed,touched,lifted,transfer,episodes,graph",
        "act,in-distribution,0,1.0000,0.5000,0.5000,2,11",
    ]
    assert not (tmp_path / "report.txt").exists()


def test_aggregate_and_report(tiny_experiment):
    rows = [
        ResultRow("act", "out-of-distribution", 0, 1.0, 0.5, 0.25, 4),
        ResultRow("act", "out-of-distribution", 1, 0.5, 0.5, 0.0, 4),
        ResultRow("causal-act", "in-distribution", 0, 1.0, 1.0, 1.0, 4),
    ]
    entries = experiments.aggregate(rows)
    assert entries[0]["method"] == "act"
    assert entries[0]["seeds"] == 2
    assert entries[0]["touched"] == pytest.approx(0.75)
    assert entries[0]["transfer"] == pytest.approx(0.125)
    report = experiments.format_report(rows, tiny_experiment)
    assert "ACT vs Causal-ACT" in report
    assert "Out-of-distribution methods and ablations" in report
    assert "0.125" in report


def test_result_row_invariants():
    with pytest.raises(DataError):
        ResultRow("act", "in-distribution", 0, 0.5, 0.75, 0.0, 4)
    with pytest.raises(DataError):
        ResultRow("act", "sideways", 0, 0.5, 0.5, 0.0, 4)
    with pytest.raises(DataError):
        ResultRow("act", "in-distribution", 0, 1.5, 0.5, 0.0, 4)
