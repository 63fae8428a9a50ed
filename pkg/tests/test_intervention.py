import json
import math
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

import config

config.TEST = True

import intervention
from errors import DataError, NumericError
from graph_policy import GraphMask, PolicyDims, init_policy
from intervention import (
    EnergyModel,
    all_graphs,
    best_graph,
    fit_energy,
    graph_prob,
    sample_graph,
    sample_graphs,
    targeted_intervention,
)
from models import InterventionRecord
import objects


@pytest.fixture
def policy():
    env = objects.create_env_config()
    dims = PolicyDims(
        obs_dim=env.obs_dim,
        act_dim=6,
        joints_dim=6,
        feature_dim=12,
        z_dim=2,
        chunk=10,
        encoder_mode="mlp",
    )
    return init_policy(dims, np.random.default_rng(0), hidden=(8,))


def _records(graphs, rewards):
    return [InterventionRecord(graph=g, reward=r, episodes=1) for g, r in zip(graphs, rewards)]


def test_graph_prob_uniform():
    model = EnergyModel(omega=np.zeros(2))
    for bits in ("00", "01", "10", "11"):
        assert graph_prob(model, GraphMask.from_string(bits)) == pytest.approx(0.25)


def test_graph_prob_planted_weight():
    """Test p((1, 0)) = 3/8 when omega = (ln 3, 0)"""
    model = EnergyModel(omega=np.array([math.log(3.0), 0.0]), tau=1.0)
    assert graph_prob(model, GraphMask((1, 0))) == pytest.approx(3.0 / 8.0)


def test_graph_prob_normalised():
    model = EnergyModel(omega=np.random.default_rng(1).normal(size=6), tau=0.7)
    total = sum(graph_prob(model, GraphMask(tuple(int(b) for b in g))) for g in all_graphs(6))
    assert total == pytest.approx(1.0)


def test_graph_prob_limits():
    model = EnergyModel(omega=np.zeros(21))
    with pytest.raises(DataError):
        graph_prob(model, GraphMask.zeros(21))
    with pytest.raises(DataError):
        graph_prob(EnergyModel(omega=np.zeros(3)), GraphMask.zeros(2))


def test_energy_model_validation():
    with pytest.raises(DataError):
        EnergyModel(omega=np.zeros(2), tau=0.0)
    with pytest.raises(NumericError):
        EnergyModel(omega=np.array([np.nan]))


def test_sampler_matches_enumeration():
    """Test the factorised sampler against exact enumeration at n = 8"""
    rng = np.random.default_rng(5)
    model = EnergyModel(omega=rng.normal(size=8), tau=1.0)
    samples = sample_graphs(model, rng, 1_000_000)
    codes = samples @ (1 << np.arange(8))
    empirical = np.bincount(codes, minlength=256) / len(codes)
    exact = np.array(
        [graph_prob(model, GraphMask(tuple(int(b) for b in g))) for g in all_graphs(8)]
    )
    assert 0.5 * np.abs(empirical - exact).sum() < 0.01


def test_sample_graph_fair_and_saturated():
    rng = np.random.default_rng(2)
    fair = np.array([sample_graph(EnergyModel(np.zeros(4)), rng).bits for _ in range(4000)])
    assert np.all(np.abs(fair.mean(axis=0) - 0.5) < 0.05)
    omega = np.array([20.0, -20.0])
    draws = np.array([sample_graph(EnergyModel(omega), rng).bits for _ in range(10_000)])
    assert np.all(draws[:, 0] == 1)
    assert np.all(draws[:, 1] == 0)


def test_fit_energy_exact_recovery():
    """Test noiseless rewards over all 8 graphs recover omega and bias exactly"""
    omega, bias = np.array([2.0, -1.0, 0.5]), 1.0
    graphs = all_graphs(3)
    rewards = graphs @ omega + bias
    model = fit_energy(_records(graphs, rewards), ridge=0.0)
    assert np.allclose(model.omega, omega, atol=1e-8)
    assert model.bias == pytest.approx(bias, abs=1e-8)


def test_fit_energy_constant_rewards():
    graphs = all_graphs(3)[:5]
    model = fit_energy(_records(graphs, [2.5] * 5), ridge=0.1)
    assert np.allclose(model.omega, 0.0, atol=1e-9)
    assert model.bias == pytest.approx(2.5)


def test_fit_energy_ridge_shrinks():
    rng = np.random.default_rng(3)
    graphs = rng.integers(0, 2, size=(30, 4))
    rewards = np.clip(graphs @ np.array([0.8, -0.5, 0.3, 0.1]) + 1.5 + rng.normal(0, 0.2, 30), 0, 4)
    records = _records(graphs, rewards)
    norms = [np.linalg.norm(fit_energy(records, lam).omega) for lam in (0.0, 1.0, 10.0)]
    assert norms[0] > norms[1] > norms[2]


def test_fit_energy_singular_without_ridge():
    records = _records([[1, 0, 0], [1, 0, 0]], [1.0, 2.0])
    with pytest.raises(NumericError):
        fit_energy(records, ridge=0.0)
    assert fit_energy(records, ridge=1e-3).omega.shape == (3,)
    with pytest.raises(DataError):
        fit_energy([], ridge=1.0)


def test_best_graph():
    assert best_graph(EnergyModel(np.array([1.2, -0.5, 0.0]))).bits == (1, 0, 0)
    assert best_graph(EnergyModel(-np.ones(4))).bits == (0, 0, 0, 0)


def test_best_graph_matches_brute_force():
    rng = np.random.default_rng(8)
    for _ in range(5):
        model = EnergyModel(omega=rng.normal(size=6), tau=float(rng.uniform(0.5, 2.0)))
        probs = [graph_prob(model, GraphMask(tuple(int(b) for b in g))) for g in all_graphs(6)]
        brute = tuple(int(b) for b in all_graphs(6)[int(np.argmax(probs))])
        assert best_graph(model).bits == brute
        scaled = EnergyModel(omega=model.omega * 3.0, tau=model.tau * 3.0)
        assert best_graph(scaled) == best_graph(model)


@pytest.mark.parametrize("seed", range(5))
def test_planted_reward_recovery(policy, seed):
    """Test a linear reward oracle's sign pattern is recovered from 200 iterations"""
    rng = np.random.default_rng(100 + seed)
    weights = rng.choice([-1.0, 1.0], size=12) * rng.uniform(0.05, 0.16, size=12)

    def reward_fn(g, episode_seed):
        return 2.0 + float(weights @ g.as_array())

    cfg = objects.create_intervention_config(iterations=200, seed=seed)
    g_star, model, records = targeted_intervention(
        policy, objects.create_env_config(), cfg, reward_fn=reward_fn
    )
    assert g_star.bits == tuple(int(w > 0) for w in weights)
    assert len(records) == 200
    assert all(0.0 <= r.reward <= 4.0 for r in records)


def test_intervention_single_iteration(policy):
    """Test one iteration runs the policy E times and leaves it untouched"""
    before = [p.copy() for net in policy.networks().values() for p in net.parameters()]
    cfg = objects.create_intervention_config(iterations=1, episodes=2)
    g_star, model, records = targeted_intervention(policy, objects.create_env_config(), cfg)
    assert len(records) == 1
    assert records[0].episodes == 2
    assert len(g_star) == 12
    after = [p for net in policy.networks().values() for p in net.parameters()]
    assert all(np.array_equal(a, b) for a, b in zip(before, after))


def test_intervention_deterministic(policy):
    def reward_fn(g, episode_seed):
        return float(sum(g.bits[:3])) + (episode_seed % 2) * 0.5

    cfg = objects.create_intervention_config(iterations=15, episodes=2)
    runs = [
        targeted_intervention(policy, objects.create_env_config(), cfg, reward_fn=reward_fn)
        for _ in range(2)
    ]
    assert runs[0][0] == runs[1][0]
    assert [r.bits() for r in runs[0][2]] == [r.bits() for r in runs[1][2]]
    assert [r.reward for r in runs[0][2]] == [r.reward for r in runs[1][2]]


def test_intervention_ridge_fallback(policy):
    """Test ridge 0 falls back to a small ridge until enough graphs are seen"""
    cfg = objects.create_intervention_config(iterations=3, ridge=0.0)
    g_star, model, _ = targeted_intervention(
        policy, objects.create_env_config(), cfg, reward_fn=lambda g, s: 1.0
    )
    assert np.all(np.isfinite(model.omega))


def test_trail_and_model_files(tmp_path):
    records = _records([[1, 0, 1], [0, 0, 1]], [3.0, 1.5])
    trail = tmp_path / "trail.csv"
    intervention.write_trail(records, str(trail))
    assert trail.read_text().splitlines() == [
        "iteration,graph,mean_reward,episodes",
        "1,101,3.0,1",
        "2,001,1.5,1",
    ]
    model_path = tmp_path / "model.json"
    intervention.save_model(EnergyModel(np.array([0.5, -0.2, 0.0]), bias=1.0), str(model_path))
    data = json.loads(model_path.read_text())
    assert data["best_graph"] == "100"
    assert data["omega"] == [0.5, -0.2, 0.0]
    assert intervention.load_best_graph(str(model_path)).bits == (1, 0, 0)


def test_load_best_graph_plain_bits(tmp_path):
    path = tmp_path / "g.txt"
    path.write_text("0110\n")
    assert intervention.load_best_graph(str(path)).bits == (0, 1, 1, 0)
    path.write_text("10")
    assert intervention.load_best_graph(str(path)).bits == (1, 0)
    with pytest.raises(DataError):
        intervention.load_best_graph(str(tmp_path / "missing.txt"))
