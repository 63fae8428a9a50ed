"""Targeted intervention over graph masks with a linear energy model.

p(g) is proportional to exp(<omega, g> / tau). The energy is linear in the bits, so
the distribution factorises into independent Bernoulli(expit(omega_i / tau)) bits,
which is what sampling and the argmax use. Enumeration is kept for small masks.
"""

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg
from scipy.special import expit, logsumexp

from errors import DataError, NumericError
from models import EnvConfig, InterventionConfig, InterventionRecord
from graph_policy import GraphMask, PolicyParams, rollout
from transfer_env import derive_seed

log = logging.getLogger("causal_act.intervention")

MAX_ENUMERATION_DIM = 20
FALLBACK_RIDGE = 1e-3
# seed stream reserved for intervention rollouts
INTERVENTION_STREAM = 1

RewardFn = Callable[[GraphMask, int], float]


@dataclass
class EnergyModel:
    omega: np.ndarray
    bias: float = 0.0
    tau: float = 1.0

    def __post_init__(self):
        self.omega = np.asarray(self.omega, dtype=float).ravel()
        self.bias = float(self.bias)
        if not np.all(np.isfinite(self.omega)) or not np.isfinite(self.bias):
            raise NumericError("Energy model parameters must be finite")
        if not self.tau > 0:
            raise DataError(f"Energy temperature must be > 0, got {self.tau}")

    @property
    def dim(self) -> int:
        return self.omega.size

    def to_dict(self) -> dict:
        return {
            "omega": [float(w) for w in self.omega],
            "bias": float(self.bias),
            "tau": float(self.tau),
            "best_graph": best_graph(self).to_string(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EnergyModel":
        try:
            return cls(omega=data["omega"], bias=data["bias"], tau=data["tau"])
        except (KeyError, TypeError) as e:
            raise DataError(f"Malformed energy model: missing or invalid {e}")


def _check_length(model: EnergyModel, g: GraphMask) -> np.ndarray:
    bits = g.as_array()
    if bits.size != model.dim:
        raise DataError(f"Graph has {bits.size} bits, energy model has {model.dim}")
    return bits


def log_unnormalized(model: EnergyModel, g: GraphMask) -> float:
    """<omega, g> / tau, usable at any dimension."""
    return float(model.omega @ _check_length(model, g)) / model.tau


def all_graphs(n: int) -> np.ndarray:
    """Every binary mask of length n as rows of a (2**n, n) array."""
    codes = np.arange(2**n)[:, None]
    return ((codes >> np.arange(n)[None, :]) & 1).astype(float)


def graph_prob(model: EnergyModel, g: GraphMask) -> float:
    """Exact probability of g, normalised by enumerating all 2**n masks."""
    if model.dim > MAX_ENUMERATION_DIM:
        raise DataError(
            f"Cannot enumerate 2^{model.dim} graphs; use sample_graph or "
            f"log_unnormalized for masks longer than {MAX_ENUMERATION_DIM}"
        )
    energies = all_graphs(model.dim) @ model.omega / model.tau
    return float(np.exp(log_unnormalized(model, g) - logsumexp(energies)))


def bit_probabilities(model: EnergyModel) -> np.ndarray:
    return expit(model.omega / model.tau)


def sample_graph(model: EnergyModel, rng: np.random.Generator) -> GraphMask:
    bits = rng.random(model.dim) < bit_probabilities(model)
    return GraphMask(tuple(bits.astype(int)))


def sample_graphs(
    model: EnergyModel, rng: np.random.Generator, n_samples: int
) -> np.ndarray:
    """Vectorised sample_graph; one mask per row."""
    return (rng.random((n_samples, model.dim)) < bit_probabilities(model)).astype(int)


def best_graph(model: EnergyModel) -> GraphMask:
    """Elementwise argmax of the factorised distribution; omega_i == 0 excludes bit i."""
    return GraphMask(tuple((model.omega > 0).astype(int)))


def fit_energy(
    records: Sequence[InterventionRecord], ridge: float, tau: float = 1.0
) -> EnergyModel:
    """Ridge regression of reward on graph bits with an unpenalised bias.

    Args:
        records: Evaluated graphs and their mean rewards
        ridge: L2 strength on omega (lambda >= 0)
        tau: Temperature carried into the returned model

    Returns:
        EnergyModel: Fitted omega and bias
    """
    if not records:
        raise DataError("fit_energy needs at least one record")
    if ridge < 0:
        raise DataError(f"Ridge strength must be >= 0, got {ridge}")
    G = np.array([r.graph for r in records], dtype=float)
    y = np.array([r.reward for r in records], dtype=float)
    n_bits = G.shape[1]
    X = np.hstack([G, np.ones((len(records), 1))])
    if ridge == 0 and np.linalg.matrix_rank(X) < n_bits + 1:
        raise NumericError(
            f"Singular least-squares system ({len(records)} records, {n_bits} bits); "
            "use a ridge strength > 0"
        )
    penalty = np.full(n_bits + 1, float(ridge))
    penalty[-1] = 0.0
    A = X.T @ X + np.diag(penalty)
    try:
        solution = linalg.cho_solve(linalg.cho_factor(A), X.T @ y)
    except linalg.LinAlgError as e:
        raise NumericError(f"Energy fit failed: {e}; use a ridge strength > 0")
    return EnergyModel(omega=solution[:-1], bias=solution[-1], tau=tau)


def _refit(
    records: List[InterventionRecord], config: InterventionConfig
) -> EnergyModel:
    ridge = config.ridge
    if ridge == 0:
        distinct = {r.bits() for r in records}
        if len(distinct) < records[0].graph.size + 1:
            log.warning(
                f"Only {len(distinct)} distinct graphs with ridge 0, "
                f"falling back to ridge {FALLBACK_RIDGE}"
            )
            ridge = FALLBACK_RIDGE
    try:
        return fit_energy(records, ridge, config.tau)
    except NumericError:
        log.warning(f"Singular energy fit, retrying with ridge {FALLBACK_RIDGE}")
        return fit_energy(records, FALLBACK_RIDGE, config.tau)


def _policy_reward(params: PolicyParams, env_config: EnvConfig) -> RewardFn:
    def reward(g: GraphMask, episode_seed: int) -> float:
        return float(rollout(params, env_config, g, episode_seed).reward)

    return reward


def evaluate_graph(
    g: GraphMask, episode_seeds: Sequence[int], reward_fn: RewardFn, workers: int = 1
) -> float:
    if workers > 1 and len(episode_seeds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rewards = list(pool.map(lambda s: reward_fn(g, s), episode_seeds))
    else:
        rewards = [reward_fn(g, s) for s in episode_seeds]
    return float(np.mean(rewards))


def targeted_intervention(
    params: PolicyParams,
    env_config: EnvConfig,
    config: InterventionConfig,
    reward_fn: Optional[RewardFn] = None,
    workers: int = 1,
) -> Tuple[GraphMask, EnergyModel, List[InterventionRecord]]:
    """Search graph masks by executing the frozen policy and refitting the energy.

    Each iteration samples g from the current model, scores it by the mean staged
    reward over `config.episodes` rollouts and refits omega on the full record
    history. `reward_fn(g, episode_seed)` replaces policy rollouts when given.

    Returns:
        The best graph of the final model, the model and the record trail
    """
    if reward_fn is None:
        reward_fn = _policy_reward(params, env_config)
    rng = np.random.default_rng(config.seed)
    model = EnergyModel(
        omega=np.zeros(params.dims.feature_dim), bias=0.0, tau=config.tau
    )
    records: List[InterventionRecord] = []
    log.info(
        f"Targeted intervention: {config.iterations} iterations x "
        f"{config.episodes} episodes over {model.dim} graph bits"
    )
    for i in range(config.iterations):
        g = sample_graph(model, rng)
        offset = 0 if config.common_episodes else i * config.episodes
        seeds = [
            derive_seed(config.seed, offset + e, stream=INTERVENTION_STREAM)
            for e in range(config.episodes)
        ]
        mean_reward = evaluate_graph(g, seeds, reward_fn, workers)
        records.append(
            InterventionRecord(graph=g.bits, reward=mean_reward, episodes=len(seeds))
        )
        model = _refit(records, config)
        log.debug(
            f"Iteration {i + 1}: graph {g.to_string()} reward {mean_reward:.3f}"
        )
        if (i + 1) % 10 == 0 or i + 1 == config.iterations:
            log.info(
                f"Iteration {i + 1}/{config.iterations}: current best "
                f"{best_graph(model).to_string()}"
            )
    return best_graph(model), model, records


## Persistence
TRAIL_FIELDS = ("iteration", "graph", "mean_reward", "episodes")


def write_trail(records: Sequence[InterventionRecord], path: str) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(TRAIL_FIELDS)
        for i, r in enumerate(records, start=1):
            writer.writerow([i, r.bits(), repr(float(r.reward)), r.episodes])


def save_model(model: EnergyModel, path: str) -> None:
    with open(path, "w") as f:
        json.dump(model.to_dict(), f, indent=2, sort_keys=True)


def load_best_graph(path: str) -> GraphMask:
    """Read g* from a model JSON file or a plain bit-string file."""
    try:
        with open(path, "r") as f:
            text = f.read()
    except FileNotFoundError:
        raise DataError(f"Graph file not found: {path}")
    try:
        data = json.loads(text)
    except json.JSONDecodeError:
        return GraphMask.from_string(text)
    if not isinstance(data, dict):
        return GraphMask.from_string(text)
    if "best_graph" not in data:
        raise DataError(f"Graph file {path} has no 'best_graph' entry")
    return GraphMask.from_string(str(data["best_graph"]))
