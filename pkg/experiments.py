"""Experiment orchestration: demos, training, intervention, evaluation and the report grid."""

import copy
import csv
import dataclasses
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from config import ensure_output_dir, format_exponent, load_config_file, resolve_seed
from errors import ConfigError, DataError
from models import (
    EnvConfig,
    ExperimentConfig,
    InterventionConfig,
    ResultRow,
    TrainConfig,
)
import graph_policy
import intervention
import transfer_env
from graph_policy import GraphMask, PolicyParams, sample_uniform_graph

log = logging.getLogger("causal_act.experiments")

# seed streams; the demo generator uses stream 0 and intervention stream 1
EVAL_STREAM = 2
GRAPH_STREAM = 3

GRAPH_SOURCES = ("all-ones", "all-zeros", "random", "file:<path>")
BASELINE_METHODS = ("act", "act-dr")

PRESETS: Dict[str, Dict[str, Any]] = {
    # action-correlated copycat distractors with raw observation features
    "headline": {
        "env": {"distractor_mode": "action-correlated"},
        "train": {"encoder_mode": "identity"},
        "intervention": {"episodes": 3},
    },
    "mlp-fixed": {
        "env": {"distractor_mode": "fixed"},
        "train": {"encoder_mode": "mlp"},
        "intervention": {"episodes": 1},
    },
}


## Configuration
def _merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_experiment_config(
    path: Optional[str] = None, preset: Optional[str] = None
) -> ExperimentConfig:
    """Build an ExperimentConfig from an optional preset overlaid by a config file."""
    data: Dict[str, Any] = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(
                f"Unknown preset '{preset}', expected one of {', '.join(PRESETS)}"
            )
        data = copy.deepcopy(PRESETS[preset])
    if path is not None:
        data = _merge(data, load_config_file(path))
    return ExperimentConfig.from_dict(data)


def resolve_seeds(seeds: Sequence[int]) -> Tuple[int, ...]:
    """Apply the seed override to a seed list, keeping its length."""
    base = resolve_seed(seeds[0])
    if base == seeds[0]:
        return tuple(seeds)
    return tuple(base + i for i in range(len(seeds)))


def training_config_for(method: str, train: TrainConfig, seed: int) -> TrainConfig:
    """Baselines train with all-ones graphs and no mask input; the rest sample graphs."""
    if method in BASELINE_METHODS:
        return dataclasses.replace(
            train, graph_sampling="all-ones", mask_input=False, seed=seed
        )
    return dataclasses.replace(
        train, graph_sampling="uniform", mask_input=True, seed=seed
    )


## Commands
def cmd_gen_demos(
    env_config: EnvConfig, n_episodes: int, seed: int, out_path: str
) -> transfer_env.Dataset:
    dataset = transfer_env.generate_demos(env_config, n_episodes, seed)
    transfer_env.save_dataset(dataset, out_path)
    return dataset


def log_path_for(checkpoint_path: str) -> str:
    stem, _ = os.path.splitext(checkpoint_path)
    return f"{stem}_log.csv"


def cmd_train(
    train_config: TrainConfig,
    dataset,
    out_checkpoint: str,
    method: str = "causal-act",
    env_config: Optional[EnvConfig] = None,
) -> Tuple[PolicyParams, graph_policy.TrainingLog]:
    """Train one method and write its checkpoint plus the per-epoch loss CSV.

    Args:
        train_config: Hyperparameters; graph sampling and mask input follow `method`
        dataset: Loaded dataset or a path to a dataset file
        out_checkpoint: Checkpoint path; the log lands next to it
        method: Method label
        env_config: Environment the policy will run in; checked against the dataset

    Returns:
        The trained parameters and the training log
    """
    if isinstance(dataset, str):
        dataset = transfer_env.load_dataset(dataset)
    if env_config is not None and env_config.obs_dim != dataset.obs_dim:
        raise DataError(
            f"Dataset observations have {dataset.obs_dim} dims, environment "
            f"config gives {env_config.obs_dim}"
        )
    config = training_config_for(method, train_config, train_config.seed)
    params, training_log = graph_policy.train(dataset, config, method=method)
    graph_policy.save_checkpoint(params, out_checkpoint, config)
    training_log.write_csv(log_path_for(out_checkpoint))
    return params, training_log


def cmd_intervene(
    checkpoint,
    env_config: EnvConfig,
    config: InterventionConfig,
    out_dir: str,
    workers: int = 1,
) -> Tuple[GraphMask, intervention.EnergyModel, List]:
    """Run targeted intervention on a graph-conditioned checkpoint.

    Writes `intervention_trail.csv` and `energy_model.json` into `out_dir`.
    """
    params = (
        graph_policy.load_checkpoint(checkpoint)
        if isinstance(checkpoint, str)
        else checkpoint
    )
    if params.method in BASELINE_METHODS or not params.dims.mask_input:
        raise ConfigError(
            f"Checkpoint was trained with method '{params.method}', which never saw "
            "graph masks; targeted intervention needs a causal-act checkpoint"
        )
    g_star, model, records = intervention.targeted_intervention(
        params, env_config, config, workers=workers
    )
    out_dir = ensure_output_dir(out_dir)
    intervention.write_trail(records, os.path.join(out_dir, "intervention_trail.csv"))
    intervention.save_model(model, os.path.join(out_dir, "energy_model.json"))
    log.info(f"Best graph {g_star.to_string()} ({sum(g_star.bits)}/{len(g_star)} bits)")
    return g_star, model, records


def resolve_graph(source: str, feature_dim: int, seed: int) -> GraphMask:
    if source == "all-ones":
        g = GraphMask.ones(feature_dim)
    elif source == "all-zeros":
        g = GraphMask.zeros(feature_dim)
    elif source == "random":
        rng = np.random.default_rng(transfer_env.derive_seed(seed, 0, GRAPH_STREAM))
        g = sample_uniform_graph(feature_dim, rng)
    elif source.startswith("file:"):
        g = intervention.load_best_graph(source[len("file:") :])
    else:
        raise ConfigError(
            f"Unknown graph source '{source}', expected one of {', '.join(GRAPH_SOURCES)}"
        )
    if len(g) != feature_dim:
        raise DataError(f"Graph has {len(g)} bits, policy expects {feature_dim}")
    return g


def row_method(method: str, source: str) -> str:
    """Label of an evaluation row given the checkpoint method and graph source."""
    if method in BASELINE_METHODS:
        return method
    if source == "random":
        return "causal-act-random-graph"
    if source == "all-ones":
        return "causal-act-full-graph"
    if source == "all-zeros":
        return "causal-act-empty-graph"
    return "causal-act"


def evaluate_policy(
    params: PolicyParams,
    env_config: EnvConfig,
    g: GraphMask,
    episodes: int,
    seed: int,
    method: str,
    condition: str,
    workers: int = 1,
) -> ResultRow:
    seeds = [transfer_env.derive_seed(seed, e, EVAL_STREAM) for e in range(episodes)]

    def run(episode_seed: int):
        return graph_policy.rollout(params, env_config, g, episode_seed).flags

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            flags = list(pool.map(run, seeds))
    else:
        flags = [run(s) for s in seeds]
    row = ResultRow(
        method=method,
        condition=condition,
        seed=seed,
        touched=sum(f.touched for f in flags) / episodes,
        lifted=sum(f.lifted for f in flags) / episodes,
        transfer=sum(f.transferred for f in flags) / episodes,
        episodes=episodes,
        graph=g.to_string(),
    )
    log.info(
        f"{method} [{condition}, seed {seed}]: touched {row.touched:.2f} "
        f"lifted {row.lifted:.2f} transfer {row.transfer:.2f}"
    )
    return row


def cmd_eval(
    checkpoint,
    graph_source: str,
    env_config: EnvConfig,
    episodes: int,
    seeds: Sequence[int],
    condition: str = "out-of-distribution",
    out_path: Optional[str] = None,
    workers: int = 1,
) -> List[ResultRow]:
    """Evaluate a checkpoint with z = 0 under one graph source, one row per seed."""
    params = (
        graph_policy.load_checkpoint(checkpoint)
        if isinstance(checkpoint, str)
        else checkpoint
    )
    method = row_method(params.method, graph_source)
    rows = []
    for seed in seeds:
        g = resolve_graph(graph_source, params.dims.feature_dim, seed)
        rows.append(
            evaluate_policy(
                params, env_config, g, episodes, seed, method, condition, workers
            )
        )
    if out_path is not None:
        write_results(rows, out_path)
    return rows


## Grid
def _seed_cells(
    config: ExperimentConfig, seed: int, out_dir: str, workers: int
) -> List[ResultRow]:
    env_id = config.env
    env_ood = config.env.with_mode(config.ood_mode)
    env_intervene = (
        env_id.with_mode(config.intervention_mode)
        if config.intervention_mode is not None
        else env_id
    )
    seed_dir = ensure_output_dir(os.path.join(out_dir, f"seed_{seed}"))
    episodes = config.eval_episodes
    rows: List[ResultRow] = []

    def evaluate(params, g, method, env, condition):
        rows.append(
            evaluate_policy(params, env, g, episodes, seed, method, condition, workers)
        )

    demos = transfer_env.generate_demos(env_id, config.n_demos, seed)
    train = dataclasses.replace(config.train, seed=seed)

    act_params, _ = cmd_train(train, demos, os.path.join(seed_dir, "act.json"), "act")
    ones = GraphMask.ones(act_params.dims.feature_dim)
    evaluate(act_params, ones, "act", env_id, "in-distribution")
    evaluate(act_params, ones, "act", env_ood, "out-of-distribution")

    for k in config.dr_exponents:
        label = f"act-dr k={format_exponent(k)}"
        dr_env = env_id.with_mode("randomized", k)
        dr_demos = transfer_env.generate_demos(dr_env, config.n_demos, seed)
        name = f"act_dr_k{format_exponent(k)}.json"
        dr_params, _ = cmd_train(train, dr_demos, os.path.join(seed_dir, name), "act-dr")
        evaluate(dr_params, ones, label, env_ood, "out-of-distribution")

    causal_params, _ = cmd_train(
        train, demos, os.path.join(seed_dir, "causal_act.json"), "causal-act"
    )
    icfg = dataclasses.replace(config.intervention, seed=seed)
    g_star, _, _ = cmd_intervene(causal_params, env_intervene, icfg, seed_dir)
    evaluate(causal_params, g_star, "causal-act", env_id, "in-distribution")
    evaluate(causal_params, g_star, "causal-act", env_ood, "out-of-distribution")
    for source in ("random", "all-ones"):
        g = resolve_graph(source, causal_params.dims.feature_dim, seed)
        evaluate(
            causal_params,
            g,
            row_method("causal-act", source),
            env_ood,
            "out-of-distribution",
        )
    return rows


def cmd_experiment(
    config: ExperimentConfig, out_dir: Optional[str] = None, workers: int = 1
) -> List[ResultRow]:
    """Run the full method grid over every seed and emit results.csv and report.txt.

    Seeds run concurrently when `workers` > 1. A failing cell aborts the grid after
    the rows of completed seeds are written.
    """
    out_dir = ensure_output_dir(out_dir or config.output_dir)
    with open(os.path.join(out_dir, "config.json"), "w") as f:
        json.dump(config.to_dict(), f, indent=2, sort_keys=True)
    log.info(
        f"Experiment grid: {len(config.seeds)} seeds x {config.eval_episodes} "
        f"episodes, env '{config.env.distractor_mode}', OOD '{config.ood_mode}'"
    )

    completed: Dict[int, List[ResultRow]] = {}
    try:
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                futures = {
                    seed: pool.submit(_seed_cells, config, seed, out_dir, 1)
                    for seed in config.seeds
                }
                for seed, future in futures.items():
                    completed[seed] = future.result()
        else:
            for seed in config.seeds:
                completed[seed] = _seed_cells(config, seed, out_dir, 1)
    except Exception as e:
        log.error(f"Experiment aborted: {e}")
        write_results(_ordered_rows(config.seeds, completed), os.path.join(out_dir, "results.csv"))
        raise

    rows = _ordered_rows(config.seeds, completed)
    write_results(rows, os.path.join(out_dir, "results.csv"))
    with open(os.path.join(out_dir, "report.txt"), "w") as f:
        f.write(format_report(rows, config))
    log.info(f"Wrote {len(rows)} result rows and the report to {out_dir}")
    return rows


def _ordered_rows(
    seeds: Sequence[int], completed: Dict[int, List[ResultRow]]
) -> List[ResultRow]:
    return [row for seed in seeds if seed in completed for row in completed[seed]]


## Reporting
def write_results(rows: Sequence[ResultRow], path: str) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=ResultRow.CSV_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row.to_csv_row())


def aggregate(rows: Sequence[ResultRow]) -> List[Dict[str, Any]]:
    """Seed means per (method, condition), in order of first appearance."""
    groups: Dict[Tuple[str, str], List[ResultRow]] = {}
    for row in rows:
        groups.setdefault((row.method, row.condition), []).append(row)
    return [
        {
            "method": method,
            "condition": condition,
            "seeds": len(group),
            "touched": float(np.mean([r.touched for r in group])),
            "lifted": float(np.mean([r.lifted for r in group])),
            "transfer": float(np.mean([r.transfer for r in group])),
        }
        for (method, condition), group in groups.items()
    ]


def _table(title: str, entries: List[Dict[str, Any]], with_condition: bool) -> str:
    header = f"{'method':<26}"
    if with_condition:
        header += f"{'condition':<22}"
    header += f"{'touched':>9}{'lifted':>9}{'transfer':>10}"
    lines = [title, "=" * len(title), header, "-" * len(header)]
    for e in entries:
        line = f"{e['method']:<26}"
        if with_condition:
            line += f"{e['condition']:<22}"
        line += f"{e['touched']:>9.3f}{e['lifted']:>9.3f}{e['transfer']:>10.3f}"
        lines.append(line)
    return "\n".join(lines) + "\n"


def format_report(rows: Sequence[ResultRow], config: ExperimentConfig) -> str:
    entries = aggregate(rows)
    main = [e for e in entries if e["method"] in ("act", "causal-act")]
    ood = [e for e in entries if e["condition"] == "out-of-distribution"]
    preamble = (
        f"Stage success rates, means over {len(config.seeds)} seeds x "
        f"{config.eval_episodes} episodes\n"
        f"training env: {config.env.distractor_mode}, "
        f"out-of-distribution env: {config.ood_mode}\n\n"
    )
    return (
        preamble
        + _table("ACT vs Causal-ACT", main, with_condition=True)
        + "\n"
        + _table("Out-of-distribution methods and ablations", ood, with_condition=False)
    )
