"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 data error, 3 numeric failure.
"""

import dataclasses
import functools
import logging
import os
import sys
from typing import Optional

import click

import config
from causal_core import (
    DEFAULT_ALPHA,
    check_disentanglement,
    local_markov_fixture,
    policy_family_check,
    write_ci_reports,
)
from errors import CausalActError, ConfigError, DataError
from models import CONDITIONS, DISTRACTOR_MODES, METHODS, ExperimentConfig
import experiments
import transfer_env

log = logging.getLogger("causal_act.cli")


class ExitCodeGroup(click.Group):
    """Click group reporting usage errors with exit code 1."""

    def main(self, args=None, prog_name=None, complete_var=None, **extra):
        extra.pop("standalone_mode", None)
        try:
            return super().main(
                args, prog_name, complete_var, standalone_mode=False, **extra
            )
        except click.ClickException as e:
            e.show()
            sys.exit(ConfigError.exit_code)
        except click.Abort:
            click.echo("Aborted!", err=True)
            sys.exit(ConfigError.exit_code)


def exit_on_error(func):
    """Decorator that turns package errors into a one-line message and an exit code.

    Args:
        func (function): The click command body to wrap
    """

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        command = func.__name__.replace("_", "-")
        try:
            return func(*args, **kwargs)
        except CausalActError as e:
            log.error(f"{command} failed: {e}")
            click.echo(f"Error: {e}", err=True)
            sys.exit(e.exit_code)
        except OSError as e:
            log.error(f"{command} failed with an IO error: {e}")
            click.echo(f"Error: {e}", err=True)
            sys.exit(DataError.exit_code)

    return wrapper


def _experiment_config(
    config_path: Optional[str],
    preset: Optional[str],
    distractor_mode: Optional[str] = None,
    dr_exponent: Optional[str] = None,
) -> ExperimentConfig:
    cfg = experiments.load_experiment_config(config_path, preset)
    env = cfg.env
    mode = distractor_mode or env.distractor_mode
    if dr_exponent is not None:
        k = config.parse_exponent(dr_exponent)
    elif distractor_mode == "randomized":
        # Single act-dr runs take the experiment-level exponent
        k = cfg.dr_exponent
    else:
        k = None
    if distractor_mode is not None or k is not None:
        env = env.with_mode(mode, k)
    return dataclasses.replace(cfg, env=env)


config_option = click.option(
    "--config",
    "config_path",
    type=click.Path(dir_okay=False),
    default=None,
    help="JSON (or YAML) experiment config file.",
)
preset_option = click.option(
    "--preset",
    type=click.Choice(sorted(experiments.PRESETS)),
    default=None,
    help="Built-in configuration preset applied before the config file.",
)
mode_option = click.option(
    "--distractor-mode",
    type=click.Choice(DISTRACTOR_MODES),
    default=None,
    help="Override the environment's distractor mode.",
)
seed_option = click.option(
    "--seed", type=int, default=None, help="Seed; CAUSAL_ACT_SEED overrides it."
)


@click.group(cls=ExitCodeGroup)
@click.option("--log-level", default=None, help="Override CAUSAL_ACT_LOG_LEVEL.")
def cli(log_level):
    """Causal-ACT: graph-masked behaviour cloning with targeted intervention."""
    if log_level:
        logging.getLogger().setLevel(getattr(logging, log_level.upper(), logging.INFO))


@cli.command("gen-demos")
@config_option
@preset_option
@mode_option
@click.option("--dr-exponent", default=None, help="DR exponent k (number or 'inf').")
@click.option("--episodes", type=int, default=None, help="Number of expert episodes.")
@seed_option
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@exit_on_error
def gen_demos(config_path, preset, distractor_mode, dr_exponent, episodes, seed, out_path):
    """Roll out the scripted expert and write a JSONL dataset."""
    cfg = _experiment_config(config_path, preset, distractor_mode, dr_exponent)
    seed = config.resolve_seed(seed if seed is not None else cfg.env.seed)
    n = episodes if episodes is not None else cfg.n_demos
    dataset = experiments.cmd_gen_demos(cfg.env, n, seed, out_path)
    rewards = [ep.reward for ep in dataset.episodes]
    click.echo(
        f"{len(dataset)} episodes written to {out_path}; "
        f"reward 4 on {rewards.count(4)}/{len(rewards)}"
    )


@cli.command()
@config_option
@preset_option
@click.option("--dataset", "dataset_path", required=True, type=click.Path(dir_okay=False))
@click.option("--method", type=click.Choice(METHODS), default=None)
@click.option("--epochs", type=int, default=None)
@seed_option
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@exit_on_error
def train(config_path, preset, dataset_path, method, epochs, seed, out_path):
    """Train a policy and write its checkpoint and loss log."""
    cfg = _experiment_config(config_path, preset)
    updates = {"seed": config.resolve_seed(seed if seed is not None else cfg.train.seed)}
    if epochs is not None:
        updates["epochs"] = epochs
    train_config = dataclasses.replace(cfg.train, **updates)
    dataset = transfer_env.load_dataset(dataset_path)
    _, training_log = experiments.cmd_train(
        train_config, dataset, out_path, method or cfg.method, env_config=cfg.env
    )
    last = training_log.records[-1]
    click.echo(
        f"Trained {method or cfg.method} for {len(training_log.records)} epochs; "
        f"final total loss {last.total:.6f}; checkpoint {out_path}"
    )


@cli.command()
@config_option
@preset_option
@mode_option
@click.option("--checkpoint", required=True, type=click.Path(dir_okay=False))
@click.option("--iterations", type=int, default=None)
@click.option("--episodes", type=int, default=None, help="Rollouts per graph.")
@seed_option
@click.option("--workers", type=int, default=None)
@click.option("--out-dir", default=None, type=click.Path(file_okay=False))
@exit_on_error
def intervene(
    config_path, preset, distractor_mode, checkpoint, iterations, episodes, seed, workers, out_dir
):
    """Search the best graph mask of a causal-act checkpoint."""
    cfg = _experiment_config(config_path, preset, distractor_mode)
    updates = {
        "seed": config.resolve_seed(seed if seed is not None else cfg.intervention.seed)
    }
    if iterations is not None:
        updates["iterations"] = iterations
    if episodes is not None:
        updates["episodes"] = episodes
    icfg = dataclasses.replace(cfg.intervention, **updates)
    g_star, _, records = experiments.cmd_intervene(
        checkpoint,
        cfg.env,
        icfg,
        out_dir or cfg.output_dir,
        workers=workers or config.WORKERS,
    )
    click.echo(f"best graph {g_star.to_string()} after {len(records)} iterations")


@cli.command("eval")
@config_option
@preset_option
@mode_option
@click.option("--checkpoint", required=True, type=click.Path(dir_okay=False))
@click.option(
    "--graph",
    "graph_source",
    default="all-ones",
    help="all-ones, all-zeros, random or file:<path>.",
)
@click.option("--condition", type=click.Choice(CONDITIONS), default=None)
@click.option("--episodes", type=int, default=None)
@click.option("--seed", "seeds", type=int, multiple=True, help="Repeatable.")
@click.option("--workers", type=int, default=None)
@click.option("--out", "out_path", default=None, type=click.Path(dir_okay=False))
@exit_on_error
def evaluate(
    config_path,
    preset,
    distractor_mode,
    checkpoint,
    graph_source,
    condition,
    episodes,
    seeds,
    workers,
    out_path,
):
    """Evaluate a checkpoint with z = 0 and print stage success rates."""
    cfg = _experiment_config(config_path, preset, distractor_mode)
    if condition is None:
        condition = (
            "out-of-distribution"
            if cfg.env.distractor_mode == cfg.ood_mode
            else "in-distribution"
        )
    rows = experiments.cmd_eval(
        checkpoint,
        graph_source,
        cfg.env,
        episodes or cfg.eval_episodes,
        experiments.resolve_seeds(seeds or cfg.seeds),
        condition=condition,
        out_path=out_path,
        workers=workers or config.WORKERS,
    )
    for row in rows:
        click.echo(
            f"{row.method} {row.condition} seed {row.seed}: touched {row.touched:.3f} "
            f"lifted {row.lifted:.3f} transfer {row.transfer:.3f}"
        )


@cli.command()
@config_option
@preset_option
@click.option("--out-dir", default=None, type=click.Path(file_okay=False))
@click.option("--workers", type=int, default=None)
@exit_on_error
def experiment(config_path, preset, out_dir, workers):
    """Run the full method grid and write results.csv and report.txt."""
    cfg = _experiment_config(config_path, preset)
    cfg = dataclasses.replace(cfg, seeds=experiments.resolve_seeds(cfg.seeds))
    out_dir = out_dir or cfg.output_dir
    experiments.cmd_experiment(cfg, out_dir, workers=workers or cfg.workers)
    with open(os.path.join(out_dir, "report.txt"), "r") as f:
        click.echo(f.read())


@cli.command("scm-check")
@click.option("--graphs", "n_graphs", type=int, default=1000)
@click.option("--trials", type=int, default=100)
@click.option("--samples", type=int, default=10_000)
@click.option("--alpha", type=float, default=DEFAULT_ALPHA)
@seed_option
@click.option("--dataset", "dataset_path", default=None, type=click.Path(dir_okay=False))
@click.option("--out", "out_path", default=None, type=click.Path(dir_okay=False))
@exit_on_error
def scm_check(n_graphs, trials, samples, alpha, seed, dataset_path, out_path):
    """Run the causal-graph verification suite."""
    seed = config.resolve_seed(seed if seed is not None else 0)
    family = policy_family_check(n_graphs, seed)
    click.echo(
        f"policy graphs: {family['passed']}/{family['graphs']} uniquely solvable, "
        f"{family['mutated_failed']}/{family['graphs']} self-cycle mutants rejected"
    )
    fixture = local_markov_fixture(trials=trials, n_samples=samples, seed=seed, alpha=alpha)
    click.echo(f"local Markov fixture: {fixture['passed']}/{fixture['trials']} trials passed")
    reports = list(fixture["reports"])
    if dataset_path is not None:
        result = check_disentanglement(transfer_env.load_dataset(dataset_path), alpha)
        click.echo(
            f"disentanglement: {result.dependent_fraction:.3f} of "
            f"{len(result.reports)} pairs dependent, "
            f"{len(result.skipped_dims)} dims skipped"
        )
        reports.extend(result.reports)
    if out_path is not None:
        write_ci_reports(reports, out_path)
        click.echo(f"{len(reports)} CI reports written to {out_path}")
    failed = family["passed"] < family["graphs"] or family["mutated_failed"] < family["graphs"]
    if failed:
        raise DataError("policy graph family check failed")


def main(argv=None) -> int:
    cli.main(args=argv, prog_name="causal-act")
    return 0


if __name__ == "__main__":
    sys.exit(main())
