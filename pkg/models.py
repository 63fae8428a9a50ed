"""Configuration and record models shared across the Causal-ACT modules."""

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Tuple

import numpy as np

from config import format_exponent, parse_exponent
from errors import ConfigError, DataError

DISTRACTOR_MODES = ("fixed", "absent", "randomized", "action-correlated")
ENCODER_MODES = ("identity", "mlp")
GRAPH_SAMPLING = ("uniform", "all-ones")
METHODS = (
    "act",
    "act-dr",
    "causal-act",
    "causal-act-random-graph",
    "causal-act-full-graph",
)
CONDITIONS = ("in-distribution", "out-of-distribution")


def _from_dict(cls, data: Optional[Dict[str, Any]], section: str):
    """Build a dataclass from a dict, rejecting unknown keys."""
    data = dict(data or {})
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"Unknown keys in '{section}' section: {', '.join(unknown)}")
    for f in dataclasses.fields(cls):
        if f.name in data and isinstance(data[f.name], list):
            data[f.name] = tuple(data[f.name])
    return cls(**data)


@dataclass(frozen=True)
class EnvConfig:
    """Cube-transfer arena configuration. Lengths are arena units, time in steps."""

    arena_half_width: float = 1.0
    spawn_low: Tuple[float, float] = (0.2, -0.6)
    spawn_high: Tuple[float, float] = (0.6, -0.2)
    n_distractors: int = 6
    distractor_mode: str = "fixed"
    dr_exponent: float = 0.0
    episode_length: int = 60
    meet_point: Tuple[float, float] = (0.0, 0.4)
    meet_tolerance: float = 0.1
    grasp_radius: float = 0.08
    max_speed: float = 1.0
    dt: float = 0.1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "dr_exponent", parse_exponent(self.dr_exponent))
        if self.n_distractors < 0:
            raise ConfigError("n_distractors must be >= 0")
        if self.episode_length < 1:
            raise ConfigError("episode_length must be >= 1")
        if self.grasp_radius <= 0:
            raise ConfigError("grasp_radius must be > 0")
        if self.max_speed <= 0 or self.dt <= 0:
            raise ConfigError("max_speed and dt must be > 0")
        if self.distractor_mode not in DISTRACTOR_MODES:
            raise ConfigError(
                f"Unknown distractor mode '{self.distractor_mode}', "
                f"expected one of {', '.join(DISTRACTOR_MODES)}"
            )
        if self.distractor_mode == "randomized" and self.n_distractors < 6:
            raise ConfigError("randomized distractors need n_distractors >= 6")
        half = self.arena_half_width
        for lo, hi in zip(self.spawn_low, self.spawn_high):
            if lo > hi or lo < -half or hi > half:
                raise ConfigError("cube spawn range must lie inside the arena")

    @property
    def obs_dim(self) -> int:
        return 8 + 3 * self.n_distractors

    def with_mode(self, mode: str, dr_exponent: Optional[float] = None) -> "EnvConfig":
        updates = {"distractor_mode": mode}
        if dr_exponent is not None:
            updates["dr_exponent"] = dr_exponent
        return dataclasses.replace(self, **updates)

    def to_dict(self) -> Dict[str, Any]:
        data = dataclasses.asdict(self)
        data["spawn_low"] = list(self.spawn_low)
        data["spawn_high"] = list(self.spawn_high)
        data["meet_point"] = list(self.meet_point)
        data["dr_exponent"] = format_exponent(self.dr_exponent)
        return data

    @classmethod
    def from_dict(cls, data: Optional[Dict[str, Any]]) -> "EnvConfig":
        return _from_dict(cls, data, "env")

    def fingerprint(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(payload).hexdigest()[:16]


@dataclass(frozen=True)
class StageFlags:
    """Staged task progress. Each flag implies all flags before it."""

    touched: bool = False
    lifted: bool = False
    attempted_transfer: bool = False
    transferred: bool = False

    def __post_init__(self):
        # numpy comparisons hand back np.bool_, which json cannot encode
        for name in ("touched", "lifted", "attempted_transfer", "transferred"):
            object.__setattr__(self, name, bool(getattr(self, name)))

    def is_monotone(self) -> bool:
        ladder = (self.touched, self.lifted, self.attempted_transfer, self.transferred)
        return all(upper or not lower for upper, lower in zip(ladder, ladder[1:]))

    def to_dict(self) -> Dict[str, bool]:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters. Defaults are desk-scale."""

    epochs: int = 500
    batch_size: int = 8
    steps_per_epoch: Optional[int] = None
    chunk: int = 10
    beta: float = 1.0
    learning_rate: float = 1e-3
    encoder_lr: Optional[float] = None
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    encoder_mode: str = "identity"
    graph_sampling: str = "uniform"
    mask_input: bool = True
    feature_dim: int = 32
    z_dim: int = 8
    hidden: Tuple[int, ...] = (64, 64)
    zero_init_output: bool = True
    log_every: int = 50

    def __post_init__(self):
        if self.chunk < 1:
            raise ConfigError("chunk must be >= 1")
        if self.beta < 0:
            raise ConfigError("beta must be >= 0")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ConfigError("steps_per_epoch must be >= 1")
        if self.learning_rate <= 0 or (
            self.encoder_lr is not None and self.encoder_lr <= 0
        ):
            raise ConfigError("learning rates must be > 0")
        if self.encoder_mode not in ENCODER_MODES:
            raise ConfigError(f"Unknown encoder mode '{self.encoder_mode}'")
        if self.graph_sampling not in GRAPH_SAMPLING:
            raise ConfigError(f"Unknown graph sampling '{self.graph_sampling}'")
        if self.feature_dim < 1 or self.z_dim < 1:
            raise ConfigError("feature_dim and z_dim must be >= 1")

    def to_dict(self) -> Dict[str, Any]:
        data = dataclasses.asdict(self)
        data["hidden"] = list(self.hidden)
        return data

    @classmethod
    def from_dict(cls, data: Optional[Dict[str, Any]]) -> "TrainConfig":
        return _from_dict(cls, data, "train")


@dataclass(frozen=True)
class InterventionConfig:
    """Targeted-intervention search settings."""

    iterations: int = 50
    episodes: int = 1
    ridge: float = 1e-3
    tau: float = 1.0
    seed: int = 0
    common_episodes: bool = True

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.episodes < 1:
            raise ConfigError("episodes must be >= 1")
        if self.ridge < 0:
            raise ConfigError("ridge must be >= 0")
        if not self.tau > 0:
            raise ConfigError("tau must be > 0")

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: Optional[Dict[str, Any]]) -> "InterventionConfig":
        return _from_dict(cls, data, "intervention")


@dataclass
class InterventionRecord:
    """One evaluated graph and its mean episodic reward."""

    graph: np.ndarray
    reward: float
    episodes: int

    def __post_init__(self):
        self.graph = np.asarray(self.graph, dtype=np.int8)
        if not 0.0 <= self.reward <= 4.0:
            raise DataError(f"Intervention reward {self.reward} outside [0, 4]")
        if self.episodes < 1:
            raise DataError("Intervention records need at least one episode")

    def bits(self) -> str:
        return "".join(str(int(b)) for b in self.graph)


@dataclass(frozen=True)
class ExperimentConfig:
    """Top-level experiment configuration."""

    env: EnvConfig = field(default_factory=EnvConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    intervention: InterventionConfig = field(default_factory=InterventionConfig)
    eval_episodes: int = 50
    seeds: Tuple[int, ...] = (0, 1, 2)
    method: str = "causal-act"
    dr_exponent: float = 0.0
    dr_exponents: Tuple[float, ...] = (0.0, 3.0, 6.0, math.inf)
    n_demos: int = 200
    ood_mode: str = "absent"
    intervention_mode: Optional[str] = None
    output_dir: str = "runs"
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "dr_exponent", parse_exponent(self.dr_exponent))
        object.__setattr__(
            self,
            "dr_exponents",
            tuple(parse_exponent(k) for k in self.dr_exponents),
        )
        if self.eval_episodes < 1:
            raise ConfigError("eval_episodes must be >= 1")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if self.method not in METHODS:
            raise ConfigError(
                f"Unknown method '{self.method}', expected one of {', '.join(METHODS)}"
            )
        if self.n_demos < 1:
            raise ConfigError("n_demos must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        for mode in (self.ood_mode, self.intervention_mode):
            if mode is not None and mode not in DISTRACTOR_MODES:
                raise ConfigError(f"Unknown distractor mode '{mode}'")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "env": self.env.to_dict(),
            "train": self.train.to_dict(),
            "intervention": self.intervention.to_dict(),
            "eval_episodes": self.eval_episodes,
            "seeds": list(self.seeds),
            "method": self.method,
            "dr_exponent": format_exponent(self.dr_exponent),
            "dr_exponents": [format_exponent(k) for k in self.dr_exponents],
            "n_demos": self.n_demos,
            "ood_mode": self.ood_mode,
            "intervention_mode": self.intervention_mode,
            "output_dir": self.output_dir,
            "workers": self.workers,
        }

    @classmethod
    def from_dict(cls, data: Optional[Dict[str, Any]]) -> "ExperimentConfig":
        data = dict(data or {})
        sections = {
            "env": EnvConfig.from_dict(data.pop("env", None)),
            "train": TrainConfig.from_dict(data.pop("train", None)),
            "intervention": InterventionConfig.from_dict(
                data.pop("intervention", None)
            ),
        }
        data.update(sections)
        return _from_dict(cls, data, "experiment")


@dataclass(frozen=True)
class ResultRow:
    """Aggregated stage success rates of one evaluation cell."""

    method: str
    condition: str
    seed: int
    touched: float
    lifted: float
    transfer: float
    episodes: int
    graph: str = ""

    def __post_init__(self):
        if self.condition not in CONDITIONS:
            raise DataError(f"Unknown condition '{self.condition}'")
        rates = (self.touched, self.lifted, self.transfer)
        if any(not 0.0 <= r <= 1.0 for r in rates):
            raise DataError(f"Success rates outside [0, 1]: {rates}")
        if not self.touched >= self.lifted >= self.transfer:
            raise DataError(f"Stage ladder violated in result row: {rates}")

    CSV_FIELDS = (
        "method",
        "condition",
        "seed",
        "touched",
        "lifted",
        "transfer",
        "episodes",
        "graph",
    )

    def to_csv_row(self) -> Dict[str, Any]:
        row = dataclasses.asdict(self)
        for key in ("touched", "lifted", "transfer"):
            row[key] = f"{row[key]:.4f}"
        return row
