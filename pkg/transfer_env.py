"""Kinematic bimanual cube-transfer environment, scripted expert and demo datasets.

Observation layout (obs_dim = 8 + 3 * n_distractors):
    0-1   cube x, y
    2-3   right gripper x, y
    4-5   left gripper x, y
    6-7   right grip closed, left grip closed (1.0 / 0.0)
    8-    distractor slots, three values each (x, y, colour)

Action layout (6 values): right vx, vy, left vx, vy, right grip command, left grip
command. Grip commands above 0.5 close the gripper.
"""

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, Iterator, List, Optional, Tuple

import numpy as np

from config import SCHEMA_VERSION
from errors import ConfigError, DataError
from models import EnvConfig, StageFlags

log = logging.getLogger("causal_act.transfer_env")

TASK_DIMS = 8
ACT_DIM = 6
JOINTS_DIM = 6
MAX_DR_COUNT = 6

RIGHT_HOME = (0.9, 0.6)
LEFT_HOME = (-0.9, 0.6)

# Documented distractor table for "fixed" mode: (x, y, colour) per slot
FIXED_DISTRACTORS = (
    (-0.6, -0.7, 0.2),
    (-0.3, -0.8, 0.4),
    (0.0, -0.9, 0.6),
    (-0.7, -0.2, 0.8),
    (-0.5, 0.0, 0.3),
    (0.3, 0.8, 0.9),
)

# Action-correlated slots: slot i, component c holds
#   ACTION_ENCODING_SCALE * action[(3 * i + c) % 6] + ACTION_ENCODING_OFFSET * (i + 1)
ACTION_ENCODING_SCALE = 0.5
ACTION_ENCODING_OFFSET = 0.1

HELD_NONE, HELD_RIGHT, HELD_LEFT = "none", "right", "left"

# Expert tuning: the left arm waits this far left of the meet point
LEFT_STAGING_OFFSET = (-0.3, 0.0)


def derive_seed(master: int, index: int, stream: int = 0) -> int:
    """Mix (master seed, stream, index) into an independent 32-bit seed.

    Uses numpy's SeedSequence spawn keys, so seeds do not depend on the order in
    which episodes are generated.
    """
    sequence = np.random.SeedSequence(entropy=int(master), spawn_key=(stream, index))
    return int(sequence.generate_state(1)[0])


@dataclass(frozen=True)
class Action:
    """One control command. Construct through `Action.clipped` to enforce limits."""

    right_velocity: Tuple[float, float] = (0.0, 0.0)
    left_velocity: Tuple[float, float] = (0.0, 0.0)
    right_grip: float = 0.0
    left_grip: float = 0.0

    @staticmethod
    def _clip_velocity(v, max_speed: float) -> Tuple[float, float]:
        v = np.asarray(v, dtype=float)
        speed = float(np.hypot(v[0], v[1]))
        if speed > max_speed:
            v = v * (max_speed / speed)
        return float(v[0]), float(v[1])

    @classmethod
    def clipped(
        cls, right_velocity, left_velocity, right_grip, left_grip, max_speed=1.0
    ) -> "Action":
        values = np.concatenate(
            [np.ravel(right_velocity), np.ravel(left_velocity), [right_grip, left_grip]]
        ).astype(float)
        if not np.all(np.isfinite(values)):
            raise DataError(f"Non-finite action {values.tolist()}")
        return cls(
            right_velocity=cls._clip_velocity(right_velocity, max_speed),
            left_velocity=cls._clip_velocity(left_velocity, max_speed),
            right_grip=float(np.clip(right_grip, 0.0, 1.0)),
            left_grip=float(np.clip(left_grip, 0.0, 1.0)),
        )

    @classmethod
    def from_vector(cls, vector, max_speed: float = 1.0) -> "Action":
        v = np.asarray(vector, dtype=float)
        if v.shape != (ACT_DIM,):
            raise DataError(f"Action vector must have {ACT_DIM} values, got {v.shape}")
        return cls.clipped(v[0:2], v[2:4], v[4], v[5], max_speed)

    def to_vector(self) -> np.ndarray:
        return np.array(
            [*self.right_velocity, *self.left_velocity, self.right_grip, self.left_grip]
        )


@dataclass
class EnvState:
    """Full simulator state. `step` returns a new instance."""

    config: EnvConfig
    right: np.ndarray
    left: np.ndarray
    right_closed: bool
    left_closed: bool
    cube: np.ndarray
    held_by: str
    distractors: np.ndarray
    prev_action: np.ndarray
    step_index: int
    flags: StageFlags = field(default_factory=StageFlags)
    distractor_count: int = 0

    @property
    def done(self) -> bool:
        return self.step_index >= self.config.episode_length

    def copy(self) -> "EnvState":
        return dataclasses.replace(
            self,
            right=self.right.copy(),
            left=self.left.copy(),
            cube=self.cube.copy(),
            distractors=self.distractors.copy(),
            prev_action=self.prev_action.copy(),
        )


## Domain randomization
def dr_weights(k: float, support: int = MAX_DR_COUNT) -> np.ndarray:
    """P(i) = i^k / sum_j j^k over i = 1..support; k = inf puts all mass on `support`."""
    if k < 0 or math.isnan(k):
        raise ConfigError(f"Domain-randomization exponent must be >= 0, got {k}")
    if math.isinf(k):
        weights = np.zeros(support)
        weights[-1] = 1.0
        return weights
    # normalise in log space so large k stays finite
    log_w = k * np.log(np.arange(1, support + 1, dtype=float))
    weights = np.exp(log_w - log_w.max())
    return weights / weights.sum()


def dr_sample_count(k: float, rng: np.random.Generator) -> int:
    """Draw a distractor count in 1..6 from the power-weighted distribution."""
    weights = dr_weights(k)
    return int(rng.choice(MAX_DR_COUNT, p=weights)) + 1


def _fixed_distractors(n: int) -> np.ndarray:
    table = np.array(FIXED_DISTRACTORS, dtype=float)
    rows = [table[i % len(table)] for i in range(n)]
    return np.array(rows).reshape(n, 3)


def encode_action(action: np.ndarray, n_slots: int) -> np.ndarray:
    """Affine encoding of an action into distractor slots (action-correlated mode)."""
    action = np.asarray(action, dtype=float)
    slots = np.zeros((n_slots, 3))
    for i in range(n_slots):
        for c in range(3):
            slots[i, c] = (
                ACTION_ENCODING_SCALE * action[(3 * i + c) % ACT_DIM]
                + ACTION_ENCODING_OFFSET * (i + 1)
            )
    return slots


## Environment
def reset(config: EnvConfig, episode_seed: int) -> EnvState:
    """Start an episode: grippers home, cube uniform in the spawn box."""
    rng = np.random.default_rng(episode_seed)
    cube = rng.uniform(config.spawn_low, config.spawn_high)
    n = config.n_distractors
    distractors = np.zeros((n, 3))
    count = 0
    mode = config.distractor_mode
    if mode == "fixed":
        distractors = _fixed_distractors(n)
        count = n
    elif mode == "randomized":
        count = min(dr_sample_count(config.dr_exponent, rng), n)
        half = config.arena_half_width
        distractors[:count, 0:2] = rng.uniform(-half, half, size=(count, 2))
        distractors[:count, 2] = rng.uniform(0.0, 1.0, size=count)
    elif mode == "action-correlated":
        count = n

    return EnvState(
        config=config,
        right=np.array(RIGHT_HOME, dtype=float),
        left=np.array(LEFT_HOME, dtype=float),
        right_closed=False,
        left_closed=False,
        cube=cube,
        held_by=HELD_NONE,
        distractors=distractors,
        prev_action=np.zeros(ACT_DIM),
        step_index=0,
        flags=StageFlags(),
        distractor_count=count,
    )


def _within(a: np.ndarray, b: np.ndarray, radius: float) -> bool:
    return float(np.linalg.norm(a - b)) <= radius + 1e-12


def step(state: EnvState, action: Action) -> Tuple[EnvState, StageFlags]:
    """Advance one control step.

    Grippers move by velocity * dt, grips close on commands above 0.5, a closing
    gripper within the grasp radius of a free cube picks it, and a hand-over happens
    when the right gripper opens while the closed left gripper is on the cube.
    """
    config = state.config
    if state.done:
        raise DataError(
            f"Episode already finished after {config.episode_length} steps"
        )
    action = Action.clipped(
        action.right_velocity,
        action.left_velocity,
        action.right_grip,
        action.left_grip,
        config.max_speed,
    )
    new = state.copy()
    half = config.arena_half_width
    new.right = np.clip(new.right + np.array(action.right_velocity) * config.dt, -half, half)
    new.left = np.clip(new.left + np.array(action.left_velocity) * config.dt, -half, half)
    new.right_closed = action.right_grip > 0.5
    new.left_closed = action.left_grip > 0.5

    radius = config.grasp_radius
    right_on = new.right_closed and _within(new.right, new.cube, radius)
    left_on = new.left_closed and _within(new.left, new.cube, radius)
    touched = right_on or left_on
    attempted = False
    transferred = False

    if new.held_by == HELD_NONE:
        if right_on:
            new.held_by = HELD_RIGHT
        elif left_on:
            new.held_by = HELD_LEFT
    elif new.held_by == HELD_RIGHT:
        held_pos = new.right
        left_on = new.left_closed and _within(new.left, held_pos, radius)
        if not new.right_closed:
            if left_on:
                new.held_by = HELD_LEFT
                transferred = _within(held_pos, np.array(config.meet_point), config.meet_tolerance)
            else:
                new.held_by = HELD_NONE
        else:
            attempted = left_on
    elif new.held_by == HELD_LEFT and not new.left_closed:
        new.held_by = HELD_NONE

    if new.held_by == HELD_RIGHT:
        new.cube = new.right.copy()
    elif new.held_by == HELD_LEFT:
        new.cube = new.left.copy()

    lifted = bool(
        new.held_by == HELD_RIGHT
        and abs(new.right[1] - config.meet_point[1]) <= config.meet_tolerance
    )
    old = state.flags
    f_touched = old.touched or touched
    f_lifted = old.lifted or (f_touched and lifted)
    f_attempted = old.attempted_transfer or (f_lifted and attempted)
    f_transferred = old.transferred or (f_attempted and transferred)
    new.flags = StageFlags(f_touched, f_lifted, f_attempted, f_transferred)

    new.prev_action = action.to_vector()
    if config.distractor_mode == "action-correlated":
        new.distractors = encode_action(new.prev_action, config.n_distractors)
    new.step_index = state.step_index + 1
    return new, new.flags


def observe(state: EnvState) -> np.ndarray:
    return np.concatenate(
        [
            state.cube,
            state.right,
            state.left,
            [float(state.right_closed), float(state.left_closed)],
            state.distractors.ravel(),
        ]
    )


def joints(state: EnvState) -> np.ndarray:
    return np.concatenate(
        [state.right, state.left, [float(state.right_closed), float(state.left_closed)]]
    )


def episode_reward(flags: StageFlags) -> int:
    """Staged reward: 0 none, 1 touched, 2 lifted, 3 attempted, 4 transferred."""
    if not flags.is_monotone():
        raise DataError(f"Stage flags violate the ladder: {flags}")
    return int(
        sum([flags.touched, flags.lifted, flags.attempted_transfer, flags.transferred])
    )


## Scripted expert
def _pursue(position: np.ndarray, target: np.ndarray, config: EnvConfig) -> np.ndarray:
    velocity = (np.asarray(target, dtype=float) - position) / config.dt
    speed = float(np.hypot(velocity[0], velocity[1]))
    if speed > config.max_speed:
        velocity = velocity * (config.max_speed / speed)
    return velocity


def expert_action(state: EnvState) -> Action:
    """Phase machine with ground-truth access: approach, grasp, carry, hand over."""
    config = state.config
    meet = np.array(config.meet_point, dtype=float)
    staging = meet + np.array(LEFT_STAGING_OFFSET)
    close_dist = 0.5 * config.grasp_radius
    zero = np.zeros(2)

    if state.held_by == HELD_LEFT:
        return Action.clipped(zero, zero, 0.0, 1.0, config.max_speed)

    if state.held_by == HELD_NONE:
        right_v = _pursue(state.right, state.cube, config)
        right_grip = 1.0 if _within(state.right, state.cube, close_dist) else 0.0
        left_v = _pursue(state.left, staging, config)
        return Action.clipped(right_v, left_v, right_grip, 0.0, config.max_speed)

    right_v = _pursue(state.right, meet, config)
    if not _within(state.right, meet, 1e-9):
        left_v = _pursue(state.left, staging, config)
        return Action.clipped(right_v, left_v, 1.0, 0.0, config.max_speed)

    left_v = _pursue(state.left, state.cube, config)
    left_grip = 1.0 if _within(state.left, state.cube, close_dist) else 0.0
    handed_over = state.left_closed and _within(state.left, state.cube, config.grasp_radius)
    right_grip = 0.0 if handed_over else 1.0
    return Action.clipped(right_v, left_v, right_grip, left_grip, config.max_speed)


## Demonstrations
@dataclass
class Episode:
    seed: int
    obs: np.ndarray
    joints: np.ndarray
    actions: np.ndarray
    reward: int
    flags: StageFlags = field(default_factory=StageFlags)
    distractor_count: int = 0
    fingerprint: str = ""

    def to_json(self) -> str:
        return json.dumps(
            {
                "seed": int(self.seed),
                "fingerprint": self.fingerprint,
                "distractor_count": int(self.distractor_count),
                "obs": self.obs.tolist(),
                "joints": self.joints.tolist(),
                "actions": self.actions.tolist(),
                "reward": int(self.reward),
                "flags": self.flags.to_dict(),
            }
        )


@dataclass
class Dataset:
    env_config: EnvConfig
    episodes: List[Episode]

    def __post_init__(self):
        for ep in self.episodes:
            if ep.obs.shape != (self.T, self.obs_dim):
                raise DataError(
                    f"Episode {ep.seed} observations have shape {ep.obs.shape}, "
                    f"expected {(self.T, self.obs_dim)}"
                )
            if ep.actions.shape != (self.T, ACT_DIM) or ep.joints.shape != (
                self.T,
                JOINTS_DIM,
            ):
                raise DataError(f"Episode {ep.seed} has inconsistent record shapes")

    @property
    def T(self) -> int:
        return self.env_config.episode_length

    @property
    def obs_dim(self) -> int:
        return self.env_config.obs_dim

    @property
    def act_dim(self) -> int:
        return ACT_DIM

    @property
    def joints_dim(self) -> int:
        return JOINTS_DIM

    def __len__(self) -> int:
        return len(self.episodes)

    def header(self) -> Dict[str, Any]:
        return {
            "schema_version": SCHEMA_VERSION,
            "format": "jsonl (one episode per line after this header)",
            "obs_dim": self.obs_dim,
            "act_dim": self.act_dim,
            "joints_dim": self.joints_dim,
            "T": self.T,
            "env_config": self.env_config.to_dict(),
        }


def run_expert_episode(config: EnvConfig, episode_seed: int) -> Episode:
    state = reset(config, episode_seed)
    obs, jnt, acts = [], [], []
    while not state.done:
        action = expert_action(state)
        obs.append(observe(state))
        jnt.append(joints(state))
        acts.append(action.to_vector())
        state, _ = step(state, action)
    return Episode(
        seed=episode_seed,
        obs=np.array(obs),
        joints=np.array(jnt),
        actions=np.array(acts),
        reward=episode_reward(state.flags),
        flags=state.flags,
        distractor_count=state.distractor_count,
        fingerprint=config.fingerprint(),
    )


def generate_demos(config: EnvConfig, n_episodes: int, seed: int) -> Dataset:
    """Roll out the expert; every episode must reach the full reward of 4."""
    if n_episodes < 1:
        raise ConfigError("n_episodes must be >= 1")
    episodes = []
    for i in range(n_episodes):
        episode = run_expert_episode(config, derive_seed(seed, i))
        if episode.reward < 4:
            raise DataError(
                f"Expert reached reward {episode.reward} on episode {i} "
                f"(seed {episode.seed}); the expert must complete every transfer"
            )
        episodes.append(episode)
    log.info(
        f"Generated {n_episodes} expert episodes in '{config.distractor_mode}' mode "
        f"(T={config.episode_length}, obs_dim={config.obs_dim})"
    )
    return Dataset(env_config=config, episodes=episodes)


def save_dataset(dataset: Dataset, path: str) -> None:
    with open(path, "w") as f:
        f.write(json.dumps(dataset.header()) + "\n")
        for episode in dataset.episodes:
            f.write(episode.to_json() + "\n")
    log.info(f"Wrote {len(dataset)} episodes to {path}")


def _iter_lines(path: str) -> Iterator[str]:
    with open(path, "r") as f:
        for line in f:
            if line.strip():
                yield line


def load_dataset(path: str) -> Dataset:
    try:
        lines = _iter_lines(path)
        header = json.loads(next(lines))
        if header.get("schema_version") != SCHEMA_VERSION:
            raise DataError(
                f"Unsupported dataset schema {header.get('schema_version')!r}"
            )
        config = EnvConfig.from_dict(header["env_config"])
        episodes = []
        for line in lines:
            raw = json.loads(line)
            episodes.append(
                Episode(
                    seed=int(raw["seed"]),
                    obs=np.array(raw["obs"], dtype=float),
                    joints=np.array(raw["joints"], dtype=float),
                    actions=np.array(raw["actions"], dtype=float),
                    reward=int(raw["reward"]),
                    flags=StageFlags(**raw.get("flags", {})),
                    distractor_count=int(raw.get("distractor_count", 0)),
                    fingerprint=raw.get("fingerprint", ""),
                )
            )
    except FileNotFoundError:
        raise DataError(f"Dataset file not found: {path}")
    except StopIteration:
        raise DataError(f"Dataset file {path} is empty")
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        if isinstance(e, DataError):
            raise
        raise DataError(f"Malformed dataset file {path}: {e}")

    if not episodes:
        raise DataError(f"Dataset file {path} contains no episodes")
    dataset = Dataset(env_config=config, episodes=episodes)
    if header.get("obs_dim") != dataset.obs_dim or header.get("T") != dataset.T:
        raise DataError(f"Dataset header of {path} disagrees with its env config")
    log.debug(f"Loaded {len(dataset)} episodes from {path}")
    return dataset
