"""Graph-masked CVAE behaviour-cloning policy.

The decoder sees [x * g, g, joints, z]: features x gated by a binary graph mask g, the
mask itself, proprioception and the style latent z. Baseline policies drop the raw
mask from the decoder input and always use the all-ones graph.
"""

import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from config import SCHEMA_VERSION
from errors import ConfigError, DataError, NumericError
from models import EnvConfig, StageFlags, TrainConfig
from tensor_net import (
    AdamState,
    GaussianHead,
    Mlp,
    adam_step,
    backward,
    forward,
    init_adam,
    init_mlp,
    kl_diag_gaussian,
    mlp_from_dict,
    mlp_to_dict,
    mse_loss,
    reparameterize,
)
import transfer_env

log = logging.getLogger("causal_act.graph_policy")


@dataclass(frozen=True)
class GraphMask:
    """Binary gate per policy feature."""

    bits: Tuple[int, ...]

    def __post_init__(self):
        bits = tuple(int(b) for b in np.asarray(self.bits).ravel())
        if any(b not in (0, 1) for b in bits):
            raise DataError("Graph mask entries must be 0 or 1")
        object.__setattr__(self, "bits", bits)

    def __len__(self) -> int:
        return len(self.bits)

    def as_array(self) -> np.ndarray:
        return np.array(self.bits, dtype=float)

    def to_string(self) -> str:
        return "".join(str(b) for b in self.bits)

    @classmethod
    def from_string(cls, text: str) -> "GraphMask":
        text = text.strip()
        if not text or any(c not in "01" for c in text):
            raise DataError(f"Invalid graph bit string {text!r}")
        return cls(tuple(int(c) for c in text))

    @classmethod
    def ones(cls, n: int) -> "GraphMask":
        return cls((1,) * n)

    @classmethod
    def zeros(cls, n: int) -> "GraphMask":
        return cls((0,) * n)


def sample_uniform_graph(feature_dim: int, rng: np.random.Generator) -> GraphMask:
    """Every bit an independent fair coin."""
    if feature_dim < 1:
        raise ConfigError("feature_dim must be >= 1")
    return GraphMask(tuple(rng.integers(0, 2, size=feature_dim)))


@dataclass(frozen=True)
class PolicyDims:
    obs_dim: int
    act_dim: int
    joints_dim: int
    feature_dim: int
    z_dim: int
    chunk: int
    encoder_mode: str = "identity"
    mask_input: bool = True

    def __post_init__(self):
        if self.encoder_mode == "identity" and self.feature_dim != self.obs_dim:
            raise DataError("identity encoder requires feature_dim == obs_dim")

    @property
    def decoder_input(self) -> int:
        masked = self.feature_dim * (2 if self.mask_input else 1)
        return masked + self.joints_dim + self.z_dim

    @property
    def style_input(self) -> int:
        return self.act_dim * self.chunk + self.joints_dim


@dataclass
class PolicyParams:
    """Encoder h, style encoder q and decoder pi, plus their optimizer states."""

    dims: PolicyDims
    encoder: Optional[Mlp]
    style: Mlp
    decoder: Mlp
    method: str = "causal-act"
    adam: Dict[str, AdamState] = field(default_factory=dict)

    def __post_init__(self):
        d = self.dims
        if (self.encoder is None) != (d.encoder_mode == "identity"):
            raise DataError(f"Encoder presence does not match mode '{d.encoder_mode}'")
        if self.encoder is not None and (
            self.encoder.input_size != d.obs_dim
            or self.encoder.output_size != d.feature_dim
        ):
            raise DataError("Encoder dimensions disagree with the policy dims")
        if self.style.input_size != d.style_input or (
            self.style.output_size != 2 * d.z_dim
        ):
            raise DataError("Style encoder dimensions disagree with the policy dims")
        if self.decoder.input_size != d.decoder_input or (
            self.decoder.output_size != d.act_dim * d.chunk
        ):
            raise DataError("Decoder dimensions disagree with the policy dims")

    def networks(self) -> Dict[str, Mlp]:
        nets = {"style": self.style, "decoder": self.decoder}
        if self.encoder is not None:
            nets["encoder"] = self.encoder
        return nets


@dataclass
class EpochRecord:
    epoch: int
    mse: float
    kl: float
    total: float


@dataclass
class TrainingLog:
    records: List[EpochRecord] = field(default_factory=list)

    CSV_FIELDS = ("epoch", "mse", "kl", "total")

    def write_csv(self, path: str) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(self.CSV_FIELDS)
            for r in self.records:
                writer.writerow([r.epoch, repr(r.mse), repr(r.kl), repr(r.total)])


@dataclass
class Batch:
    obs: np.ndarray
    joints: np.ndarray
    chunks: np.ndarray
    graphs: np.ndarray
    noise: np.ndarray


@dataclass
class RolloutResult:
    flags: StageFlags
    reward: int
    queries: int


def init_policy(
    dims: PolicyDims,
    rng: np.random.Generator,
    hidden: Tuple[int, ...] = (64, 64),
    zero_output: bool = True,
    method: str = "causal-act",
) -> PolicyParams:
    hidden = tuple(hidden)
    encoder = None
    if dims.encoder_mode == "mlp":
        encoder = init_mlp((dims.obs_dim, hidden[0], dims.feature_dim), rng)
    style = init_mlp(
        (dims.style_input,) + hidden + (2 * dims.z_dim,), rng, zero_output=zero_output
    )
    decoder = init_mlp(
        (dims.decoder_input,) + hidden + (dims.act_dim * dims.chunk,),
        rng,
        zero_output=zero_output,
    )
    return PolicyParams(
        dims=dims, encoder=encoder, style=style, decoder=decoder, method=method
    )


def encode(params: PolicyParams, obs: np.ndarray) -> np.ndarray:
    obs = np.asarray(obs, dtype=float)
    if obs.shape[-1] != params.dims.obs_dim:
        raise DataError(
            f"Observation has {obs.shape[-1]} dims, policy expects {params.dims.obs_dim}"
        )
    if params.encoder is None:
        return obs.copy()
    x, _ = forward(params.encoder, obs)
    return x


def _mask_array(g, feature_dim: int) -> np.ndarray:
    if isinstance(g, GraphMask):
        g = g.as_array()
    g = np.asarray(g, dtype=float)
    if g.shape[-1] != feature_dim:
        raise DataError(f"Graph has {g.shape[-1]} bits, policy expects {feature_dim}")
    return g


def decoder_input(params: PolicyParams, x, g, joints, z) -> np.ndarray:
    d = params.dims
    x = np.asarray(x, dtype=float)
    g = _mask_array(g, d.feature_dim)
    joints = np.asarray(joints, dtype=float)
    z = np.asarray(z, dtype=float)
    if x.shape[-1] != d.feature_dim:
        raise DataError(f"Features have {x.shape[-1]} dims, expected {d.feature_dim}")
    if joints.shape[-1] != d.joints_dim or z.shape[-1] != d.z_dim:
        raise DataError(
            f"Joints/z dims {joints.shape[-1]}/{z.shape[-1]} do not match "
            f"{d.joints_dim}/{d.z_dim}"
        )
    if x.ndim == 2:
        g = np.broadcast_to(g, x.shape)
    gated = np.where(g > 0.5, x, 0.0)
    parts = [gated, g, joints, z] if d.mask_input else [gated, joints, z]
    return np.concatenate(parts, axis=-1)


def decode(params: PolicyParams, x, g, joints, z) -> np.ndarray:
    """Action chunk of shape (chunk, act_dim); batched inputs add a leading axis."""
    inp = decoder_input(params, x, g, joints, z)
    out, _ = forward(params.decoder, inp)
    d = params.dims
    return out.reshape(out.shape[:-1] + (d.chunk, d.act_dim))


def style_encode(params: PolicyParams, action_chunk, joints) -> GaussianHead:
    d = params.dims
    chunk = np.asarray(action_chunk, dtype=float)
    joints = np.asarray(joints, dtype=float)
    batched = chunk.ndim == 3
    expected = (d.chunk, d.act_dim)
    if chunk.shape[-2:] != expected:
        raise DataError(f"Action chunk has shape {chunk.shape}, expected {expected}")
    flat = chunk.reshape((chunk.shape[0], -1) if batched else (-1,))
    out, _ = forward(params.style, np.concatenate([flat, joints], axis=-1))
    return GaussianHead(mu=out[..., : d.z_dim], logvar=out[..., d.z_dim :])


def act(params: PolicyParams, obs, joints, g) -> np.ndarray:
    """Inference: decode with z = 0."""
    z = np.zeros(params.dims.z_dim)
    return decode(params, encode(params, obs), g, joints, z)


## Training
def batch_loss(
    params: PolicyParams, batch: Batch, beta: float, with_grads: bool = True
) -> Tuple[Dict[str, float], Optional[Dict[str, list]]]:
    """MSE(chunk prediction) + beta * KL(q || N(0, I)) on a batch, with gradients."""
    d = params.dims
    n = batch.obs.shape[0]
    if params.encoder is not None:
        x, enc_cache = forward(params.encoder, batch.obs)
    else:
        x, enc_cache = batch.obs, None

    style_in = np.concatenate([batch.chunks.reshape(n, -1), batch.joints], axis=1)
    style_out, style_cache = forward(params.style, style_in)
    head = GaussianHead(mu=style_out[:, : d.z_dim], logvar=style_out[:, d.z_dim :])
    z = reparameterize(head, batch.noise)

    dec_in = decoder_input(params, x, batch.graphs, batch.joints, z)
    pred, dec_cache = forward(params.decoder, dec_in)
    mse, d_pred = mse_loss(pred, batch.chunks.reshape(n, -1))
    kl, d_mu, d_logvar = kl_diag_gaussian(head)
    losses = {"mse": mse, "kl": kl, "total": mse + beta * kl}
    if not with_grads:
        return losses, None

    dec_grads, d_in = backward(params.decoder, dec_cache, d_pred)
    offset = d.feature_dim * (2 if d.mask_input else 1) + d.joints_dim
    d_z = d_in[:, offset : offset + d.z_dim]
    std = np.exp(0.5 * head.logvar)
    d_style = np.concatenate(
        [beta * d_mu + d_z, beta * d_logvar + d_z * batch.noise * 0.5 * std], axis=1
    )
    style_grads, _ = backward(params.style, style_cache, d_style)
    grads = {"decoder": dec_grads.flat(), "style": style_grads.flat()}
    if params.encoder is not None:
        d_x = d_in[:, : d.feature_dim] * (batch.graphs > 0.5)
        enc_grads, _ = backward(params.encoder, enc_cache, d_x)
        grads["encoder"] = enc_grads.flat()
    return losses, grads


def _stack_dataset(dataset) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    obs = np.stack([ep.obs for ep in dataset.episodes])
    jnt = np.stack([ep.joints for ep in dataset.episodes])
    acts = np.stack([ep.actions for ep in dataset.episodes])
    return obs, jnt, acts


def sample_batch(
    arrays, batch_size: int, chunk: int, params: PolicyParams, uniform: bool, rng
) -> Batch:
    obs, jnt, acts = arrays
    n_episodes, T = obs.shape[0], obs.shape[1]
    ep = rng.integers(0, n_episodes, size=batch_size)
    t = rng.integers(0, T - chunk + 1, size=batch_size)
    window = t[:, None] + np.arange(chunk)[None, :]
    F = params.dims.feature_dim
    if uniform:
        graphs = np.array([sample_uniform_graph(F, rng).as_array() for _ in range(batch_size)])
    else:
        graphs = np.ones((batch_size, F))
    return Batch(
        obs=obs[ep, t],
        joints=jnt[ep, t],
        chunks=acts[ep[:, None], window],
        graphs=graphs,
        noise=rng.standard_normal((batch_size, params.dims.z_dim)),
    )


def policy_dims(dataset, config: TrainConfig) -> PolicyDims:
    feature_dim = dataset.obs_dim if config.encoder_mode == "identity" else config.feature_dim
    return PolicyDims(
        obs_dim=dataset.obs_dim,
        act_dim=dataset.act_dim,
        joints_dim=dataset.joints_dim,
        feature_dim=feature_dim,
        z_dim=config.z_dim,
        chunk=config.chunk,
        encoder_mode=config.encoder_mode,
        mask_input=config.mask_input,
    )


def train(
    dataset, config: TrainConfig, method: str = "causal-act"
) -> Tuple[PolicyParams, TrainingLog]:
    """Minimise MSE + beta * KL with Adam, sampling a fresh graph per sample.

    Args:
        dataset: Expert demonstrations (transfer_env.Dataset)
        config: Training hyperparameters
        method: Method label stored with the parameters

    Returns:
        The trained parameters (with optimizer state) and the per-epoch loss log
    """
    if not dataset.episodes:
        raise DataError("Cannot train on an empty dataset")
    if config.chunk > dataset.T:
        raise ConfigError(
            f"Chunk size {config.chunk} exceeds episode length {dataset.T}"
        )
    rng = np.random.default_rng(config.seed)
    dims = policy_dims(dataset, config)
    params = init_policy(
        dims, rng, config.hidden, config.zero_init_output, method=method
    )
    adam = {}
    for name, net in params.networks().items():
        lr = config.encoder_lr if (name == "encoder" and config.encoder_lr) else config.learning_rate
        adam[name] = init_adam(
            net.parameters(), lr, config.adam_beta1, config.adam_beta2, config.adam_eps
        )

    arrays = _stack_dataset(dataset)
    steps = config.steps_per_epoch or math.ceil(len(dataset) / config.batch_size)
    uniform = config.graph_sampling == "uniform"
    training_log = TrainingLog()
    log.info(
        f"Training {method} policy: {config.epochs} epochs x {steps} steps, "
        f"batch {config.batch_size}, chunk {config.chunk}, beta {config.beta}, "
        f"graphs {config.graph_sampling}, encoder {config.encoder_mode}"
    )

    for epoch in range(1, config.epochs + 1):
        sums = {"mse": 0.0, "kl": 0.0, "total": 0.0}
        for s in range(steps):
            batch = sample_batch(arrays, config.batch_size, config.chunk, params, uniform, rng)
            losses, grads = batch_loss(params, batch, config.beta)
            if not all(math.isfinite(v) for v in losses.values()):
                log.error(f"Non-finite loss at epoch {epoch}, step {s}: {losses}")
                raise NumericError(
                    f"Non-finite loss at epoch {epoch}, step {s}: "
                    f"mse={losses['mse']}, kl={losses['kl']}"
                )
            for key in sums:
                sums[key] += losses[key]
            params = _apply_updates(params, grads, adam)
            adam = params.adam

        record = EpochRecord(
            epoch=epoch,
            mse=sums["mse"] / steps,
            kl=sums["kl"] / steps,
            total=sums["total"] / steps,
        )
        training_log.records.append(record)
        if epoch == 1 or epoch % config.log_every == 0 or epoch == config.epochs:
            log.info(
                f"Epoch {epoch}/{config.epochs}: mse={record.mse:.5f} "
                f"kl={record.kl:.5f} total={record.total:.5f}"
            )
    return params, training_log


def _apply_updates(
    params: PolicyParams, grads: Dict[str, list], adam: Dict[str, AdamState]
) -> PolicyParams:
    nets = params.networks()
    new_nets, new_adam = {}, {}
    for name, net in nets.items():
        new_p, new_adam[name] = adam_step(net.parameters(), grads[name], adam[name])
        new_nets[name] = net.with_parameters(new_p)
    return PolicyParams(
        dims=params.dims,
        encoder=new_nets.get("encoder"),
        style=new_nets["style"],
        decoder=new_nets["decoder"],
        method=params.method,
        adam=new_adam,
    )


def fold_full_graph(params: PolicyParams) -> PolicyParams:
    """Rewrite a mask-conditioned policy as the equivalent baseline for g = all-ones.

    With g fixed to ones the mask columns of the decoder's first layer only add a
    constant, which is folded into that layer's bias.
    """
    d = params.dims
    if not d.mask_input:
        return params
    F = d.feature_dim
    w0, b0 = params.decoder.weights[0], params.decoder.biases[0]
    weights = [np.concatenate([w0[:, :F], w0[:, 2 * F :]], axis=1)]
    biases = [b0 + w0[:, F : 2 * F].sum(axis=1)]
    decoder = Mlp(
        layer_sizes=(d.decoder_input - F,) + params.decoder.layer_sizes[1:],
        weights=weights + [w.copy() for w in params.decoder.weights[1:]],
        biases=biases + [b.copy() for b in params.decoder.biases[1:]],
        activations=params.decoder.activations,
    )
    return PolicyParams(
        dims=dataclasses.replace(d, mask_input=False),
        encoder=params.encoder,
        style=params.style,
        decoder=decoder,
        method=params.method,
    )


## Execution
def rollout(
    params: PolicyParams, env_config: EnvConfig, g, episode_seed: int
) -> RolloutResult:
    """Chunk-and-commit execution: query every `chunk` steps, run the whole chunk."""
    if env_config.obs_dim != params.dims.obs_dim:
        raise DataError(
            f"Environment observations have {env_config.obs_dim} dims, "
            f"policy expects {params.dims.obs_dim}"
        )
    g = _mask_array(g, params.dims.feature_dim)
    state = transfer_env.reset(env_config, episode_seed)
    queries = 0
    while not state.done:
        chunk = act(params, transfer_env.observe(state), transfer_env.joints(state), g)
        queries += 1
        for action in chunk:
            if state.done:
                break
            state, _ = transfer_env.step(
                state, transfer_env.Action.from_vector(action, env_config.max_speed)
            )
    return RolloutResult(
        flags=state.flags,
        reward=transfer_env.episode_reward(state.flags),
        queries=queries,
    )


## Checkpoints
def policy_to_dict(params: PolicyParams, config: Optional[TrainConfig] = None) -> dict:
    d = params.dims
    return {
        "schema_version": SCHEMA_VERSION,
        "policy": {
            "method": params.method,
            "encoder_mode": d.encoder_mode,
            "feature_dim": d.feature_dim,
            "z_dim": d.z_dim,
            "chunk": d.chunk,
            "obs_dim": d.obs_dim,
            "act_dim": d.act_dim,
            "joints_dim": d.joints_dim,
            "mask_input": d.mask_input,
        },
        "train_config": config.to_dict() if config is not None else None,
        "networks": {
            name: mlp_to_dict(
                net,
                params.adam.get(name),
                config.seed if config is not None else 0,
            )
            for name, net in sorted(params.networks().items())
        },
    }


def policy_from_dict(data: dict) -> PolicyParams:
    try:
        if data.get("schema_version") != SCHEMA_VERSION:
            raise DataError(
                f"Unsupported checkpoint schema {data.get('schema_version')!r}"
            )
        header = data["policy"]
        dims = PolicyDims(
            obs_dim=int(header["obs_dim"]),
            act_dim=int(header["act_dim"]),
            joints_dim=int(header["joints_dim"]),
            feature_dim=int(header["feature_dim"]),
            z_dim=int(header["z_dim"]),
            chunk=int(header["chunk"]),
            encoder_mode=header["encoder_mode"],
            mask_input=bool(header["mask_input"]),
        )
        nets, adam = {}, {}
        for name, raw in data["networks"].items():
            nets[name], state = mlp_from_dict(raw)
            if state is not None:
                adam[name] = state
        return PolicyParams(
            dims=dims,
            encoder=nets.get("encoder"),
            style=nets["style"],
            decoder=nets["decoder"],
            method=header["method"],
            adam=adam,
        )
    except (KeyError, TypeError) as e:
        raise DataError(f"Malformed policy checkpoint: missing or invalid {e}")


def save_checkpoint(
    params: PolicyParams, path: str, config: Optional[TrainConfig] = None
) -> None:
    with open(path, "w") as f:
        json.dump(policy_to_dict(params, config), f, sort_keys=True)
    log.info(f"Wrote {params.method} checkpoint to {path}")


def load_checkpoint(path: str) -> PolicyParams:
    try:
        with open(path, "r") as f:
            data = json.load(f)
    except FileNotFoundError:
        raise DataError(f"Checkpoint file not found: {path}")
    except json.JSONDecodeError as e:
        raise DataError(f"Checkpoint {path} is not valid JSON: {e}")
    return policy_from_dict(data)
