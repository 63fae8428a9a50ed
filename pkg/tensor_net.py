"""Dense network stack: MLP forward/backward, CVAE loss terms and Adam.

Arrays follow numpy conventions. A weight matrix has shape (out, in); inputs may be a
single vector of shape (in,) or a batch of shape (batch, in).
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from config import SCHEMA_VERSION
from errors import DataError, NumericError

log = logging.getLogger("causal_act.tensor_net")

ACTIVATIONS = ("tanh", "identity")


@dataclass
class Mlp:
    """Multi-layer perceptron with tanh hidden layers and a linear output layer."""

    layer_sizes: Tuple[int, ...]
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    activations: Tuple[str, ...]

    def __post_init__(self):
        self.layer_sizes = tuple(int(s) for s in self.layer_sizes)
        self.activations = tuple(self.activations)
        n_layers = len(self.layer_sizes) - 1
        if n_layers < 1:
            raise DataError("An MLP needs at least an input and an output size")
        if len(self.weights) != n_layers or len(self.biases) != n_layers:
            raise DataError(
                f"Expected {n_layers} weight/bias pairs, "
                f"got {len(self.weights)}/{len(self.biases)}"
            )
        if len(self.activations) != n_layers:
            raise DataError(f"Expected {n_layers} activation tags")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            expected = (self.layer_sizes[i + 1], self.layer_sizes[i])
            if w.shape != expected or b.shape != (expected[0],):
                raise DataError(
                    f"Layer {i} shape mismatch: weights {w.shape}, bias {b.shape}, "
                    f"expected {expected}"
                )
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise NumericError(f"Layer {i} holds non-finite parameters")
        for tag in self.activations:
            if tag not in ACTIVATIONS:
                raise DataError(f"Unknown activation '{tag}'")

    @property
    def input_size(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_size(self) -> int:
        return self.layer_sizes[-1]

    def parameters(self) -> List[np.ndarray]:
        """Flat parameter list [W0, b0, W1, b1, ...]."""
        params = []
        for w, b in zip(self.weights, self.biases):
            params.extend([w, b])
        return params

    def with_parameters(self, params: Sequence[np.ndarray]) -> "Mlp":
        return Mlp(
            layer_sizes=self.layer_sizes,
            weights=[np.array(p, dtype=float) for p in params[0::2]],
            biases=[np.array(p, dtype=float) for p in params[1::2]],
            activations=self.activations,
        )

    def copy(self) -> "Mlp":
        return self.with_parameters(self.parameters())


@dataclass
class MlpGrads:
    weights: List[np.ndarray]
    biases: List[np.ndarray]

    def flat(self) -> List[np.ndarray]:
        grads = []
        for w, b in zip(self.weights, self.biases):
            grads.extend([w, b])
        return grads


@dataclass
class ForwardCache:
    """Per-layer inputs and outputs recorded by `forward`."""

    inputs: List[np.ndarray]
    outputs: List[np.ndarray]
    batched: bool


@dataclass
class GaussianHead:
    """Diagonal Gaussian given by its mean and log-variance."""

    mu: np.ndarray
    logvar: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float)
        self.logvar = np.asarray(self.logvar, dtype=float)
        if self.mu.shape != self.logvar.shape:
            raise DataError(
                f"mu and logvar shapes differ: {self.mu.shape} vs {self.logvar.shape}"
            )


@dataclass
class AdamState:
    """Moment accumulators and hyperparameters of one Adam optimizer."""

    m: List[np.ndarray]
    v: List[np.ndarray]
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.step < 0:
            raise DataError("Adam step counter must be >= 0")
        if len(self.m) != len(self.v):
            raise DataError("Adam moment lists differ in length")
        for m, v in zip(self.m, self.v):
            if m.shape != v.shape:
                raise DataError("Adam moment shapes differ")


@dataclass(frozen=True)
class NetSpec:
    """Shape description used to build random networks for gradient checks."""

    layer_sizes: Tuple[int, ...]
    activations: Optional[Tuple[str, ...]] = None
    seed: int = 0


@dataclass
class GradCheckReport:
    max_relative_error: float
    tolerance: float
    n_checked: int
    worst_parameter: str = ""
    passed: bool = field(init=False)

    def __post_init__(self):
        self.passed = bool(self.max_relative_error < self.tolerance)


def default_activations(n_layers: int) -> Tuple[str, ...]:
    return tuple(["tanh"] * (n_layers - 1) + ["identity"])


def init_mlp(
    layer_sizes: Sequence[int],
    rng: np.random.Generator,
    activations: Optional[Sequence[str]] = None,
    zero_output: bool = False,
) -> Mlp:
    """Glorot-uniform initialised MLP with zero biases.

    Args:
        layer_sizes: Input, hidden and output sizes
        rng: Source of randomness
        activations: Activation tag per layer; tanh hidden / identity output if omitted
        zero_output: Zero the output layer weights

    Returns:
        Mlp: The initialised network
    """
    layer_sizes = tuple(int(s) for s in layer_sizes)
    n_layers = len(layer_sizes) - 1
    weights, biases = [], []
    for i in range(n_layers):
        fan_in, fan_out = layer_sizes[i], layer_sizes[i + 1]
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        if zero_output and i == n_layers - 1:
            w = np.zeros_like(w)
        weights.append(w)
        biases.append(np.zeros(fan_out))
    return Mlp(
        layer_sizes=layer_sizes,
        weights=weights,
        biases=biases,
        activations=tuple(activations or default_activations(n_layers)),
    )


def zeros_like_mlp(net: Mlp) -> Mlp:
    return net.with_parameters([np.zeros_like(p) for p in net.parameters()])


def _activate(tag: str, pre: np.ndarray) -> np.ndarray:
    if tag == "tanh":
        return np.tanh(pre)
    return pre


def forward(net: Mlp, x: np.ndarray) -> Tuple[np.ndarray, ForwardCache]:
    """Run the network on one input vector or a batch of rows.

    Returns:
        The output (same leading shape as `x`) and the cache `backward` needs.
    """
    x = np.asarray(x, dtype=float)
    batched = x.ndim == 2
    if x.ndim not in (1, 2) or x.shape[-1] != net.input_size:
        raise DataError(
            f"Input size mismatch: expected {net.input_size}, got shape {x.shape}"
        )
    h = x if batched else x[None, :]
    inputs, outputs = [], []
    for w, b, tag in zip(net.weights, net.biases, net.activations):
        inputs.append(h)
        h = _activate(tag, h @ w.T + b)
        outputs.append(h)
    out = h if batched else h[0]
    return out, ForwardCache(inputs=inputs, outputs=outputs, batched=batched)


def backward(
    net: Mlp, cache: ForwardCache, output_gradient: np.ndarray
) -> Tuple[MlpGrads, np.ndarray]:
    """Reverse-mode gradients of a scalar loss through the network.

    Args:
        net: The network `forward` was called on
        cache: Cache from that forward call
        output_gradient: dLoss/dOutput, same shape as the forward output

    Returns:
        Parameter gradients (summed over the batch) and dLoss/dInput.
    """
    grad = np.asarray(output_gradient, dtype=float)
    if not cache.batched:
        grad = grad[None, :]
    if len(cache.inputs) != len(net.weights):
        raise DataError("Stale cache: layer count does not match the network")
    if grad.shape != cache.outputs[-1].shape:
        raise DataError(
            f"Stale cache: output gradient shape {grad.shape} does not match "
            f"cached output {cache.outputs[-1].shape}"
        )

    n_layers = len(net.weights)
    w_grads: List[Optional[np.ndarray]] = [None] * n_layers
    b_grads: List[Optional[np.ndarray]] = [None] * n_layers
    for i in reversed(range(n_layers)):
        w, h_in, h_out = net.weights[i], cache.inputs[i], cache.outputs[i]
        if h_in.shape[1] != w.shape[1]:
            raise DataError(f"Stale cache at layer {i}")
        if net.activations[i] == "tanh":
            grad = grad * (1.0 - h_out**2)
        w_grads[i] = grad.T @ h_in
        b_grads[i] = grad.sum(axis=0)
        grad = grad @ w

    input_grad = grad if cache.batched else grad[0]
    return MlpGrads(weights=w_grads, biases=b_grads), input_grad


def mse_loss(pred: np.ndarray, target: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean squared error over all components and its gradient wrt `pred`."""
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise DataError(f"Length mismatch: pred {pred.shape} vs target {target.shape}")
    diff = pred - target
    return float(np.mean(diff**2)), 2.0 * diff / diff.size


def kl_diag_gaussian(head: GaussianHead) -> Tuple[float, np.ndarray, np.ndarray]:
    """KL(N(mu, diag(exp(logvar))) || N(0, I)) with gradients wrt mu and logvar.

    A batch of heads (2-D arrays) yields the mean KL over rows.
    """
    mu, logvar = head.mu, head.logvar
    if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(logvar))):
        raise NumericError("KL of a non-finite Gaussian head")
    var = np.exp(logvar)
    per_dim = 0.5 * (mu**2 + var - 1.0 - logvar)
    rows = 1 if mu.ndim < 2 else mu.shape[0]
    kl = float(per_dim.sum() / rows)
    return kl, mu / rows, 0.5 * (var - 1.0) / rows


def reparameterize(head: GaussianHead, noise: np.ndarray) -> np.ndarray:
    """z = mu + exp(logvar / 2) * noise."""
    noise = np.asarray(noise, dtype=float)
    if noise.shape != head.mu.shape:
        raise DataError(
            f"Noise shape {noise.shape} does not match mu shape {head.mu.shape}"
        )
    return head.mu + np.exp(0.5 * head.logvar) * noise


def init_adam(
    params: Sequence[np.ndarray],
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    return AdamState(
        m=[np.zeros_like(p) for p in params],
        v=[np.zeros_like(p) for p in params],
        step=0,
        lr=lr,
        beta1=beta1,
        beta2=beta2,
        eps=eps,
    )


def adam_step(
    params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState
) -> Tuple[List[np.ndarray], AdamState]:
    """One bias-corrected Adam update. Inputs are left untouched."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DataError(
            f"Adam expects {len(state.m)} tensors, got {len(params)} params "
            f"and {len(grads)} grads"
        )
    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise DataError(
                f"Adam shape mismatch: param {p.shape}, grad {g.shape}, "
                f"moment {m.shape}"
            )
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**step)
        v_hat = v / (1.0 - b2**step)
        new_params.append(p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
        new_m.append(m)
        new_v.append(v)
    new_state = AdamState(
        m=new_m,
        v=new_v,
        step=step,
        lr=state.lr,
        beta1=b1,
        beta2=b2,
        eps=state.eps,
    )
    return new_params, new_state


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8):
    """Elementwise |a - n| / max(|a|, |n|, floor).

    The floor only guards the exact-zero case, so a wrong near-zero gradient still
    shows up as a large relative error.
    """
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.asarray(numeric, dtype=float)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def grad_check(
    net_spec: NetSpec,
    tolerance: float = 1e-4,
    h: float = 1e-5,
    corrupt: Optional[float] = None,
) -> GradCheckReport:
    """Compare `backward` against central finite differences on every parameter.

    The scalar checked is <c, forward(x)> for a seeded random input x and weighting c.

    Args:
        net_spec: Layer sizes, activations and seed of the random network
        tolerance: Pass threshold on the max relative error
        h: Finite-difference step
        corrupt: Scale the largest analytic weight gradient by (1 + corrupt) first

    Returns:
        GradCheckReport: max relative error and verdict
    """
    rng = np.random.default_rng(net_spec.seed)
    n_layers = len(net_spec.layer_sizes) - 1
    net = init_mlp(net_spec.layer_sizes, rng, activations=net_spec.activations)
    # non-zero biases so every parameter is exercised
    net = net.with_parameters(
        [
            p if i % 2 == 0 else rng.uniform(-0.5, 0.5, size=p.shape)
            for i, p in enumerate(net.parameters())
        ]
    )
    x = rng.normal(size=net.input_size)
    c = rng.normal(size=net.output_size)

    def weighted_output(candidate: Mlp) -> float:
        out, _ = forward(candidate, x)
        return float(c @ out)

    _, cache = forward(net, x)
    grads, _ = backward(net, cache, c)
    analytic = [g.copy() for g in grads.flat()]
    if corrupt is not None:
        weight_grads = analytic[0::2]
        layer = int(np.argmax([np.max(np.abs(g)) for g in weight_grads]))
        idx = np.unravel_index(np.argmax(np.abs(weight_grads[layer])), weight_grads[layer].shape)
        analytic[2 * layer][idx] *= 1.0 + corrupt

    params = net.parameters()
    worst, worst_name, n_checked = 0.0, "", 0
    for p_index, p in enumerate(params):
        for idx in np.ndindex(p.shape):
            shifted = [q.copy() for q in params]
            shifted[p_index][idx] = p[idx] + h
            f_plus = weighted_output(net.with_parameters(shifted))
            shifted[p_index][idx] = p[idx] - h
            f_minus = weighted_output(net.with_parameters(shifted))
            numeric = (f_plus - f_minus) / (2.0 * h)
            err = float(relative_error(analytic[p_index][idx], numeric))
            n_checked += 1
            if err > worst:
                kind = "W" if p_index % 2 == 0 else "b"
                worst, worst_name = err, f"{kind}{p_index // 2}{list(idx)}"

    report = GradCheckReport(
        max_relative_error=worst,
        tolerance=tolerance,
        n_checked=n_checked,
        worst_parameter=worst_name,
    )
    log.debug(
        f"Gradient check over {n_checked} parameters of {n_layers}-layer net: "
        f"max relative error {worst:.3e} at {worst_name} "
        f"({'pass' if report.passed else 'fail'})"
    )
    return report


## Serialization
def _encode_floats(array: np.ndarray) -> List[str]:
    return [repr(float(v)) for v in np.asarray(array, dtype=float).ravel()]


def _decode_floats(values: Sequence[str], shape: Tuple[int, ...]) -> np.ndarray:
    try:
        array = np.array([float(v) for v in values], dtype=float)
    except (TypeError, ValueError) as e:
        raise DataError(f"Invalid float in checkpoint: {e}")
    if array.size != int(np.prod(shape)):
        raise DataError(
            f"Checkpoint tensor has {array.size} values, expected shape {shape}"
        )
    return array.reshape(shape)


def mlp_to_dict(net: Mlp, adam: Optional[AdamState] = None, rng_seed: int = 0):
    """Checkpoint representation; floats as round-trip decimal strings."""
    data: Dict[str, Any] = {
        "schema_version": SCHEMA_VERSION,
        "layer_sizes": list(net.layer_sizes),
        "activations": list(net.activations),
        "weights": [_encode_floats(w) for w in net.weights],
        "biases": [_encode_floats(b) for b in net.biases],
        "rng_seed": rng_seed,
    }
    if adam is not None:
        data["adam_state"] = {
            "step": adam.step,
            "lr": repr(float(adam.lr)),
            "beta1": repr(float(adam.beta1)),
            "beta2": repr(float(adam.beta2)),
            "eps": repr(float(adam.eps)),
            "m": [_encode_floats(m) for m in adam.m],
            "v": [_encode_floats(v) for v in adam.v],
        }
    return data


def mlp_from_dict(data: Dict[str, Any]) -> Tuple[Mlp, Optional[AdamState]]:
    try:
        if data.get("schema_version") != SCHEMA_VERSION:
            raise DataError(
                f"Unsupported checkpoint schema {data.get('schema_version')!r}"
            )
        sizes = tuple(int(s) for s in data["layer_sizes"])
        shapes = [(sizes[i + 1], sizes[i]) for i in range(len(sizes) - 1)]
        weights = [_decode_floats(w, s) for w, s in zip(data["weights"], shapes)]
        biases = [_decode_floats(b, (s[0],)) for b, s in zip(data["biases"], shapes)]
        net = Mlp(
            layer_sizes=sizes,
            weights=weights,
            biases=biases,
            activations=tuple(data["activations"]),
        )
        adam = None
        if data.get("adam_state") is not None:
            raw = data["adam_state"]
            param_shapes = [p.shape for p in net.parameters()]
            adam = AdamState(
                m=[_decode_floats(m, s) for m, s in zip(raw["m"], param_shapes)],
                v=[_decode_floats(v, s) for v, s in zip(raw["v"], param_shapes)],
                step=int(raw["step"]),
                lr=float(raw["lr"]),
                beta1=float(raw["beta1"]),
                beta2=float(raw["beta2"]),
                eps=float(raw["eps"]),
            )
        return net, adam
    except (KeyError, TypeError) as e:
        raise DataError(f"Malformed network checkpoint: missing or invalid {e}")
