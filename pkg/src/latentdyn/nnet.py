"""Small multilayer perceptrons and a first-order stochastic optimizer.

Networks operate column-wise: an input of shape (in_dim, n) maps to
(out_dim, n), so a matrix of visits is processed in one pass. Forward
passes come in two flavors: ``mlp_forward`` builds autodiff nodes so
gradients flow, ``mlp_apply`` is the plain numpy equivalent for
inference.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .errors import InvalidArgumentError, NonFiniteError

ACTIVATIONS = ("tanh", "identity")

# log-std outputs are clamped to this range before exponentiation to keep
# posterior scales away from collapse and overflow
LOG_STD_MIN = -6.0
LOG_STD_MAX = 3.0


@dataclass
class MLP:
    layer_sizes: list[int]
    weights: list[np.ndarray]  # (out, in) per layer
    biases: list[np.ndarray]  # (out, 1) per layer
    activations: list[str]  # one of ACTIVATIONS per layer

    @property
    def in_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def out_dim(self) -> int:
        return self.layer_sizes[-1]


def init_mlp(layer_sizes, seed) -> MLP:
    """Glorot-uniform weights, zero biases, tanh hidden / identity output."""
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 2:
        raise InvalidArgumentError("an MLP needs at least input and output layer sizes")
    if any(s < 1 for s in sizes):
        raise InvalidArgumentError("layer sizes must be positive")
    rng = np.random.default_rng(seed)
    weights, biases, acts = [], [], []
    n_layers = len(sizes) - 1
    for i in range(n_layers):
        fan_in, fan_out = sizes[i], sizes[i + 1]
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros((fan_out, 1)))
        acts.append("tanh" if i < n_layers - 1 else "identity")
    return MLP(sizes, weights, biases, acts)


def mlp_params(net: MLP, prefix: str) -> dict[str, np.ndarray]:
    """Flat name -> array view of a network's parameters."""
    out = {}
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        out[f"{prefix}.w{i}"] = w
        out[f"{prefix}.b{i}"] = b
    return out


def set_mlp_params(net: MLP, prefix: str, params: dict[str, np.ndarray]) -> None:
    for i in range(len(net.weights)):
        net.weights[i] = params[f"{prefix}.w{i}"]
        net.biases[i] = params[f"{prefix}.b{i}"]


def _check_input(net: MLP, x, what: str) -> None:
    rows = x.shape[0] if getattr(x, "ndim", 0) >= 1 else 0
    if getattr(x, "ndim", 0) != 2 or rows != net.in_dim:
        raise InvalidArgumentError(
            f"{what}: expected input shape ({net.in_dim}, n), got {getattr(x, 'shape', None)}"
        )


def mlp_forward(net: MLP, x, param_nodes: dict[str, ad.Node] | None = None, prefix: str = "") -> ad.Node:
    """Forward pass as autodiff nodes.

    ``param_nodes`` supplies pre-built parameter leaves (as created by a
    training step); without it the weights enter as constants, which still
    gives the correct value but no gradient path.
    """
    h = x if isinstance(x, ad.Node) else ad.constant(np.asarray(x, dtype=float))
    _check_input(net, h.value, "mlp_forward")
    for i, act in enumerate(net.activations):
        if param_nodes is not None:
            w = param_nodes[f"{prefix}.w{i}"]
            b = param_nodes[f"{prefix}.b{i}"]
        else:
            w = ad.constant(net.weights[i])
            b = ad.constant(net.biases[i])
        h = ad.add(ad.matmul(w, h), b)
        if act == "tanh":
            h = ad.tanh(h)
    return h


def mlp_apply(net: MLP, x) -> np.ndarray:
    """Plain numpy forward pass (no graph)."""
    h = np.asarray(x, dtype=float)
    _check_input(net, h, "mlp_apply")
    for w, b, act in zip(net.weights, net.biases, net.activations):
        h = w @ h + b
        if act == "tanh":
            h = np.tanh(h)
    return h


def clip_node(x: ad.Node, lo: float, hi: float) -> ad.Node:
    """Clamp built from primitives; out-of-range entries get zero gradient."""
    v = x.value
    mask = ((v >= lo) & (v <= hi)).astype(float)
    return ad.add(ad.multiply(x, mask), (1.0 - mask) * np.clip(v, lo, hi))


def mlp_to_dict(net: MLP) -> dict:
    """JSON-ready form with flattened (row-major) weight arrays."""
    return {
        "layer_sizes": list(net.layer_sizes),
        "weights": [w.reshape(-1).tolist() for w in net.weights],
        "biases": [b.reshape(-1).tolist() for b in net.biases],
        "activations": list(net.activations),
    }


def mlp_from_dict(d: dict) -> MLP:
    sizes = [int(s) for s in d["layer_sizes"]]
    weights, biases = [], []
    for i in range(len(sizes) - 1):
        out_d, in_d = sizes[i + 1], sizes[i]
        weights.append(np.asarray(d["weights"][i], dtype=float).reshape(out_d, in_d))
        biases.append(np.asarray(d["biases"][i], dtype=float).reshape(out_d, 1))
    return MLP(sizes, weights, biases, [str(a) for a in d["activations"]])


@dataclass
class OptimizerState:
    """Adam-style moment accumulators, one slot per named parameter."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def hyperparams(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}


def optimizer_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
) -> tuple[dict[str, np.ndarray], OptimizerState]:
    """One bias-corrected adaptive-moment update; functional, deterministic."""
    for name, g in grads.items():
        if not np.isfinite(np.asarray(g)).all():
            raise NonFiniteError(f"non-finite gradient for '{name}'; step aborted")
        if np.shape(g) != np.shape(params[name]):
            raise InvalidArgumentError(f"gradient shape mismatch for '{name}'")
    t = state.step + 1
    new_m, new_v, new_params = dict(state.m), dict(state.v), dict(params)
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, g in grads.items():
        g = np.asarray(g, dtype=float)
        m = state.m.get(name, np.zeros_like(g))
        v = state.v.get(name, np.zeros_like(g))
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        new_m[name], new_v[name] = m, v
        new_params[name] = params[name] - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    new_state = replace(state, step=t, m=new_m, v=new_v)
    return new_params, new_state
