"""Small tanh multilayer perceptron with a trailing scalar parameter.

The network maps a time value t to two outputs (u, v): u approximates the
state of the integral equation and v the running drift integral.  The
unknown drift coefficient theta is carried alongside the weights so the
whole parameter vector can be optimized jointly; it occupies the last
slot of the flattened layout.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Expression, Graph, tanh

__all__ = [
    "MlpConfig",
    "NetworkVariables",
    "ParameterSet",
    "flatten",
    "forward_expressions",
    "forward_values",
    "init_parameters",
    "n_parameters",
    "parameter_variables",
    "read_parameters_json",
    "unflatten",
    "write_parameters_json",
]


@dataclass(frozen=True)
class MlpConfig:
    """Architecture and initialization seed.

    ``layers`` lists the widths from input to output.  The input is the
    scalar time, the output is the pair (u, v), and at least one hidden
    layer sits between them.
    """

    layers: tuple[int, ...] = (1, 40, 40, 2)
    seed: int = 0

    def __post_init__(self):
        layers = tuple(int(w) for w in self.layers)
        object.__setattr__(self, "layers", layers)
        if len(layers) < 3:
            raise ValueError("network needs at least one hidden layer")
        if layers[0] != 1:
            raise ValueError("input width must be 1 (scalar time)")
        if layers[-1] != 2:
            raise ValueError("output width must be 2 (u and v)")
        if any(w < 1 for w in layers):
            raise ValueError("layer widths must be positive")


@dataclass(frozen=True)
class ParameterSet:
    """Numeric weights, biases and the drift coefficient theta."""

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    theta: float

    @property
    def layers(self) -> tuple[int, ...]:
        return (self.weights[0].shape[1],) + tuple(w.shape[0] for w in self.weights)


def n_parameters(config: MlpConfig) -> int:
    """Length of the flattened parameter vector (weights, biases, theta)."""
    widths = config.layers
    total = sum(widths[i + 1] * widths[i] + widths[i + 1] for i in range(len(widths) - 1))
    return total + 1


def init_parameters(config: MlpConfig) -> ParameterSet:
    """Glorot-uniform weights, zero biases, theta = 0.

    Each weight matrix is drawn uniformly from
    (-sqrt(6/(fan_in+fan_out)), +sqrt(6/(fan_in+fan_out))); the draw order
    is fixed (layer by layer, row-major) so a seed fully determines the
    result.
    """
    rng = np.random.default_rng(config.seed)
    weights = []
    biases = []
    widths = config.layers
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return ParameterSet(tuple(weights), tuple(biases), 0.0)


def flatten(params: ParameterSet) -> np.ndarray:
    """Concatenate row-major weights then biases per layer, theta last."""
    parts = []
    for w, b in zip(params.weights, params.biases):
        parts.append(w.ravel())
        parts.append(b)
    parts.append(np.array([params.theta]))
    return np.concatenate(parts)


def unflatten(vec: np.ndarray, config: MlpConfig) -> ParameterSet:
    """Inverse of :func:`flatten` for the given architecture."""
    vec = np.asarray(vec, dtype=float)
    expected = n_parameters(config)
    if vec.shape != (expected,):
        raise ValueError(f"expected parameter vector of length {expected}, got {vec.shape}")
    widths = config.layers
    weights = []
    biases = []
    pos = 0
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        weights.append(vec[pos:pos + fan_out * fan_in].reshape(fan_out, fan_in).copy())
        pos += fan_out * fan_in
        biases.append(vec[pos:pos + fan_out].copy())
        pos += fan_out
    return ParameterSet(tuple(weights), tuple(biases), float(vec[-1]))


def forward_values(params: ParameterSet, t: float) -> tuple[float, float]:
    """Numeric forward pass; returns (u, v) at time t."""
    h = np.array([float(t)])
    for w, b in zip(params.weights[:-1], params.biases[:-1]):
        h = np.tanh(w @ h + b)
    out = params.weights[-1] @ h + params.biases[-1]
    if not np.isfinite(out).all():
        raise ArithmeticError("network forward pass produced a non-finite value")
    return float(out[0]), float(out[1])


class NetworkVariables:
    """Tape variables mirroring a :class:`ParameterSet`.

    ``flat`` lists the variables in the same order as :func:`flatten`, so
    binding ``flat`` to a flattened vector and reading gradients against
    ``flat`` round-trips through the same layout.
    """

    def __init__(self, weights, biases, theta: Expression):
        self.weights = weights
        self.biases = biases
        self.theta = theta
        flat: list[Expression] = []
        for w, b in zip(weights, biases):
            for row in w:
                flat.extend(row)
            flat.extend(b)
        flat.append(theta)
        self.flat = flat


def parameter_variables(graph: Graph, config: MlpConfig) -> NetworkVariables:
    """Create one tape variable per network parameter."""
    widths = config.layers
    weights = []
    biases = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        weights.append([[graph.variable() for _ in range(fan_in)] for _ in range(fan_out)])
        biases.append([graph.variable() for _ in range(fan_out)])
    return NetworkVariables(weights, biases, graph.variable())


def forward_expressions(graph: Graph, net: NetworkVariables, t_expr: Expression):
    """Symbolic forward pass; returns (u, v) as tape expressions."""
    h = [t_expr]
    n_layers = len(net.weights)
    for layer in range(n_layers):
        w, b = net.weights[layer], net.biases[layer]
        out = []
        for row, bias in zip(w, b):
            acc = row[0] * h[0]
            for wij, hi in zip(row[1:], h[1:]):
                acc = acc + wij * hi
            acc = acc + bias
            out.append(acc if layer == n_layers - 1 else tanh(acc))
        h = out
    return h[0], h[1]


def write_parameters_json(path, params: ParameterSet, config: MlpConfig) -> None:
    """Serialize architecture, seed and the flattened parameter vector."""
    payload = {
        "layers": list(config.layers),
        "seed": config.seed,
        "theta": params.theta,
        "parameters": [float(x) for x in flatten(params)],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)
        fh.write("\n")


def read_parameters_json(path) -> tuple[ParameterSet, MlpConfig]:
    """Inverse of :func:`write_parameters_json`."""
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    config = MlpConfig(layers=tuple(payload["layers"]), seed=payload["seed"])
    params = unflatten(np.asarray(payload["parameters"], dtype=float), config)
    return params, config
