"""Sequential feed-forward networks: linear layers with pointwise activations.

Activations are stored column-wise: a batch of ``n`` inputs of width ``d`` is a
``d x n`` matrix. A layer with a bias keeps it as the last weight column and
sees its input augmented with a constant row of ones.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
import math

import numpy as np
from scipy.special import erf

from .errors import InvalidModel, InvalidShape
from .linalg import as_matrix


class ActivationKind(str, Enum):
    IDENTITY = "identity"
    RELU = "relu"
    TANH = "tanh"
    GELU = "gelu"

    @classmethod
    def parse(cls, tag) -> "ActivationKind":
        if isinstance(tag, cls):
            return tag
        try:
            return cls(tag)
        except ValueError:
            raise InvalidModel(f"unknown activation tag {tag!r}") from None


def apply_activation(kind, z) -> np.ndarray:
    kind = ActivationKind.parse(kind)
    z = np.asarray(z, dtype=np.float64)
    if kind is ActivationKind.IDENTITY:
        return z.copy()
    if kind is ActivationKind.RELU:
        return np.maximum(z, 0.0)
    if kind is ActivationKind.TANH:
        return np.tanh(z)
    # exact Gaussian-CDF form, not the tanh approximation
    return 0.5 * z * (1.0 + erf(z / math.sqrt(2.0)))


def augment(x: np.ndarray, has_bias: bool) -> np.ndarray:
    """Append a row of ones when the consuming layer has a bias column."""
    if not has_bias:
        return x
    return np.vstack([x, np.ones((1, x.shape[1]))])


@dataclass(frozen=True)
class LinearLayer:
    name: str
    weight: np.ndarray
    has_bias: bool = False
    activation: ActivationKind = ActivationKind.IDENTITY

    def __post_init__(self):
        raw = np.asarray(self.weight, dtype=np.float64)
        if not np.all(np.isfinite(raw)):
            raise InvalidModel(f"layer {self.name!r} has non-finite weights")
        w = as_matrix(raw, f"weight of layer {self.name!r}").copy()
        w.flags.writeable = False
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "activation", ActivationKind.parse(self.activation))
        if w.shape[0] < 1 or w.shape[1] < (2 if self.has_bias else 1):
            raise InvalidModel(f"layer {self.name!r} has degenerate weight shape {w.shape}")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1] - (1 if self.has_bias else 0)

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def with_weight(self, weight) -> "LinearLayer":
        return LinearLayer(self.name, weight, self.has_bias, self.activation)

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Post-activation output for a ``in_dim x n`` input."""
        return apply_activation(self.activation, self.weight @ augment(x, self.has_bias))


@dataclass(frozen=True)
class SequentialModel:
    layers: tuple
    input_dim: int

    def __post_init__(self):
        layers = tuple(self.layers)
        object.__setattr__(self, "layers", layers)
        if not layers:
            raise InvalidModel("a model needs at least one layer")
        names = [layer.name for layer in layers]
        if len(set(names)) != len(names):
            raise InvalidModel(f"layer names must be unique, got {names}")
        expected = self.input_dim
        for layer in layers:
            if layer.in_dim != expected:
                raise InvalidModel(
                    f"layer {layer.name!r} expects input width {layer.in_dim}, previous width is {expected}"
                )
            expected = layer.out_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def weights(self) -> list:
        return [layer.weight for layer in self.layers]

    def with_weights(self, weights) -> "SequentialModel":
        if len(weights) != len(self.layers):
            raise InvalidModel("weight list length does not match layer count")
        return SequentialModel(
            tuple(layer.with_weight(w) for layer, w in zip(self.layers, weights)), self.input_dim
        )

    def architecture(self) -> tuple:
        """Hashable summary used to check merge compatibility."""
        return (self.input_dim,) + tuple(
            (layer.weight.shape, layer.has_bias, layer.activation) for layer in self.layers
        )

    def __call__(self, x) -> np.ndarray:
        return forward_capture(self, x).final_output


@dataclass(frozen=True)
class ActivationTrace:
    per_layer_inputs: list = field(default_factory=list)
    final_output: np.ndarray = None


def forward_capture(model: SequentialModel, x) -> ActivationTrace:
    """Run ``model`` on ``x`` and keep the input seen by every layer."""
    x = as_matrix(x, "X")
    if x.shape[0] != model.input_dim:
        raise InvalidShape(f"input has {x.shape[0]} rows, model expects {model.input_dim}")
    inputs = []
    h = x
    for layer in model.layers:
        inputs.append(h)
        h = layer.forward(h)
    return ActivationTrace(per_layer_inputs=inputs, final_output=h)


def build_mlp(
    sizes,
    activation="relu",
    final_activation="identity",
    bias: bool = True,
    rng: np.random.Generator | None = None,
) -> SequentialModel:
    """Random MLP with layer widths ``sizes`` (input first).

    Weights use a Glorot-style normal scale; biases start at zero.
    """
    rng = np.random.default_rng() if rng is None else rng
    layers = []
    for idx, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        w = rng.normal(0.0, math.sqrt(2.0 / (fan_in + fan_out)), size=(fan_out, fan_in))
        if bias:
            w = np.hstack([w, np.zeros((fan_out, 1))])
        act = final_activation if idx == len(sizes) - 2 else activation
        layers.append(LinearLayer(f"fc{idx + 1}", w, bias, act))
    return SequentialModel(tuple(layers), sizes[0])
