"""Episode-shared feature extractor: an MLP of affine + leaky-ReLU layers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError, ValidationError
from .tensor import Node


@dataclass
class EmbeddingParams:
    weights: list[Node]
    biases: list[Node]
    dropout: tuple[float, ...]
    concat_last_two: bool = True

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(w.shape[1] for w in self.weights)

    @property
    def output_dim(self) -> int:
        w = self.widths
        if self.concat_last_two and len(w) >= 2:
            return w[-1] + w[-2]
        return w[-1]

    def named(self) -> dict[str, Node]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"embed.w{i}"] = w
            out[f"embed.b{i}"] = b
        return out


def init_params(input_dim: int, widths, seed: int, dropout=None,
                concat_last_two: bool = True) -> EmbeddingParams:
    """Glorot-uniform weights, zero biases."""
    widths = [int(w) for w in widths]
    if input_dim < 1 or not widths or min(widths) < 1:
        raise ValidationError(f"layer widths must be >= 1, got input {input_dim}, {widths}")
    dropout = tuple(float(p) for p in (dropout if dropout is not None else [0.0] * len(widths)))
    if len(dropout) != len(widths) or any(not 0.0 <= p < 1.0 for p in dropout):
        raise ValidationError(f"need one dropout rate in [0, 1) per layer, got {dropout}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    fan_in = input_dim
    for i, fan_out in enumerate(widths):
        a = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(Node(rng.uniform(-a, a, (fan_in, fan_out)), True, name=f"embed.w{i}"))
        biases.append(Node(np.zeros(fan_out), True, name=f"embed.b{i}"))
        fan_in = fan_out
    return EmbeddingParams(weights, biases, dropout, concat_last_two)


def forward(params: EmbeddingParams, inputs, train: bool = False,
            rng: np.random.Generator | None = None) -> Node:
    x = T.as_node(inputs)
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise DimensionError(f"inputs {x.shape} do not match embedding input dim {params.input_dim}")
    acts = []
    h = x
    for w, b, p in zip(params.weights, params.biases, params.dropout):
        h = T.leaky_relu(h @ w + b)
        if train and p > 0.0:
            if rng is None:
                raise ValidationError("train-mode dropout needs an rng")
            keep = (rng.random(h.shape) >= p) / (1.0 - p)
            h = h * keep
        acts.append(h)
    if params.concat_last_two and len(acts) >= 2:
        return T.concat([acts[-2], acts[-1]], axis=1)
    return acts[-1]
