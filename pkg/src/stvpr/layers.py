"""Small building blocks shared by the encoder, attention and aggregation code."""

from __future__ import annotations

import math

import numpy as np

from .numerics import Tensor, add, broadcast_to, matmul, reshape


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` over the last axis of ``x`` (weight is ``[in, out]``)."""
    lead = x.shape[:-1]
    rows = int(np.prod(lead)) if lead else 1
    y = matmul(reshape(x, (rows, x.shape[-1])), weight)
    if bias is not None:
        y = add(y, broadcast_to(bias, y.shape))
    return reshape(y, lead + (weight.shape[1],))


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def add_linear(params, prefix: str, fan_in: int, fan_out: int, rng, bias=True):
    params.add(f"{prefix}.weight", xavier_uniform(rng, fan_in, fan_out))
    if bias:
        params.add(f"{prefix}.bias", np.zeros(fan_out))


def add_layer_norm(params, prefix: str, dim: int):
    params.add(f"{prefix}.gamma", np.ones(dim))
    params.add(f"{prefix}.beta", np.zeros(dim))
