"""Single-level multi-head deformable attention.

Queries sit on a uniform reference grid. Each query predicts, per head,
``K_total`` sampling offsets (in cell units) around its reference point and
softmax-normalized weights over those samples; projected values are read
at the offset locations by bilinear interpolation with zero padding.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .encoder import TokenFeatureMap
from .errors import ConfigError, DimensionError
from .layers import add_linear, linear
from .numerics import (
    Tensor,
    add,
    bilinear_sample,
    broadcast_to,
    dropout,
    mul,
    no_grad,
    reshape,
    softmax,
    tsum,
)


@dataclass(frozen=True)
class DeformAttnConfig:
    dim: int
    heads: int = 8
    points: int = 8
    levels: int = 2
    dropout: float = 0.1
    input_levels: int = 1

    def __post_init__(self):
        if min(self.dim, self.heads, self.points, self.levels, self.input_levels) < 1:
            raise ConfigError("attention sizes must be positive")
        if self.dim % self.heads:
            raise ConfigError(f"attn.heads={self.heads} does not divide dim={self.dim}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"attn.dropout={self.dropout} outside [0, 1)")
        if self.input_levels > self.levels:
            raise ConfigError("more input feature levels than configured levels")

    @property
    def k_total(self) -> int:
        # only levels that actually receive a feature map are sampled
        return self.points * self.input_levels

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads


def reference_grid(h: int, w: int) -> np.ndarray:
    """Normalized ``(x, y)`` token centers, row-major, shape ``[h*w, 2]``."""
    ys, xs = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
    return np.stack([xs.reshape(-1), ys.reshape(-1)], axis=-1)


def init_deform_attn(params, prefix: str, cfg: DeformAttnConfig, rng: np.random.Generator,
                     ring_radius=1.0):
    D, M, K = cfg.dim, cfg.heads, cfg.k_total
    add_linear(params, f"{prefix}.value_proj", D, D, rng)
    add_linear(params, f"{prefix}.output_proj", D, D, rng)
    params.add(f"{prefix}.sampling_offsets.weight", np.zeros((D, M * K * 2)))
    angles = 2 * math.pi * np.arange(M * K) / (M * K)
    ring = ring_radius * np.stack([np.cos(angles), np.sin(angles)], axis=-1)
    params.add(f"{prefix}.sampling_offsets.bias", ring.reshape(-1))
    params.add(f"{prefix}.attention_weights.weight", np.zeros((D, M * K)))
    params.add(f"{prefix}.attention_weights.bias", np.zeros(M * K))


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return reshape(x, (1,) + x.shape), True
    return x, False


def sampling_plan(query: Tensor, grid: tuple, cfg: DeformAttnConfig, params, prefix="attn"):
    """Sampling locations ``[B, n, M, K, 2]`` and weights ``[B, n, M, K]``."""
    B, n, _ = query.shape
    h, w = grid
    M, K = cfg.heads, cfg.k_total
    offsets = linear(query, params[f"{prefix}.sampling_offsets.weight"],
                     params[f"{prefix}.sampling_offsets.bias"])
    offsets = reshape(offsets, (B, n, M, K, 2))
    cell = np.array([1.0 / w, 1.0 / h], dtype=query.dtype)
    ref = np.broadcast_to(reference_grid(h, w).astype(query.dtype)[None, :, None, None, :],
                          offsets.shape)
    loc = add(mul(offsets, Tensor(np.broadcast_to(cell, offsets.shape).copy())), Tensor(ref.copy()))
    logits = linear(query, params[f"{prefix}.attention_weights.weight"],
                    params[f"{prefix}.attention_weights.bias"])
    weights = softmax(reshape(logits, (B, n, M, K)), axis=-1)
    return loc, weights


def deform_attn(query: Tensor, kv, grid: tuple, cfg: DeformAttnConfig, params, prefix="attn",
                training=False, rng=None) -> Tensor:
    """Deformable attention of ``query`` ``[(B,) n, D]`` over ``kv`` tokens on ``grid``."""
    if isinstance(kv, TokenFeatureMap):
        grid = kv.grid if grid is None else grid
        kv = kv.tokens
    query, squeeze = _batched(query)
    kv, _ = _batched(kv)
    h, w = grid
    B, n, D = query.shape
    if n != h * w or kv.shape != query.shape:
        raise DimensionError(f"query {query.shape} / kv {kv.shape} do not match a {h}x{w} grid")
    if D != cfg.dim:
        raise DimensionError(f"feature dim {D} != attn dim {cfg.dim}")
    M, K, c = cfg.heads, cfg.k_total, cfg.head_dim

    value = linear(kv, params[f"{prefix}.value_proj.weight"], params[f"{prefix}.value_proj.bias"])
    value = reshape(value, (B, n, M, c))
    loc, weights = sampling_plan(query, grid, cfg, params, prefix)
    sampled = bilinear_sample(value, grid, loc)  # [B, n, M, K, c]
    wexp = broadcast_to(reshape(weights, (B, n, M, K, 1)), sampled.shape)
    heads = tsum(mul(sampled, wexp), axis=3)  # [B, n, M, c]
    out = linear(reshape(heads, (B, n, D)), params[f"{prefix}.output_proj.weight"],
                 params[f"{prefix}.output_proj.bias"])
    out = dropout(out, cfg.dropout, rng, training)
    return reshape(out, (n, D)) if squeeze else out


def bilinear_point(feature: TokenFeatureMap, loc) -> Tensor:
    """Interpolate ``feature`` at one normalized ``(x, y)`` location -> ``[D]``."""
    tokens = feature.tokens
    n, D = tokens.shape
    value = reshape(tokens, (1, n, 1, D))
    loc = loc if isinstance(loc, Tensor) else Tensor(np.asarray(loc, dtype=tokens.dtype))
    out = bilinear_sample(value, feature.grid, reshape(loc, (1, 1, 1, 1, 2)))
    return reshape(out, (D,))


def flops_deform_attn(n: int, cfg: DeformAttnConfig) -> int:
    """Analytic flop count (multiply-add = 2) for one deformable attention pass.

    value proj 2nD^2 + output proj 2nD^2
    + offset/weight heads n * 2D * M*K_total * 3
    + sampling (4 neighbors, 2 flops each, per head channel) and weighting
      n * M*K_total * (8 + 2) * D/M
    Closed form: n * (4D^2 + 6*D*M*K_total + 10*D*K_total).
    """
    D, M, K = cfg.dim, cfg.heads, cfg.k_total
    c = D // M
    return (2 * n * D * D + 2 * n * D * D + n * (2 * D * M * K * 3)
            + n * M * K * (4 * c * 2 + 2 * c))


def flops_dense_attn(n_q: int, n_kv: int, dim: int, heads: int) -> int:
    """Standard multi-head attention: q/k/v/out projections, scores, softmax, mixing."""
    proj = 2 * n_q * dim * dim * 2 + 2 * n_kv * dim * dim * 2
    return proj + 2 * n_q * n_kv * dim * 2 + 3 * heads * n_q * n_kv


def dump_sampling_csv(path, query: Tensor, grid: tuple, cfg: DeformAttnConfig, params,
                      prefix="attn"):
    """Write per-query sampling locations and weights (one row per sample)."""
    with no_grad():
        q, _ = _batched(query)
        loc, weights = sampling_plan(q, grid, cfg, params, prefix)
    loc, weights = loc.data[0], weights.data[0]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["query", "head", "point", "x", "y", "weight"])
        for qi in range(loc.shape[0]):
            for m in range(cfg.heads):
                for k in range(cfg.k_total):
                    x, y = loc[qi, m, k]
                    writer.writerow([qi, m, k, repr(float(x)), repr(float(y)),
                                     repr(float(weights[qi, m, k]))])
