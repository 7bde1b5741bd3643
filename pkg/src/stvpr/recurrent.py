"""Encoder layers and the recurrent spatio-temporal fusion over a sequence.

``recurrent_dte`` feeds the previous output back in as the query for the
next frame (``Q_1 = f_1 + delta``). The other variants are the ablation
baselines: per-frame only, recurrence with dense attention, and per-frame
followed by a dense temporal layer over all ``L * n`` tokens.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .deform_attn import DeformAttnConfig, deform_attn, init_deform_attn
from .errors import ConfigError, DimensionError, InputError
from .layers import add_layer_norm, add_linear, linear
from .numerics import (
    Tensor,
    add,
    broadcast_to,
    dropout,
    gelu,
    layer_norm,
    matmul,
    reshape,
    scale,
    softmax,
    stack,
    transpose,
)

VARIANTS = ("recurrent_dte", "dte_only", "recurrent_te", "dte_tt")


def check_variant(kind: str) -> str:
    if kind not in VARIANTS:
        raise ConfigError(f"model.variant={kind!r}; expected one of {', '.join(VARIANTS)}")
    return kind


@dataclass
class RecurrentState:
    hidden: Tensor  # previous iteration's output, [B, n, D]
    t: int


# -- dense multi-head attention ------------------------------------------
def init_dense_attn(params, prefix: str, dim: int, rng):
    for name in ("q_proj", "k_proj", "v_proj", "output_proj"):
        add_linear(params, f"{prefix}.{name}", dim, dim, rng)


def dense_attn(query: Tensor, kv: Tensor, heads: int, params, prefix: str,
               dropout_rate=0.0, training=False, rng=None) -> Tensor:
    """Scaled dot-product attention of ``[B, nq, D]`` queries over ``[B, nk, D]``."""
    B, nq, D = query.shape
    nk = kv.shape[1]
    c = D // heads

    def split(x, n):
        return transpose(reshape(x, (B, n, heads, c)), (0, 2, 1, 3))

    q = split(linear(query, params[f"{prefix}.q_proj.weight"], params[f"{prefix}.q_proj.bias"]), nq)
    k = split(linear(kv, params[f"{prefix}.k_proj.weight"], params[f"{prefix}.k_proj.bias"]), nk)
    v = split(linear(kv, params[f"{prefix}.v_proj.weight"], params[f"{prefix}.v_proj.bias"]), nk)
    scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(c))
    mixed = matmul(softmax(scores, axis=-1), v)  # [B, M, nq, c]
    merged = reshape(transpose(mixed, (0, 2, 1, 3)), (B, nq, D))
    out = linear(merged, params[f"{prefix}.output_proj.weight"], params[f"{prefix}.output_proj.bias"])
    return dropout(out, dropout_rate, rng, training)


# -- encoder layer --------------------------------------------------------
def init_encoder_layer(params, prefix: str, cfg: DeformAttnConfig, rng, attention="deform",
                       ffn_mult=4):
    D = cfg.dim
    if attention == "deform":
        init_deform_attn(params, f"{prefix}.attn", cfg, rng)
    else:
        init_dense_attn(params, f"{prefix}.attn", D, rng)
    add_layer_norm(params, f"{prefix}.norm1", D)
    add_linear(params, f"{prefix}.ffn.fc1", D, ffn_mult * D, rng)
    add_linear(params, f"{prefix}.ffn.fc2", ffn_mult * D, D, rng)
    add_layer_norm(params, f"{prefix}.norm2", D)


def encoder_layer(query: Tensor, kv: Tensor, grid: tuple, cfg: DeformAttnConfig, params,
                  prefix="dte", attention="deform", training=False, rng=None, ln_eps=1e-5):
    """Post-norm layer: ``x1 = LN(q + attn(q, kv))``, ``out = LN(x1 + FFN(x1))``."""
    squeeze = query.ndim == 2
    if squeeze:
        query = reshape(query, (1,) + query.shape)
        kv = reshape(kv, (1,) + kv.shape)
    if attention == "deform":
        attn = deform_attn(query, kv, grid, cfg, params, f"{prefix}.attn", training, rng)
    else:
        attn = dense_attn(query, kv, cfg.heads, params, f"{prefix}.attn", cfg.dropout, training, rng)
    x1 = layer_norm(add(query, attn), params[f"{prefix}.norm1.gamma"],
                    params[f"{prefix}.norm1.beta"], ln_eps)
    hidden = gelu(linear(x1, params[f"{prefix}.ffn.fc1.weight"], params[f"{prefix}.ffn.fc1.bias"]))
    ffn = linear(hidden, params[f"{prefix}.ffn.fc2.weight"], params[f"{prefix}.ffn.fc2.bias"])
    ffn = dropout(ffn, cfg.dropout, rng, training)
    out = layer_norm(add(x1, ffn), params[f"{prefix}.norm2.gamma"],
                     params[f"{prefix}.norm2.beta"], ln_eps)
    return reshape(out, out.shape[1:]) if squeeze else out


def dte_layer(query, kv, grid, cfg, params, prefix="dte", training=False, rng=None):
    return encoder_layer(query, kv, grid, cfg, params, prefix, "deform", training, rng)


# -- the recurrence ---------------------------------------------------------
def _layer_kind(kind):
    return "dense" if kind == "recurrent_te" else "deform"


def init_temporal(params, kind: str, cfg: DeformAttnConfig, grid: tuple, rng_for, ffn_mult=4):
    """Register the parameters a variant needs (one shared spatial layer)."""
    check_variant(kind)
    init_encoder_layer(params, "dte", cfg, rng_for("dte"), _layer_kind(kind), ffn_mult)
    if kind in ("recurrent_dte", "recurrent_te"):
        params.add("delta", np.zeros((grid[0] * grid[1], cfg.dim)))
    if kind == "dte_tt":
        init_encoder_layer(params, "temporal", cfg, rng_for("temporal"), "dense", ffn_mult)


def _frames_tensor(F) -> tuple[list[Tensor], tuple | None]:
    """Accept a list of TokenFeatureMap/Tensor or a ``[B, L, n, D]`` tensor."""
    if isinstance(F, Tensor):
        if F.ndim != 4:
            raise DimensionError(f"expected [B, L, n, D] features, got {F.shape}")
        return [F[:, t] for t in range(F.shape[1])], None
    F = list(F)
    if not F:
        raise InputError("empty sequence")
    grids = {getattr(f, "grid", None) for f in F}
    frames = [getattr(f, "tokens", f) for f in F]
    shapes = {f.shape for f in frames}
    if len(shapes) != 1 or len(grids) != 1:
        raise DimensionError("all frames must share n, D and grid")
    return frames, grids.pop()


def streaming_forward(next_frame: Tensor, state: RecurrentState | None, grid: tuple,
                      cfg: DeformAttnConfig, params, kind="recurrent_dte", training=False,
                      rng=None):
    """One recurrence step; returns ``(f_hat_t, new_state)``.

    Only the current frame and the hidden state are held between steps.
    """
    attention = _layer_kind(kind)
    if state is None:
        delta = params["delta"]
        query = add(next_frame, broadcast_to(delta, next_frame.shape))
        t = 1
    else:
        if state.hidden.shape != next_frame.shape:
            raise DimensionError(f"state {state.hidden.shape} != frame {next_frame.shape}")
        query = state.hidden
        t = state.t + 1
    out = encoder_layer(query, next_frame, grid, cfg, params, "dte", attention, training, rng)
    return out, RecurrentState(out, t)


def recurrent_forward(F, grid, cfg, params, kind="recurrent_dte", training=False, rng=None):
    frames, g = _frames_tensor(F)
    grid = g or grid
    outputs, state = [], None
    for frame in frames:
        out, state = streaming_forward(frame, state, grid, cfg, params, kind, training, rng)
        outputs.append(out)
    return outputs


def recurrent_dte_forward(F, grid, cfg, params, training=False, rng=None):
    return recurrent_forward(F, grid, cfg, params, "recurrent_dte", training, rng)


def variant_forward(F, kind: str, grid, cfg: DeformAttnConfig, params, training=False, rng=None):
    """Per-frame refined features ``[f_hat_1 .. f_hat_L]`` for any variant."""
    check_variant(kind)
    if kind in ("recurrent_dte", "recurrent_te"):
        return recurrent_forward(F, grid, cfg, params, kind, training, rng)
    frames, g = _frames_tensor(F)
    grid = g or grid
    squeeze = frames[0].ndim == 2
    seq = stack(frames, axis=0 if squeeze else 1)  # [(B,) L, n, D]
    if squeeze:
        seq = reshape(seq, (1,) + seq.shape)
    B, L, n, D = seq.shape
    flat = reshape(seq, (B * L, n, D))
    refined = dte_layer(flat, flat, grid, cfg, params, "dte", training, rng)
    if kind == "dte_tt":
        joined = reshape(refined, (B, L * n, D))
        refined = encoder_layer(joined, joined, None, cfg, params, "temporal", "dense",
                                training, rng)
    refined = reshape(refined, (B, L, n, D))
    outs = [refined[:, t] for t in range(L)]
    return [reshape(o, (n, D)) for o in outs] if squeeze else outs
