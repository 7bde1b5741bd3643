"""Patch-pooling tokenizer standing in for a pretrained vision backbone.

Each frame is cut into ``P x P`` patches, every patch is averaged per
channel, projected to ``D`` dims and offset by a learned positional
embedding shared across frames.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, InputError
from .layers import linear, xavier_uniform
from .numerics import Tensor, add, broadcast_to


@dataclass
class TokenFeatureMap:
    tokens: Tensor  # [n, D] (or [B, n, D] inside batched code)
    grid: tuple  # (h_g, w_g)

    def __post_init__(self):
        h, w = self.grid
        if self.tokens.shape[-2] != h * w:
            raise DimensionError(f"{self.tokens.shape[-2]} tokens do not fill a {h}x{w} grid")

    @property
    def n(self):
        return self.tokens.shape[-2]

    @property
    def dim(self):
        return self.tokens.shape[-1]


def token_grid(height: int, width: int, patch: int) -> tuple:
    if height % patch or width % patch:
        raise DimensionError(f"frame {height}x{width} is not divisible by patch size {patch}")
    return height // patch, width // patch


def init_encoder(params, dim: int, grid: tuple, rng: np.random.Generator, prefix="encoder"):
    n = grid[0] * grid[1]
    params.add(f"{prefix}.proj.weight", xavier_uniform(rng, 3, dim))
    params.add(f"{prefix}.proj.bias", np.zeros(dim))
    params.add(f"{prefix}.pos", rng.normal(0.0, 0.02, size=(n, dim)))


def patch_means(frames: np.ndarray, patch: int) -> np.ndarray:
    """``[..., H, W, 3]`` pixels -> ``[..., n, 3]`` per-patch channel means."""
    *lead, H, W, ch = frames.shape
    hg, wg = token_grid(H, W, patch)
    blocks = frames.reshape(*lead, hg, patch, wg, patch, ch)
    k = len(lead)
    means = blocks.mean(axis=(k + 1, k + 3))
    return means.reshape(*lead, hg * wg, ch)


def encode_frames(frames, params, patch: int, prefix="encoder") -> Tensor:
    """Tokenize a stack of frames ``[..., H, W, 3]`` into ``[..., n, D]``."""
    frames = np.asarray(frames.data if isinstance(frames, Tensor) else frames)
    if frames.ndim < 3 or frames.shape[-1] != 3:
        raise DimensionError(f"expected [..., H, W, 3] frames, got {frames.shape}")
    dtype = params[f"{prefix}.pos"].dtype
    pooled = Tensor(patch_means(frames.astype(dtype), patch))
    pos = params[f"{prefix}.pos"]
    if pooled.shape[-2] != pos.shape[0]:
        raise DimensionError(f"{pooled.shape[-2]} patches but positional table has {pos.shape[0]}")
    tokens = linear(pooled, params[f"{prefix}.proj.weight"], params[f"{prefix}.proj.bias"])
    return add(tokens, broadcast_to(pos, tokens.shape))


def encode_sequence(frames, params, patch: int) -> list[TokenFeatureMap]:
    """Per-frame token maps for an ``[L, H, W, 3]`` sequence."""
    frames = np.asarray(frames)
    if frames.ndim != 4 or frames.shape[0] < 1:
        raise InputError(f"expected a nonempty [L, H, W, 3] sequence, got {frames.shape}")
    grid = token_grid(frames.shape[1], frames.shape[2], patch)
    tokens = encode_frames(frames, params, patch)
    return [TokenFeatureMap(tokens[t], grid) for t in range(frames.shape[0])]
