"""Temporal GeM pooling, VLAD aggregation and PCA reduction of descriptors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.cluster.vq import kmeans2

from .errors import ConfigError, DimensionError, InputError
from .numerics import (
    Tensor,
    broadcast_to,
    clamp,
    div,
    exp,
    matmul,
    mean,
    mul,
    power,
    reshape,
    scale,
    softmax,
    sqrt,
    stack,
    sub,
    transpose,
    tsum,
)
from .layers import linear

GEM_EPS = 1e-6
NORM_EPS = 1e-12


# -- SeqGeM ---------------------------------------------------------------
def init_gem(params, p_init=3.0, prefix="gem"):
    if p_init <= 0:
        raise ConfigError(f"gem.p_init must be positive, got {p_init}")
    # stored as log p so the exponent stays positive under any update
    params.add(f"{prefix}.log_p", np.log(p_init))


def gem_exponent(params, prefix="gem") -> Tensor:
    return exp(params[f"{prefix}.log_p"])


def seq_gem(F_hat: Tensor, p, eps=GEM_EPS) -> Tensor:
    """Generalized mean over the temporal axis: ``[..., L, n, D] -> [..., 1, n, D]``.

    ``out = (mean_t clamp(x_t, eps) ** p) ** (1 / p)`` per token and channel.
    """
    if F_hat.ndim < 3 or F_hat.shape[-3] < 1:
        raise InputError(f"expected [..., L, n, D] with L >= 1, got {F_hat.shape}")
    p = p if isinstance(p, Tensor) else Tensor(np.asarray(p, dtype=F_hat.dtype))
    x = clamp(F_hat, lo=eps)
    pooled = mean(power(x, broadcast_to(p, x.shape)), axis=-3, keepdims=True)
    return power(pooled, broadcast_to(power(p, -1.0), pooled.shape))


# -- SeqVLAD --------------------------------------------------------------
def init_vlad(params, clusters: int, dim: int, rng, alpha=100.0, prefix="vlad"):
    if clusters < 1:
        raise ConfigError(f"vlad.clusters must be positive, got {clusters}")
    centers = rng.normal(0.0, 1.0, size=(clusters, dim))
    params.add(f"{prefix}.centers", centers)
    params.add(f"{prefix}.assign.weight", 2 * alpha * centers)
    params.add(f"{prefix}.assign.bias", -alpha * np.sum(centers ** 2, axis=1))


def reset_vlad_centers(params, tokens: np.ndarray, rng, alpha=100.0, prefix="vlad"):
    """k-means the given ``[N, D]`` tokens into cluster centers, NetVLAD-style init."""
    C = params[f"{prefix}.centers"].shape[0]
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.shape[0] < C:
        raise InputError(f"need at least {C} tokens to seed {C} clusters")
    centers, _ = kmeans2(tokens, C, minit="++", seed=rng)
    dtype = params.dtype
    params[f"{prefix}.centers"].data = centers.astype(dtype)
    params[f"{prefix}.assign.weight"].data = (2 * alpha * centers).astype(dtype)
    params[f"{prefix}.assign.bias"].data = (-alpha * np.sum(centers ** 2, axis=1)).astype(dtype)


def l2_normalize(x: Tensor, eps=NORM_EPS) -> Tensor:
    """Unit L2 norm over the last axis; an all-zero row stays zero."""
    norm = sqrt(tsum(mul(x, x), axis=-1, keepdims=True) + eps)
    return div(x, broadcast_to(norm, x.shape))


def soft_assign(tokens: Tensor, params, prefix="vlad") -> Tensor:
    w = params[f"{prefix}.assign.weight"]
    logits = linear(tokens, transpose(w, (1, 0)), params[f"{prefix}.assign.bias"])
    return softmax(logits, axis=-1)


def vlad_residuals(tokens: Tensor, params, prefix="vlad") -> Tensor:
    """Soft-assigned residual sums ``[..., C, D]`` before any normalization."""
    squeeze = tokens.ndim == 2
    if squeeze:
        tokens = reshape(tokens, (1,) + tokens.shape)
    centers = params[f"{prefix}.centers"]
    B, n, D = tokens.shape
    if D != centers.shape[1]:
        raise DimensionError(f"token dim {D} != VLAD dim {centers.shape[1]}")
    C = centers.shape[0]
    a = soft_assign(tokens, params, prefix)  # [B, n, C]
    weighted = matmul(transpose(a, (0, 2, 1)), tokens)  # [B, C, D]
    mass = broadcast_to(reshape(tsum(a, axis=1), (B, C, 1)), (B, C, D))
    V = sub(weighted, mul(mass, broadcast_to(centers, (B, C, D))))
    return reshape(V, (C, D)) if squeeze else V


def seq_vlad(tokens: Tensor, params, prefix="vlad") -> Tensor:
    """VLAD descriptor ``[..., C, D]``: intra-normalized rows, unit norm overall."""
    V = vlad_residuals(tokens, params, prefix)
    lead, (C, D) = V.shape[:-2], V.shape[-2:]
    flat = l2_normalize(reshape(l2_normalize(V), lead + (C * D,)))
    return reshape(flat, lead + (C, D))


# -- full aggregation -----------------------------------------------------
@dataclass
class SequenceDescriptor:
    V: Tensor  # [C, D]
    flat: Tensor  # [C*D], unit norm
    reduced: np.ndarray | None = None


def aggregate_batch(F_hat_list, params) -> Tensor:
    """``L`` tensors of ``[B, n, D]`` -> flat unit descriptors ``[B, C*D]``."""
    if not F_hat_list:
        raise InputError("nothing to aggregate")
    F_hat = stack(list(F_hat_list), axis=-3)  # [B, L, n, D]
    pooled = seq_gem(F_hat, gem_exponent(params))
    tokens = reshape(pooled, pooled.shape[:-3] + pooled.shape[-2:])
    V = seq_vlad(tokens, params)
    return reshape(V, V.shape[:-2] + (V.shape[-2] * V.shape[-1],))


def aggregate(F_hat_list, params) -> SequenceDescriptor:
    """Descriptor for one sequence given its per-iteration ``[n, D]`` outputs."""
    F_hat_list = list(F_hat_list)
    if not F_hat_list:
        raise InputError("nothing to aggregate")
    if len({f.shape for f in F_hat_list}) != 1:
        raise DimensionError("per-iteration outputs must share one shape")
    flat = aggregate_batch(F_hat_list, params)
    C, D = params["vlad.centers"].shape
    return SequenceDescriptor(V=reshape(flat, (C, D)), flat=flat)


# -- PCA ------------------------------------------------------------------
@dataclass
class PCAProjection:
    mean: np.ndarray  # [d]
    basis: np.ndarray  # [k, d], orthonormal rows
    explained_variance: np.ndarray  # [k]

    @property
    def dim(self):
        return self.basis.shape[0]


def pca_fit(X, k: int) -> PCAProjection:
    """Top-``k`` principal subspace of mean-centered rows of ``X``."""
    X = np.asarray(X, dtype=np.float64)
    N, d = X.shape
    if k < 1 or k > d or k >= N:
        raise ConfigError(f"pca.dim={k} must satisfy 1 <= k <= d={d} and k < N={N}")
    mu = X.mean(axis=0)
    cov = (X - mu).T @ (X - mu) / N
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:k]
    basis = evecs[:, order].T
    # deterministic sign: largest-magnitude component positive
    flip = np.sign(basis[np.arange(k), np.argmax(np.abs(basis), axis=1)])
    basis = basis * flip[:, None]
    return PCAProjection(mean=mu, basis=basis, explained_variance=evals[order])


def pca_apply(proj: PCAProjection, x, renormalize=True) -> np.ndarray:
    """Project rows of ``x`` (``[d]`` or ``[N, d]``), then L2-renormalize."""
    x = np.asarray(x, dtype=np.float64)
    z = (x - proj.mean) @ proj.basis.T
    if renormalize:
        z = z / np.maximum(np.linalg.norm(z, axis=-1, keepdims=True), NORM_EPS)
    return z
