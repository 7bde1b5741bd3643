"""Whole-pipeline gradient check on a tiny float64 model."""

from __future__ import annotations

import numpy as np

from .dataset import DataConfig, make_dataset
from .model import ModelConfig, build_model
from .numerics import grad_check_report, reshape, rng
from .training import batch_triplet_loss


def tiny_problem(seed=0, use_encoder=True, variant="recurrent_dte", dim=8, clusters=4, L=3,
                 perturb=0.05):
    """``(loss_fn, model)`` for images -> encoder -> temporal layer -> GeM -> VLAD -> triplet.

    Parameters get a small random perturbation: at initialization the ring of
    sampling offsets lands exactly on token centres, where bilinear sampling
    has kinks and central differences are meaningless.
    """
    mcfg = ModelConfig(dim=dim, heads=2, points=2, levels=1, dropout=0.0, clusters=clusters,
                       variant=variant, grid=(4, 4), use_encoder=use_encoder, patch_size=4,
                       image_size=(16, 16), dtype="float64")
    model = build_model(mcfg, seed, "float64")
    r = rng.stream(seed, "gradcheck.perturb")
    for _, t in model.params.items():
        t.data = np.asarray(t.data + r.normal(0.0, perturb, size=t.shape))
    dcfg = DataConfig(n_places=8, train_places=0, seq_len=L, dim=dim, grid=(4, 4),
                      images=use_encoder, image_size=(16, 16))
    split = make_dataset(dcfg, seed, splits=("train",)).splits["train"]
    A, B = split.windows("A", L), split.windows("B", L)
    batch = np.concatenate([B[:1], A[:1], A[3:5]]).astype(np.float64)

    def loss():
        d = model.describe(batch)
        # squared distances of unit vectors are at most 4, so margin 4 keeps every hinge active
        return batch_triplet_loss(d[:1], d[1:2], reshape(d[2:], (1, 2, d.shape[-1])), 4.0)

    return loss, model


def pipeline_grad_check(seed=0, eps=1e-5, **kw) -> dict:
    loss, model = tiny_problem(seed, **kw)
    return grad_check_report(loss, model.params, eps)
