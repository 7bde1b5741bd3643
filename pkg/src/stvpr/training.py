"""Triplet training with descriptor-space positives and hardest negatives."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .errors import ConfigError, DimensionError, InputError, NumericError
from .dataset import Dataset, GroundTruth, Split, positive_mask
from .evaluation import RetrievalIndex, recall_at_k
from .numerics import Tensor, add, broadcast_to, mul, no_grad, relu, reshape, rng, sub, tsum

log = logging.getLogger(__name__)


@dataclass
class TripletConfig:
    margin: float = 0.1
    n_negatives: int = 5
    batch_size: int = 4
    seq_len: int = 5
    lr: float = 1e-3
    offset_lr_mult: float = 0.1  # sampling-offset heads train slower, as in deformable DETR
    patience: int = 5
    min_epochs: int = 10
    max_epochs: int = 30
    init_clusters: bool = True

    def __post_init__(self):
        if self.margin <= 0:
            raise ConfigError(f"train.margin must be > 0, got {self.margin}")
        if self.n_negatives < 1:
            raise ConfigError("train.n_negatives must be >= 1")
        if (self.batch_size < 1 or self.seq_len < 1 or self.max_epochs < 0 or self.patience < 1
                or self.min_epochs < 0):
            raise ConfigError("train sizes must be positive")
        if self.offset_lr_mult < 0:
            raise ConfigError("train.offset_lr_mult must be nonnegative")
        if self.lr < 0:
            raise ConfigError("train.lr must be nonnegative")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config key(s): {sorted(unknown)}")
        return cls(**d)


# -- loss -----------------------------------------------------------------
def _sqdist(a: Tensor, b: Tensor) -> Tensor:
    d = sub(a, b)
    return tsum(mul(d, d), axis=-1)


def triplet_loss(dq: Tensor, dp: Tensor, dns, margin=0.1) -> Tensor:
    """``sum_j max(0, |q-p|^2 - |q-n_j|^2 + margin)`` for one query.

    ``dq``/``dp`` are ``[d]``; ``dns`` is a list of ``[d]`` or a ``[J, d]`` tensor.
    """
    if not isinstance(dns, Tensor):
        from .numerics import stack

        dns = stack(list(dns), axis=0)
    if dq.shape != dp.shape or dns.shape[-1] != dq.shape[-1]:
        raise InputError(f"descriptor dims disagree: {dq.shape}, {dp.shape}, {dns.shape}")
    J = dns.shape[0]
    pos = broadcast_to(reshape(_sqdist(dq, dp), (1,)), (J,))
    neg = _sqdist(broadcast_to(dq, dns.shape), dns)
    return tsum(relu(add(sub(pos, neg), Tensor(np.full(J, margin, dtype=dq.dtype)))))


def batch_triplet_loss(dq: Tensor, dp: Tensor, dn: Tensor, margin=0.1) -> Tensor:
    """Mean over the batch of per-query triplet losses; ``dn`` is ``[B, J, d]``."""
    B, J, d = dn.shape
    if dq.shape != (B, d) or dp.shape != (B, d):
        raise DimensionError(f"batch shapes disagree: {dq.shape}, {dp.shape}, {dn.shape}")
    pos = broadcast_to(reshape(_sqdist(dq, dp), (B, 1)), (B, J))
    neg = _sqdist(broadcast_to(reshape(dq, (B, 1, d)), (B, J, d)), dn)
    hinge = relu(add(sub(pos, neg), Tensor(np.full((B, J), margin, dtype=dq.dtype))))
    return tsum(hinge) * (1.0 / B)


# -- mining ---------------------------------------------------------------
@dataclass
class MiningCache:
    descriptors: np.ndarray  # [N, d] database descriptors (frozen snapshot)
    anchors: np.ndarray  # [N]
    positions: np.ndarray  # [N, 2]
    epoch: int = 0


@dataclass
class MiningStats:
    skipped: int = 0


def mine_triplet(q_desc, q_anchor, q_pos, cache: MiningCache, gt: GroundTruth, n_negatives=5,
                 exclude=None, stats: MiningStats | None = None):
    """``(positive index, negative indices)`` or ``None`` when no positive exists.

    Positive: the geometric positive nearest in descriptor space (``exclude``
    removes the query's own row when query and database coincide).
    Negatives: the ``n_negatives`` nearest geometric non-positives. Ties go to
    the lower index.
    """
    if len(cache.descriptors) == 0:
        raise InputError("empty mining cache")
    d2 = np.sum((cache.descriptors - np.asarray(q_desc)[None, :]) ** 2, axis=1)
    pos_mask = positive_mask([q_anchor], cache.anchors, gt, [q_pos], cache.positions)[0]
    candidates = pos_mask.copy()
    if exclude is not None:
        candidates[exclude] = False
    if not candidates.any():
        if stats is not None:
            stats.skipped += 1
        log.warning("query without a geometric positive skipped")
        return None
    order = np.argsort(d2, kind="stable")
    positive = int(next(i for i in order if candidates[i]))
    negatives = [int(i) for i in order if not pos_mask[i] and i != exclude][:n_negatives]
    return positive, negatives


# -- optimizer ------------------------------------------------------------
@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, state: AdamState, lr, beta1=0.9, beta2=0.999, eps=1e-8, grads=None,
              lr_mult=None):
    """One bias-corrected Adam update of every registry parameter, in place.

    ``grads`` defaults to each parameter's accumulated ``grad`` (missing = 0).
    ``lr_mult`` maps a path substring to a learning-rate multiplier.
    """
    for path, t in params.items():
        g = grads.get(path) if grads is not None else t.grad
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {path}")
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for path, t in params.items():
        g = grads.get(path) if grads is not None else t.grad
        g = np.zeros_like(t.data) if g is None else np.asarray(g, dtype=t.dtype)
        m = state.m.get(path)
        v = state.v.get(path)
        m = (1 - beta1) * g if m is None else beta1 * m + (1 - beta1) * g
        v = (1 - beta2) * g * g if v is None else beta2 * v + (1 - beta2) * g * g
        state.m[path], state.v[path] = m, v
        scale = 1.0
        for key, mult in (lr_mult or {}).items():
            if key in path:
                scale *= mult
        update = scale * lr * (m / c1) / (np.sqrt(v / c2) + eps)
        t.data = (t.data - update).astype(t.dtype)
    return state


# -- early stopping -------------------------------------------------------
class EarlyStopper:
    """Stops once the metric has not improved for ``patience`` epochs.

    ``secondary`` breaks ties in the primary metric (useful once R@5 saturates).
    No stop is signalled before ``min_epochs`` epochs have run.
    """

    def __init__(self, patience=5, min_epochs=0):
        self.patience = patience
        self.min_epochs = min_epochs
        self.best = (-np.inf, -np.inf)
        self.best_epoch = 0
        self.epoch = 0

    def update(self, value, secondary=None) -> bool:
        self.epoch += 1
        key = (value, -np.inf if secondary is None else secondary)
        if key > self.best:
            self.best = key
            self.best_epoch = self.epoch
            return False
        return self.epoch - self.best_epoch >= self.patience and self.epoch >= self.min_epochs

    @property
    def best_value(self):
        return self.best[0]

    @property
    def improved(self) -> bool:
        return self.best_epoch == self.epoch


# -- evaluation helpers ---------------------------------------------------
def split_index(model, split: Split, L: int, condition="A") -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    anchors = split.anchors(L)
    desc = model.descriptors(split.windows(condition, L))
    return desc, anchors, split.positions[anchors]


def evaluate_split(model, split: Split, L: int, gt: GroundTruth, ks=(1, 5, 10), pca=None) -> dict:
    """Recall@K of condition-B queries against the condition-A database."""
    was_training = model.training
    model.eval()
    db, db_anchor, db_pos = split_index(model, split, L, "A")
    q, q_anchor, q_pos = split_index(model, split, L, "B")
    model.train(was_training)
    if pca is not None:
        from .aggregation import pca_apply, pca_fit

        proj = pca_fit(db, pca) if isinstance(pca, int) else pca
        db, q = pca_apply(proj, db), pca_apply(proj, q)
    index = RetrievalIndex(db, db_anchor, db_pos)
    return {k: recall_at_k(q, q_anchor, q_pos, index, gt, k) for k in ks}


# -- training loop --------------------------------------------------------
@dataclass
class TrainResult:
    best_state: dict
    history: list
    best_epoch: int
    epochs_run: int
    skipped: int = 0
    aborted: bool = False


def train(model, data: Dataset, cfg: TripletConfig, seed=0, train_split="train",
          val_split="val", progress=None) -> TrainResult:
    """Fit ``model`` in place; on return it holds the best-by-R@5 parameters."""
    gt = data.config.ground_truth
    split = data.splits[train_split]
    val = data.splits[val_split]
    L = cfg.seq_len
    anchors = split.anchors(L)
    db_windows = split.windows("A", L)
    q_windows = split.windows("B", L)
    positions = split.positions[anchors]
    order_rng = rng.stream(seed, "train.order")

    if cfg.init_clusters:
        model.eval()
        model.init_clusters(db_windows)

    state = AdamState()
    stopper = EarlyStopper(cfg.patience, cfg.min_epochs)
    stats = MiningStats()
    history = []
    best_state = model.params.state()
    last_good = best_state
    aborted = False
    epochs = 0

    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        model.eval()
        cache = MiningCache(model.descriptors(db_windows), anchors, positions, epoch)
        q_desc = model.descriptors(q_windows)
        model.train()

        losses = []
        perm = order_rng.permutation(len(anchors))
        for start in range(0, len(perm), cfg.batch_size):
            triplets = []
            for qi in perm[start:start + cfg.batch_size]:
                mined = mine_triplet(q_desc[qi], anchors[qi], positions[qi], cache, gt,
                                     cfg.n_negatives, stats=stats)
                if mined is not None and len(mined[1]) == cfg.n_negatives:
                    triplets.append((qi, *mined))
            if not triplets:
                continue
            B, J = len(triplets), cfg.n_negatives
            batch = np.concatenate([
                q_windows[[t[0] for t in triplets]],
                db_windows[[t[1] for t in triplets]],
                db_windows[[n for t in triplets for n in t[2]]],
            ])
            desc = model.describe(batch)
            d = desc.shape[-1]
            loss = batch_triplet_loss(desc[:B], desc[B:2 * B], reshape(desc[2 * B:], (B, J, d)),
                                      cfg.margin)
            value = float(loss.data)
            if not np.isfinite(value):
                log.error("loss diverged at epoch %d; restoring last good parameters", epoch)
                model.params.load_state(last_good)
                aborted = True
                break
            model.params.zero_grad()
            loss.backward()
            adam_step(model.params, state, cfg.lr, lr_mult={"sampling_offsets": cfg.offset_lr_mult})
            losses.append(value)
        if aborted:
            break

        model.eval()
        recalls = evaluate_split(model, val, L, gt, ks=(1, 5, 10))
        epochs = epoch
        stop = stopper.update(recalls[5], recalls[1])
        last_good = model.params.state()
        if stopper.improved:
            best_state = last_good
        entry = {
            "epoch": epoch,
            "loss": float(np.mean(losses)) if losses else 0.0,
            "r_at_1": recalls[1],
            "r_at_5": recalls[5],
            "r_at_10": recalls[10],
            "wall_time": time.perf_counter() - t0,
        }
        history.append(entry)
        if progress is not None:
            progress(entry)
        if stop:
            break

    model.params.load_state(best_state)
    model.eval()
    return TrainResult(best_state, history, stopper.best_epoch, epochs, stats.skipped, aborted)
