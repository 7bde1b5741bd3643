"""Retrieval, Recall@K, latency-constrained streaming and cost accounting."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .deform_attn import flops_deform_attn, flops_dense_attn
from .errors import ConfigError, InputError
from .dataset import GroundTruth, positive_mask
from .recurrent import check_variant

log = logging.getLogger(__name__)


# -- retrieval ------------------------------------------------------------
@dataclass
class RetrievalIndex:
    descriptors: np.ndarray  # [N, d], unit rows
    anchors: np.ndarray  # [N] anchor place index (frame mode)
    positions: np.ndarray  # [N, 2] anchor positions (radius mode)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.descriptors = np.asarray(self.descriptors, dtype=np.float64)
        if len(self.descriptors) == 0:
            raise InputError("empty index")

    def search(self, queries: np.ndarray, k: int, exclude_self=False) -> np.ndarray:
        """Exact top-``k`` rows by Euclidean distance; ties go to the lower index."""
        q = np.asarray(queries, dtype=np.float64)
        d2 = np.empty((len(q), len(self.descriptors)))
        step = max(1, 2_000_000 // max(1, self.descriptors.size))
        for s in range(0, len(q), step):
            diff = q[s:s + step, None, :] - self.descriptors[None, :, :]
            d2[s:s + step] = np.sum(diff * diff, axis=-1)
        if exclude_self:
            np.fill_diagonal(d2, np.inf)
        order = np.argsort(d2, axis=1, kind="stable")
        return order[:, :k]


def brute_force_topk(queries, database, k):
    """Reference scan: explicit per-pair distances, stable sort."""
    out = []
    for q in np.asarray(queries, dtype=np.float64):
        d = np.array([np.sqrt(np.sum((q - x) ** 2)) for x in np.asarray(database, dtype=np.float64)])
        out.append(np.argsort(d, kind="stable")[:k])
    return np.array(out)


def _hits(topk: np.ndarray, positives: np.ndarray) -> np.ndarray:
    """Per-query boolean: some top-k candidate is a positive."""
    rows = np.arange(len(topk))[:, None]
    return positives[rows, topk].any(axis=1)


def query_hits(q_desc, q_anchor, q_pos, index: RetrievalIndex, gt: GroundTruth, k: int,
               exclude_self=False):
    """``(hit, valid)`` per query; ``valid`` is False for queries with no positive."""
    if k < 1:
        raise ConfigError(f"K must be >= 1, got {k}")
    pos = positive_mask(q_anchor, index.anchors, gt, q_pos, index.positions)
    if exclude_self:
        np.fill_diagonal(pos, False)
    valid = pos.any(axis=1)
    topk = index.search(q_desc, min(k, len(index.descriptors)), exclude_self)
    return _hits(topk, pos), valid


def recall_at_k(q_desc, q_anchor, q_pos, index: RetrievalIndex, gt: GroundTruth, k: int,
                exclude_self=False) -> float:
    """Fraction of queries with a geometric positive among the ``k`` nearest."""
    hit, valid = query_hits(q_desc, q_anchor, q_pos, index, gt, k, exclude_self)
    skipped = int((~valid).sum())
    if skipped:
        log.warning("%d queries have no geometric positive; excluded", skipped)
    if not valid.any():
        return 0.0
    return float(hit[valid].mean())


# -- streaming ------------------------------------------------------------
@dataclass
class StreamEvent:
    index: int
    arrival: float
    latency: float
    hit: bool
    on_time: bool = False


def on_time_mask(latencies, fps: float, queued=False) -> np.ndarray:
    """Which queries deliver their answer before the next query arrives.

    Per-query model: ``latency <= 1/fps``. Queued model: a single server
    processes queries in arrival order; query ``i`` arrives at ``i/fps`` and
    is on time iff it finishes by ``(i+1)/fps``.
    """
    lat = np.asarray(latencies, dtype=np.float64)
    if np.any(lat < 0):
        raise InputError("latencies must be nonnegative")
    if fps == 0.0:  # no deadline
        return np.ones(len(lat), dtype=bool)
    if fps < 0:
        raise ConfigError(f"fps must be positive, got {fps}")
    period = 1.0 / fps
    if not queued:
        return lat <= period
    done = np.empty(len(lat))
    free_at = 0.0
    for i, l in enumerate(lat):
        start = max(i * period, free_at)
        free_at = done[i] = start + l
    return done <= (np.arange(len(lat)) + 1) * period


def stream_eval(latencies, hits, fps: float, valid=None, queued=False):
    """``(OT%, on-time R@K, plain R@K)`` for per-query latencies and hits.

    ``fps=0`` stands for an unbounded period (no deadline).
    """
    hits = np.asarray(hits, dtype=bool)
    valid = np.ones(len(hits), dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    ok = on_time_mask(latencies, fps, queued)
    denom = max(int(valid.sum()), 1)
    ot_pct = 100.0 * float(ok[valid].mean()) if valid.any() else 0.0
    on_time_recall = float((hits & ok & valid).sum()) / denom
    plain = float((hits & valid).sum()) / denom
    return ot_pct, on_time_recall, plain


def stream_events(latencies, hits, fps: float, queued=False) -> list[StreamEvent]:
    ok = on_time_mask(latencies, fps, queued)
    period = 0.0 if fps == 0 else 1.0 / fps
    return [StreamEvent(i, i * period, float(l), bool(h), bool(o))
            for i, (l, h, o) in enumerate(zip(latencies, hits, ok))]


def fps_sweep(latencies, hits, valid=None, fps_values=None, queued=False) -> list[tuple]:
    """Rows ``(fps, OT%, on-time R@K)`` over a range of stream rates."""
    fps_values = np.arange(20, 61) if fps_values is None else fps_values
    rows = []
    for fps in fps_values:
        ot, r_on, _ = stream_eval(latencies, hits, float(fps), valid, queued)
        rows.append((float(fps), ot, r_on))
    return rows


# -- resource accounting --------------------------------------------------
@dataclass
class ResourceReport:
    variant: str
    seq_len: int
    stage_flops: dict  # stage -> flops per sequence
    params: dict  # stage -> parameter count
    peak_activations: int  # elements held at once during inference
    stage_peak: dict = field(default_factory=dict)
    wall_ms: dict = field(default_factory=dict)

    @property
    def flops(self) -> int:
        return int(sum(self.stage_flops.values()))

    @property
    def gflops(self) -> float:
        return self.flops / 1e9

    @property
    def total_params(self) -> int:
        return int(sum(self.params.values()))

    def rows(self):
        stages = list(self.stage_flops) + ["overall"]
        for s in stages:
            if s == "overall":
                yield s, self.flops, self.total_params, self.peak_activations
            else:
                yield s, self.stage_flops[s], self.params.get(s, 0), self.stage_peak.get(s, 0)


def layer_norm_flops(rows: int, dim: int) -> int:
    # mean, variance, normalize, affine
    return 8 * rows * dim


def ffn_flops(rows: int, dim: int, mult=4) -> int:
    hidden = mult * dim
    return 2 * rows * dim * hidden * 2 + 8 * rows * hidden  # two linears + GELU


def encoder_layer_flops(n_q: int, n_kv: int, cfg, attention: str, ffn_mult=4) -> int:
    if attention == "deform":
        attn = flops_deform_attn(n_q, cfg)
    else:
        attn = flops_dense_attn(n_q, n_kv, cfg.dim, cfg.heads)
    residuals = 2 * n_q * cfg.dim
    return attn + residuals + 2 * layer_norm_flops(n_q, cfg.dim) + ffn_flops(n_q, cfg.dim, ffn_mult)


def gem_flops(L: int, n: int, dim: int) -> int:
    # clamp, x**p (log, mul, exp), mean, root
    return L * n * dim * 5 + n * dim * 4


def vlad_flops(n: int, dim: int, clusters: int) -> int:
    assign = 2 * n * dim * clusters + 4 * n * clusters
    residual = 2 * n * clusters * dim + 2 * clusters * dim
    norms = 3 * clusters * dim + 3 * clusters * dim
    return assign + residual + norms


def resource_report(model_cfg, L: int, params=None) -> ResourceReport:
    """Analytic per-sequence cost of one model configuration at length ``L``."""
    kind = check_variant(model_cfg.variant)
    if L < 1:
        raise ConfigError("seq_len must be >= 1")
    cfg = model_cfg.attn_config()
    n, D, C = model_cfg.n_tokens, model_cfg.dim, model_cfg.clusters
    stages, counts, peaks = {}, {}, {}

    if model_cfg.use_encoder:
        H, W = model_cfg.image_size
        stages["encoder"] = L * (H * W * 3 + 2 * n * 3 * D + n * D)
        peaks["encoder"] = H * W * 3 + n * D
    else:
        stages["encoder"] = 0
        peaks["encoder"] = 0

    attention = "dense" if kind == "recurrent_te" else "deform"
    layer = encoder_layer_flops(n, n, cfg, attention, model_cfg.ffn_mult)
    if kind in ("recurrent_dte", "recurrent_te"):
        stages["spatio_temporal"] = n * D + L * layer
    else:
        stages["spatio_temporal"] = L * layer
    if kind == "dte_tt":
        stages["spatio_temporal"] += encoder_layer_flops(L * n, L * n, cfg, "dense", model_cfg.ffn_mult)

    stages["aggregation"] = gem_flops(L, n, D) + vlad_flops(n, D, C)

    # working set inside one layer: FFN hidden plus attention intermediates
    ffn_hidden = model_cfg.ffn_mult * n * D
    if attention == "deform":
        attn_work = n * cfg.heads * cfg.k_total * (3 + cfg.head_dim) + n * D
    else:
        attn_work = cfg.heads * n * n + 3 * n * D
    layer_work = max(ffn_hidden, attn_work)
    if kind in ("recurrent_dte", "recurrent_te"):
        # streaming: hidden state + current frame, outputs folded into the GeM accumulator
        peaks["spatio_temporal"] = 2 * n * D + layer_work
    elif kind == "dte_only":
        peaks["spatio_temporal"] = 2 * n * D + layer_work
    else:
        Ln = L * n
        peaks["spatio_temporal"] = Ln * D + max(model_cfg.ffn_mult * Ln * D, cfg.heads * Ln * Ln + 3 * Ln * D)
    peaks["aggregation"] = n * D + n * C + C * D

    if params is not None:
        counts["encoder"] = params.count("encoder")
        counts["spatio_temporal"] = (params.count("dte") + params.count("delta")
                                     + params.count("temporal"))
        counts["aggregation"] = params.count("gem") + params.count("vlad")
    return ResourceReport(kind, L, stages, counts, max(peaks.values()), peaks)


def streaming_peak_activations(model_cfg) -> int:
    """Elements retained by streaming inference: 2 n x D maps + a per-layer constant."""
    return resource_report(model_cfg, 1).stage_peak["spatio_temporal"]


# -- CSV writers ----------------------------------------------------------
def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if isinstance(x, np.integer):
        return int(x)
    return x


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def write_recall_csv(path, recalls: dict):
    write_csv(path, ["K", "value"], [(k, float(v)) for k, v in sorted(recalls.items())])


def write_fps_csv(path, rows):
    write_csv(path, ["fps", "ot_pct", "r_at_5"], rows)


def write_resources_csv(path, report: ResourceReport):
    write_csv(path, ["stage", "flops", "params", "peak_activations"], list(report.rows()))


def period_ms(fps: float) -> float:
    return math.inf if fps == 0 else 1000.0 / fps
