"""Command-line entry point: ``stvpr <command> [--config FILE] [--section.key VALUE ...]``.

Commands: train, eval, stream, ablate, flops, gen-data, grad-check. Every
command writes ``config.json`` (the resolved settings plus tool version)
into ``--out``. Exit codes: 0 ok, 2 config error, 3 numeric error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .aggregation import pca_apply, pca_fit
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, parse_value
from .dataset import Dataset, load_dataset, make_dataset, save_dataset
from .errors import ConfigError, DimensionError, InputError, NumericError
from .evaluation import (
    RetrievalIndex,
    fps_sweep,
    query_hits,
    recall_at_k,
    resource_report,
    stream_eval,
    write_csv,
    write_fps_csv,
    write_recall_csv,
    write_resources_csv,
)
from .model import build_model
from .training import split_index, train

log = logging.getLogger("stvpr")

COMMANDS = ("train", "eval", "stream", "ablate", "flops", "gen-data", "grad-check")


# -- shared plumbing --------------------------------------------------------
def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="stvpr",
        description="Sequential place recognition: training, evaluation and cost reports.",
        epilog="Any config key can be overridden as --section.key VALUE (e.g. --model.variant dte_only).",
    )
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="TOML config file")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--out", help="output directory (overrides config 'out')")
    p.add_argument("--checkpoint", help="checkpoint directory (eval, stream)")
    p.add_argument("--data", help="dataset directory written by gen-data; default: regenerate")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _overrides(extra: list[str]) -> dict:
    """``--a.b VALUE`` / ``--a.b=VALUE`` pairs into a dict of dotted paths."""
    out, i = {}, 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or "." not in tok:
            raise ConfigError(f"unrecognized argument: {tok}")
        key = tok[2:]
        if "=" in key:
            key, text = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ConfigError(f"missing value for --{key}")
            text = extra[i + 1]
            i += 2
        out[key] = parse_value(text)
    return out


def _setup(args, extra) -> tuple[RunConfig, Path]:
    overrides = _overrides(extra)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out"] = args.out
    cfg = RunConfig.load(args.config, overrides)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.echo(__version__))
    return cfg, out


def _dataset(cfg: RunConfig, args) -> Dataset:
    if args.data:
        return load_dataset(args.data)
    return make_dataset(cfg.data_config(), cfg.seed)


def _model(cfg: RunConfig, args, data=None):
    """The ``--checkpoint`` model, else an untrained one (VLAD centers seeded on train)."""
    if args.checkpoint:
        return load_checkpoint(args.checkpoint)
    model = build_model(cfg.model_config(), cfg.seed)
    if data is not None and "train" in data.splits:
        model.init_clusters(data.splits["train"].windows("A", cfg["train"]["seq_len"]))
    return model


def _descriptors(model, data, cfg: RunConfig, L: int):
    split = data.splits[cfg["eval"]["split"]]
    model.eval()
    db, db_anchor, db_pos = split_index(model, split, L, "A")
    q, q_anchor, q_pos = split_index(model, split, L, "B")
    k = cfg["pca"]["dim"]
    if k:
        proj = pca_fit(db, k)
        db, q = pca_apply(proj, db), pca_apply(proj, q)
    return RetrievalIndex(db, db_anchor, db_pos), q, q_anchor, q_pos


def _recalls(model, data, cfg: RunConfig, L: int) -> dict:
    index, q, q_anchor, q_pos = _descriptors(model, data, cfg, L)
    gt = data.config.ground_truth
    return {k: recall_at_k(q, q_anchor, q_pos, index, gt, k) for k in cfg["eval"]["ks"]}


def _dump_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _fit(model, data, cfg: RunConfig, L=None):
    tc = cfg.triplet_config()
    if L is not None:
        tc.seq_len = L
    return train(model, data, tc, cfg.seed,
                 progress=lambda e: log.info("epoch %d loss %.4f R@1 %.3f R@5 %.3f", e["epoch"],
                                             e["loss"], e["r_at_1"], e["r_at_5"]))


# -- commands -----------------------------------------------------------------
def cmd_gen_data(cfg: RunConfig, out: Path, args):
    data = make_dataset(cfg.data_config(), cfg.seed)
    save_dataset(data, out / "data")
    log.info("dataset written to %s", out / "data")


def cmd_train(cfg: RunConfig, out: Path, args):
    data = _dataset(cfg, args)
    model = _model(cfg, args)
    result = _fit(model, data, cfg)
    save_checkpoint(model, out / "checkpoint", extra={"version": __version__})
    _dump_json(out / "train_log.json", {
        "best_epoch": result.best_epoch,
        "epochs_run": result.epochs_run,
        "skipped_queries": result.skipped,
        "aborted": result.aborted,
        "history": result.history,
    })
    if result.aborted:
        raise NumericError("training diverged; last good parameters were saved")


def cmd_eval(cfg: RunConfig, out: Path, args):
    data = _dataset(cfg, args)
    model = _model(cfg, args, data)
    recalls = _recalls(model, data, cfg, cfg["eval"]["seq_len"])
    write_recall_csv(out / "recall.csv", recalls)
    for k, v in recalls.items():
        log.info("R@%d = %.4f", k, v)


def _latencies(cfg: RunConfig, model_cfg, L: int, count: int) -> np.ndarray:
    """Simulated-clock latencies in seconds: injected constant or flops / device rate."""
    s = cfg["stream"]
    if s["latency_ms"] >= 0:
        return np.full(count, s["latency_ms"] / 1000.0)
    if s["device_gflops"] <= 0:
        raise ConfigError("stream.device_gflops must be positive when stream.latency_ms < 0")
    flops = resource_report(model_cfg, L).flops
    return np.full(count, flops / (s["device_gflops"] * 1e9))


def cmd_stream(cfg: RunConfig, out: Path, args):
    data = _dataset(cfg, args)
    model = _model(cfg, args, data)
    s = cfg["stream"]
    L = cfg["eval"]["seq_len"]
    index, q, q_anchor, q_pos = _descriptors(model, data, cfg, L)
    hit, valid = query_hits(q, q_anchor, q_pos, index, data.config.ground_truth, s["k"])
    lat = _latencies(cfg, model.cfg, L, len(q))
    fps_values = np.arange(s["fps_min"], s["fps_max"] + 1e-9, s["fps_step"])
    rows = fps_sweep(lat, hit, valid, fps_values, s["queued"])
    write_fps_csv(out / "fps_sweep.csv", rows)
    ot, r_on, r_plain = stream_eval(lat, hit, s["fps"], valid, s["queued"])
    report = resource_report(model.cfg, L, model.params)
    _dump_json(out / "summary.json", {
        "variant": model.cfg.variant,
        "seq_len": L,
        "k": s["k"],
        "r_at_k": r_plain,
        "fps": s["fps"],
        "r_at_k_at_fps": r_on,
        "ot_pct": ot,
        "gflops": report.gflops,
        "peak_activations": report.peak_activations,
        "latency_ms": float(np.mean(lat) * 1000.0),
    })


def cmd_flops(cfg: RunConfig, out: Path, args):
    model = _model(cfg, args)
    report = resource_report(model.cfg, cfg["eval"]["seq_len"], model.params)
    write_resources_csv(out / "resources.csv", report)


def cmd_ablate(cfg: RunConfig, out: Path, args):
    """Each variant trained at the train seq_len, evaluated at every ablate seq_len."""
    data = _dataset(cfg, args)
    rows = []
    for variant in cfg["ablate"]["variants"]:
        model = build_model(cfg.model_config(variant=variant), cfg.seed)
        _fit(model, data, cfg)
        for L in cfg["ablate"]["seq_lens"]:
            r = _recalls(model, data, cfg, L)
            report = resource_report(model.cfg, L, model.params)
            rows.append((variant, L, *[r[k] for k in cfg["eval"]["ks"]], report.gflops,
                         report.total_params, report.peak_activations))
    header = ["variant", "seq_len", *[f"r_at_{k}" for k in cfg["eval"]["ks"]], "gflops",
              "params", "peak_activations"]
    write_csv(out / "ablate.csv", header, rows)


def cmd_grad_check(cfg: RunConfig, out: Path, args):
    from .diagnostics import pipeline_grad_check

    g = cfg["gradcheck"]
    report = pipeline_grad_check(cfg.seed, g["eps"], use_encoder=g["use_encoder"],
                                 variant=cfg["model"]["variant"], dim=g["dim"],
                                 clusters=g["clusters"])
    write_csv(out / "gradcheck.csv", ["param", "max_rel_err"], list(report.items()))
    worst = max(report.values())
    log.info("max relative error %.3e over %d tensors", worst, len(report))
    if worst >= g["tolerance"]:
        raise NumericError(f"gradient check failed: max relative error {worst:.3e}")


HANDLERS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "stream": cmd_stream,
    "ablate": cmd_ablate,
    "flops": cmd_flops,
    "gen-data": cmd_gen_data,
    "grad-check": cmd_grad_check,
}


def _single_thread():
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return None
    return threadpool_limits(1)


def main(argv=None) -> int:
    args, extra = _parser().parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    limiter = _single_thread()
    t0 = time.perf_counter()
    try:
        cfg, out = _setup(args, extra)
        HANDLERS[args.command](cfg, out, args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return 3
    except (InputError, DimensionError, OSError) as e:
        print(f"input error: {e}", file=sys.stderr)
        return 2
    finally:
        if limiter is not None:
            limiter.unregister()
    log.info("%s finished in %.1f s", args.command, time.perf_counter() - t0)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
