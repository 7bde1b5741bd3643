"""Checkpoints: one TSR file per parameter plus a JSON manifest."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ConfigError, InputError
from .model import Model, ModelConfig, build_model
from .numerics import tsr

MANIFEST = "manifest.json"


def _file_for(path: str) -> str:
    return path.replace("/", "_") + ".tsr"


def save_checkpoint(model: Model, out_dir, extra=None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for path, t in model.params.items():
        name = _file_for(path)
        tsr.save(out / name, np.asarray(t.data, dtype=np.float32))
        entries.append({"path": path, "file": name, "shape": list(t.shape)})
    manifest = {
        "format": "stvpr-checkpoint/1",
        "seed": model.seed,
        "dtype": str(model.params.dtype),
        "config": model.cfg.to_dict(),
        "params": entries,
    }
    if extra:
        manifest["extra"] = extra
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def load_checkpoint(ckpt_dir, dtype=None) -> Model:
    root = Path(ckpt_dir)
    try:
        manifest = json.loads((root / MANIFEST).read_text())
    except FileNotFoundError:
        raise InputError(f"no checkpoint manifest in {root}") from None
    cfg = ModelConfig.from_dict(manifest["config"])
    model = build_model(cfg, manifest.get("seed", 0), dtype or manifest.get("dtype"))
    expected = set(model.params.paths())
    stored = {e["path"] for e in manifest["params"]}
    if expected != stored:
        raise ConfigError(f"checkpoint parameters differ from config: "
                          f"missing {sorted(expected - stored)}, extra {sorted(stored - expected)}")
    for e in manifest["params"]:
        value = tsr.load(root / e["file"])
        if list(value.shape) != e["shape"]:
            raise InputError(f"{e['path']}: file shape {value.shape} != manifest {e['shape']}")
        t = model.params[e["path"]]
        if value.shape != t.shape:
            raise InputError(f"{e['path']}: stored shape {value.shape} != model {t.shape}")
        t.data = value.astype(model.dtype)
    return model
