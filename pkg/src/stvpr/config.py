"""Run configuration: TOML file + dotted command-line overrides.

Grammar: a TOML document whose top-level tables are the sections below,
plus top-level ``seed`` and ``out``. Every key must already exist in
``DEFAULTS``; anything else is a config error naming the offending key.
Overrides use the same dotted paths, e.g. ``--model.variant dte_only``;
values are parsed as TOML literals and fall back to bare strings.
"""

from __future__ import annotations

import copy
import json
import sys

from .dataset import DataConfig
from .errors import ConfigError
from .model import ModelConfig
from .training import TripletConfig

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

DEFAULTS = {
    "seed": 0,
    "out": "out",
    "dataset": DataConfig().to_dict(),
    "encoder": {"enabled": False, "patch_size": 8, "image_size": [32, 32]},
    "attn": {"heads": 2, "points": 2, "levels": 1, "dropout": 0.1},
    "model": {"dim": 32, "variant": "recurrent_dte", "grid": [4, 4], "ffn_mult": 4,
              "dtype": "float32"},
    "vlad": {"clusters": 8, "alpha": 1.0},
    "gem": {"p_init": 3.0},
    "pca": {"dim": 0},
    "train": {k: v for k, v in TripletConfig().__dict__.items()},
    "eval": {"ks": [1, 5, 10], "seq_len": 5, "split": "test"},
    "stream": {"fps_min": 20, "fps_max": 60, "fps_step": 1, "fps": 36.0, "k": 5,
               "latency_ms": -1.0, "device_gflops": 0.1, "queued": False},
    "ablate": {"variants": ["recurrent_dte", "dte_only", "recurrent_te", "dte_tt"],
               "seq_lens": [1, 3, 5]},
    "gradcheck": {"tolerance": 1e-4, "eps": 1e-5, "dim": 8, "clusters": 4, "use_encoder": True},
}


def parse_value(text: str):
    """A TOML literal (``3``, ``1e-3``, ``true``, ``[1, 3]``) or a bare string."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def _coerce(path, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path} expects true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path} expects an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path} expects a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path} expects a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{path} expects a list, got {value!r}")
        return value
    raise ConfigError(f"cannot set {path}")


def _merge(base: dict, update: dict, prefix=""):
    for key, value in update.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key: {path}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{path} is a section, not a value")
            _merge(base[key], value, path + ".")
        else:
            base[key] = _coerce(path, value, base[key])


class RunConfig:
    """Nested settings for one command invocation."""

    def __init__(self, data: dict | None = None):
        self.data = copy.deepcopy(DEFAULTS)
        if data:
            _merge(self.data, data)
        self.validate()

    @classmethod
    def load(cls, path=None, overrides=None) -> "RunConfig":
        data = {}
        if path is not None:
            try:
                with open(path, "rb") as fh:
                    data = tomllib.load(fh)
            except tomllib.TOMLDecodeError as e:
                raise ConfigError(f"cannot parse {path}: {e}") from None
            except OSError as e:
                raise ConfigError(f"cannot read config {path}: {e}") from None
        cfg = copy.deepcopy(DEFAULTS)
        _merge(cfg, data)
        for dotted, value in (overrides or {}).items():
            set_path(cfg, dotted, value)
        return cls(cfg)

    def __getitem__(self, section):
        return self.data[section]

    @property
    def seed(self) -> int:
        return self.data["seed"]

    def validate(self):
        self.model_config()
        self.data_config()
        self.triplet_config()
        if self.data["pca"]["dim"] < 0:
            raise ConfigError("pca.dim must be >= 0 (0 disables PCA)")
        if any(k < 1 for k in self.data["eval"]["ks"]):
            raise ConfigError("eval.ks entries must be >= 1")

    def model_config(self, **changes) -> ModelConfig:
        m, a, e = self.data["model"], self.data["attn"], self.data["encoder"]
        kw = dict(dim=m["dim"], variant=m["variant"], grid=m["grid"], ffn_mult=m["ffn_mult"],
                  dtype=m["dtype"], heads=a["heads"], points=a["points"], levels=a["levels"],
                  dropout=a["dropout"], clusters=self.data["vlad"]["clusters"],
                  vlad_alpha=self.data["vlad"]["alpha"], gem_p_init=self.data["gem"]["p_init"],
                  use_encoder=e["enabled"], patch_size=e["patch_size"], image_size=e["image_size"])
        kw.update(changes)
        return ModelConfig(**kw)

    def data_config(self) -> DataConfig:
        d = dict(self.data["dataset"])
        m, e = self.data["model"], self.data["encoder"]
        if d["dim"] != m["dim"] or list(d["grid"]) != list(m["grid"]):
            raise ConfigError("dataset.dim/grid must match model.dim/grid")
        if e["enabled"] != d["images"]:
            raise ConfigError("encoder.enabled and dataset.images must agree")
        if e["enabled"] and list(e["image_size"]) != list(d["image_size"]):
            raise ConfigError("encoder.image_size must match dataset.image_size")
        return DataConfig.from_dict(d)

    def triplet_config(self) -> TripletConfig:
        return TripletConfig.from_dict(self.data["train"])

    def echo(self, version: str) -> str:
        """Exact JSON echo of the settings, written into every output directory."""
        return json.dumps({"version": version, "config": self.data}, indent=2, sort_keys=True) + "\n"


def set_path(cfg: dict, dotted: str, value):
    parts = dotted.split(".")
    node = cfg
    for i, part in enumerate(parts[:-1]):
        if part not in node or not isinstance(node[part], dict):
            raise ConfigError(f"unknown config key: {'.'.join(parts[:i + 1])}")
        node = node[part]
    key = parts[-1]
    if key not in node or isinstance(node[key], dict):
        raise ConfigError(f"unknown config key: {dotted}")
    node[key] = _coerce(dotted, value, node[key])
