"""Synthetic sequential place-recognition data.

Places lie on a smoothed random-walk trajectory with a fixed step. Every
place owns a grid of latent codes (one per token). A frame is the latent
grid after a condition transform, pushed through a shared linear renderer,
plus per-frame noise. Condition ``A`` (database) is the identity; condition
``B`` (queries) rotates the "appearance" latent channels, rescales and
shifts them, leaving the "content" channels intact, so matching across
conditions requires learning to ignore appearance.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, InputError
from .numerics import rng, tsr

CONDITIONS = ("A", "B")
SPLITS = ("train", "val", "test")


@dataclass
class GroundTruth:
    mode: str = "frame"  # "radius" or "frame"
    positive_radius: float = 10.0
    frame_tolerance: int = 1

    def __post_init__(self):
        if self.mode not in ("radius", "frame"):
            raise ConfigError(f"ground-truth mode {self.mode!r}; expected radius or frame")


@dataclass
class DataConfig:
    n_places: int = 50
    train_places: int = 200  # size of the train split; 0 = n_places
    seq_len: int = 5
    noise: float = 0.3
    separation: float = 2.0
    latent_dim: int = 16
    content_dim: int = 14
    appearance_gain: float = 1.0
    appearance_bias: float = 2.5
    identity_conditions: bool = False
    dim: int = 32
    grid: tuple = (4, 4)
    images: bool = False
    image_size: tuple = (32, 32)
    gt_mode: str = "frame"
    positive_radius: float = 10.0
    frame_tolerance: int = 1

    def __post_init__(self):
        self.grid = tuple(self.grid)
        self.image_size = tuple(self.image_size)
        if self.n_places < self.seq_len:
            raise ConfigError(f"dataset.n_places={self.n_places} < seq_len={self.seq_len}")
        if self.train_places and self.train_places < self.seq_len:
            raise ConfigError(f"dataset.train_places={self.train_places} < seq_len={self.seq_len}")
        if self.train_places < 0:
            raise ConfigError("dataset.train_places must be >= 0")
        if self.seq_len < 1:
            raise ConfigError("dataset.seq_len must be >= 1")
        if not 0 <= self.content_dim <= self.latent_dim:
            raise ConfigError("dataset.content_dim must lie in [0, latent_dim]")
        if self.noise < 0:
            raise ConfigError("dataset.noise must be nonnegative")
        GroundTruth(self.gt_mode)

    @property
    def ground_truth(self) -> GroundTruth:
        return GroundTruth(self.gt_mode, self.positive_radius, self.frame_tolerance)

    def to_dict(self):
        d = asdict(self)
        d["grid"] = list(self.grid)
        d["image_size"] = list(self.image_size)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown dataset config key(s): {sorted(unknown)}")
        return cls(**d)


@dataclass
class Place:
    id: int
    position: tuple
    latent: np.ndarray  # [n, latent_dim]


@dataclass
class SequenceSample:
    frames: np.ndarray  # [L, n, D] features or [L, H, W, 3] images
    place_ids: list
    condition: str
    anchor_position: tuple

    @property
    def anchor_id(self) -> int:
        return self.place_ids[-1]


@dataclass
class Split:
    """One split: per-place positions and one rendered frame per condition."""

    positions: np.ndarray  # [N, 2]
    frames: dict = field(default_factory=dict)  # condition -> [N, ...]

    @property
    def n_places(self) -> int:
        return len(self.positions)

    def anchors(self, L: int) -> np.ndarray:
        if L > self.n_places:
            raise ConfigError(f"seq_len {L} exceeds {self.n_places} places")
        return np.arange(L - 1, self.n_places)

    def windows(self, condition: str, L: int, anchors=None) -> np.ndarray:
        """Stacked sequences ``[S, L, ...]`` ending at each anchor place."""
        anchors = self.anchors(L) if anchors is None else np.asarray(anchors)
        idx = anchors[:, None] + np.arange(-L + 1, 1)[None, :]
        return self.frames[condition][idx]

    def samples(self, condition: str, L: int) -> list[SequenceSample]:
        out = []
        for a in self.anchors(L):
            ids = list(range(a - L + 1, a + 1))
            out.append(SequenceSample(self.frames[condition][ids], ids, condition,
                                      tuple(self.positions[a])))
        return out


@dataclass
class Dataset:
    config: DataConfig
    seed: int
    splits: dict  # name -> Split

    def database(self, split="test", L=None):
        return self.splits[split].samples("A", L or self.config.seq_len)

    def queries(self, split="test", L=None):
        return self.splits[split].samples("B", L or self.config.seq_len)


# -- generation -----------------------------------------------------------
def trajectory(n: int, step: float, r: np.random.Generator, turn_sigma=0.35, smooth=5) -> np.ndarray:
    """Smoothed random walk with constant step length, starting at the origin."""
    turns = r.normal(0.0, turn_sigma, size=n + smooth)
    kernel = np.ones(smooth) / smooth
    heading = np.cumsum(np.convolve(turns, kernel, mode="valid")[:n])
    steps = step * np.stack([np.cos(heading), np.sin(heading)], axis=-1)
    steps[0] = 0.0
    return np.cumsum(steps, axis=0)


def _random_rotation(k: int, r: np.random.Generator) -> np.ndarray:
    if k == 0:
        return np.zeros((0, 0))
    q, rr = np.linalg.qr(r.normal(size=(k, k)))
    return q * np.sign(np.diag(rr))[None, :]


@dataclass
class Renderer:
    """Fixed pieces shared by every split of one dataset seed."""

    project: np.ndarray  # [latent_dim, D]
    rotation: np.ndarray  # [latent_dim, latent_dim] for condition B
    gain: np.ndarray  # [latent_dim]
    bias: np.ndarray  # [latent_dim]
    to_rgb: np.ndarray  # [D, 3]

    @classmethod
    def build(cls, cfg: DataConfig, seed: int) -> "Renderer":
        r = rng.stream(seed, "data.renderer")
        d, c = cfg.latent_dim, cfg.content_dim
        project = r.normal(0.0, 1.0 / np.sqrt(d), size=(d, cfg.dim))
        rot = np.eye(d)
        gain = np.ones(d)
        bias = np.zeros(d)
        if not cfg.identity_conditions:
            rc = rng.stream(seed, "data.condition")
            rot[c:, c:] = _random_rotation(d - c, rc)
            gain[c:] = cfg.appearance_gain
            # random direction, fixed length: per-channel RMS equals appearance_bias
            u = rc.normal(size=d - c)
            bias[c:] = cfg.appearance_bias * np.sqrt(d - c) * u / np.linalg.norm(u)
        to_rgb = rng.stream(seed, "data.rgb").normal(0.0, 1.0 / np.sqrt(cfg.dim), size=(cfg.dim, 3))
        return cls(project, rot, gain, bias, to_rgb)

    def condition(self, latents: np.ndarray, cond: str) -> np.ndarray:
        if cond == "A":
            return latents
        return (latents @ self.rotation) * self.gain + self.bias

    def features(self, latents: np.ndarray, cond: str) -> np.ndarray:
        return self.condition(latents, cond) @ self.project


def _images(features: np.ndarray, cfg: DataConfig, renderer: Renderer, r) -> np.ndarray:
    """Paint each token's color over its patch, then add pixel noise."""
    N = features.shape[0]
    hg, wg = cfg.grid
    H, W = cfg.image_size
    ph, pw = H // hg, W // wg
    colors = 1.0 / (1.0 + np.exp(-(features @ renderer.to_rgb)))  # [N, n, 3]
    img = colors.reshape(N, hg, 1, wg, 1, 3)
    img = np.broadcast_to(img, (N, hg, ph, wg, pw, 3)).reshape(N, H, W, 3)
    img = img + r.normal(0.0, 0.02, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _make_split(cfg: DataConfig, seed: int, name: str, renderer: Renderer, noise: float) -> Split:
    n_tok = cfg.grid[0] * cfg.grid[1]
    n_places = cfg.train_places if name == "train" and cfg.train_places else cfg.n_places
    positions = trajectory(n_places, cfg.separation, rng.stream(seed, f"data.{name}.trajectory"))
    latents = rng.stream(seed, f"data.{name}.latent").normal(size=(n_places, n_tok, cfg.latent_dim))
    split = Split(positions=positions.astype(np.float32))
    for cond in CONDITIONS:
        feats = renderer.features(latents, cond)
        feats = feats + rng.stream(seed, f"data.{name}.noise.{cond}").normal(0.0, noise, feats.shape)
        if cfg.images:
            feats = _images(feats, cfg, renderer, rng.stream(seed, f"data.{name}.pixels.{cond}"))
        # stored at container precision so saved and in-memory data agree bit for bit
        split.frames[cond] = feats.astype(np.float32)
    return split


def make_dataset(cfg: DataConfig, seed: int, splits=SPLITS) -> Dataset:
    renderer = Renderer.build(cfg, seed)
    return Dataset(cfg, seed, {s: _make_split(cfg, seed, s, renderer, cfg.noise) for s in splits})


def generate(seed: int, n_places: int, conditions="default", noise=0.3, L=5, **overrides):
    """Database (condition A) and query (condition B) sequences for one split.

    ``conditions="identity"`` makes both conditions render identically.
    """
    if n_places < L:
        raise ConfigError(f"n_places={n_places} < L={L}")
    cfg = DataConfig(n_places=n_places, seq_len=L, noise=noise,
                     identity_conditions=(conditions == "identity"), **overrides)
    data = make_dataset(cfg, seed, splits=("test",))
    return data.database("test"), data.queries("test")


# -- ground truth ---------------------------------------------------------
def positive_mask(query_anchor, db_anchor, gt: GroundTruth, query_pos=None, db_pos=None) -> np.ndarray:
    """Boolean ``[Q, N]`` matrix: database item ``j`` is a positive of query ``i``."""
    if len(db_anchor) == 0:
        raise InputError("empty database")
    if gt.mode == "radius":
        q = np.asarray(query_pos, dtype=np.float64)[:, None, :]
        d = np.asarray(db_pos, dtype=np.float64)[None, :, :]
        return np.sqrt(np.sum((q - d) ** 2, axis=-1)) <= gt.positive_radius
    qa = np.asarray(query_anchor)[:, None]
    da = np.asarray(db_anchor)[None, :]
    return np.abs(qa - da) <= gt.frame_tolerance


def positives_for(query: SequenceSample, database: list, gt: GroundTruth) -> set:
    if not database:
        raise InputError("empty database")
    mask = positive_mask([query.anchor_id], [s.anchor_id for s in database], gt,
                         [query.anchor_position], [s.anchor_position for s in database])
    return set(np.flatnonzero(mask[0]).tolist())


# -- persistence ----------------------------------------------------------
def save_dataset(data: Dataset, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, split in data.splits.items():
        d = out / name
        d.mkdir(exist_ok=True)
        with open(d / "positions.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "x", "y", "condition"])
            for cond in CONDITIONS:
                for i, (x, y) in enumerate(split.positions):
                    w.writerow([i, repr(float(x)), repr(float(y)), cond])
        for cond, frames in split.frames.items():
            tsr.save(d / f"features_{cond}.tsr", frames)
    manifest = {"seed": data.seed, "config": data.config.to_dict(), "splits": list(data.splits)}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_dataset(path) -> Dataset:
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text())
    cfg = DataConfig.from_dict(manifest["config"])
    splits = {}
    for name in manifest["splits"]:
        d = root / name
        with open(d / "positions.csv", newline="") as fh:
            rows = [r for r in csv.DictReader(fh) if r["condition"] == "A"]
        rows.sort(key=lambda r: int(r["id"]))
        positions = np.array([[float(r["x"]), float(r["y"])] for r in rows], dtype=np.float32)
        split = Split(positions=positions)
        for cond in CONDITIONS:
            split.frames[cond] = tsr.load(d / f"features_{cond}.tsr")
        splits[name] = split
    return Dataset(cfg, int(manifest.get("seed", 0)), splits)
