"""Full pipeline: optional tokenizer -> temporal fusion -> GeM -> VLAD."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .aggregation import aggregate_batch, init_gem, init_vlad, reset_vlad_centers
from .deform_attn import DeformAttnConfig
from .encoder import encode_frames, init_encoder, token_grid
from .errors import ConfigError, DimensionError
from .numerics import ParameterRegistry, Tensor, no_grad, rng
from .recurrent import (
    RecurrentState,
    check_variant,
    init_temporal,
    streaming_forward,
    variant_forward,
)


@dataclass
class ModelConfig:
    dim: int = 32
    heads: int = 2
    points: int = 2
    levels: int = 1
    dropout: float = 0.1
    clusters: int = 8
    variant: str = "recurrent_dte"
    grid: tuple = (4, 4)
    ffn_mult: int = 4
    gem_p_init: float = 3.0
    vlad_alpha: float = 1.0
    use_encoder: bool = False
    patch_size: int = 8
    image_size: tuple = (32, 32)
    dtype: str = "float32"

    def __post_init__(self):
        self.grid = tuple(self.grid)
        self.image_size = tuple(self.image_size)
        check_variant(self.variant)
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"model.dtype={self.dtype!r}; expected float32 or float64")
        if self.use_encoder and token_grid(*self.image_size, self.patch_size) != self.grid:
            raise ConfigError(f"image {self.image_size} / patch {self.patch_size} "
                              f"does not give grid {self.grid}")
        self.attn_config()

    @property
    def n_tokens(self) -> int:
        return self.grid[0] * self.grid[1]

    def attn_config(self) -> DeformAttnConfig:
        return DeformAttnConfig(dim=self.dim, heads=self.heads, points=self.points,
                                levels=self.levels, dropout=self.dropout)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = list(self.grid)
        d["image_size"] = list(self.image_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config key(s): {sorted(unknown)}")
        return cls(**d)


@dataclass
class Model:
    cfg: ModelConfig
    params: ParameterRegistry
    seed: int = 0
    training: bool = False
    _dropout_rng: np.random.Generator = field(default=None, repr=False)

    def __post_init__(self):
        if self._dropout_rng is None:
            self._dropout_rng = rng.stream(self.seed, "dropout")

    @property
    def attn(self) -> DeformAttnConfig:
        return self.cfg.attn_config()

    @property
    def dtype(self):
        return self.params.dtype

    def train(self, mode=True):
        self.training = mode
        return self

    def eval(self):
        return self.train(False)

    def num_params(self, prefix=None) -> int:
        return self.params.count(prefix)

    # -- stages -------------------------------------------------------------
    def tokens(self, inputs) -> Tensor:
        """Frames ``[B, L, H, W, 3]`` or features ``[B, L, n, D]`` -> ``[B, L, n, D]``."""
        data = inputs.data if isinstance(inputs, Tensor) else np.asarray(inputs)
        if self.cfg.use_encoder:
            return encode_frames(data, self.params, self.cfg.patch_size)
        if data.ndim != 4 or data.shape[-2:] != (self.cfg.n_tokens, self.cfg.dim):
            raise DimensionError(f"expected [B, L, {self.cfg.n_tokens}, {self.cfg.dim}] "
                                 f"features, got {data.shape}")
        return inputs if isinstance(inputs, Tensor) else Tensor(data.astype(self.dtype))

    def refine(self, F: Tensor) -> list[Tensor]:
        return variant_forward(F, self.cfg.variant, self.cfg.grid, self.attn, self.params,
                               self.training, self._dropout_rng)

    def describe(self, inputs) -> Tensor:
        """Unit-norm flat descriptors ``[B, C*D]`` for a batch of sequences."""
        return aggregate_batch(self.refine(self.tokens(inputs)), self.params)

    def descriptors(self, inputs, batch_size=64) -> np.ndarray:
        """Gradient-free descriptors as float64 numpy rows."""
        inputs = np.asarray(inputs)
        rows = []
        with no_grad():
            for start in range(0, len(inputs), batch_size):
                rows.append(self.describe(inputs[start:start + batch_size]).data)
        return np.concatenate(rows, axis=0).astype(np.float64)

    def init_clusters(self, inputs, max_tokens=4096):
        """Seed VLAD centers by k-means over pooled tokens of ``inputs``."""
        from .aggregation import gem_exponent, seq_gem
        from .numerics import stack

        with no_grad():
            F_hat = stack(self.refine(self.tokens(np.asarray(inputs))), axis=1)
            pooled = seq_gem(F_hat, gem_exponent(self.params)).data
        tokens = pooled.reshape(-1, self.cfg.dim)
        if len(tokens) > max_tokens:
            pick = rng.stream(self.seed, "vlad.kmeans.sample").choice(len(tokens), max_tokens,
                                                                     replace=False)
            tokens = tokens[np.sort(pick)]
        reset_vlad_centers(self.params, tokens, rng.stream(self.seed, "vlad.kmeans"),
                           self.cfg.vlad_alpha)


def build_model(cfg: ModelConfig, seed=0, dtype=None) -> Model:
    dtype = np.dtype(dtype or cfg.dtype)
    params = ParameterRegistry(dtype)

    def stream_for(name):
        return rng.stream(seed, f"params.{name}")

    if cfg.use_encoder:
        init_encoder(params, cfg.dim, cfg.grid, stream_for("encoder"))
    init_temporal(params, cfg.variant, cfg.attn_config(), cfg.grid, stream_for, cfg.ffn_mult)
    init_gem(params, cfg.gem_p_init)
    init_vlad(params, cfg.clusters, cfg.dim, stream_for("vlad"), cfg.vlad_alpha)
    return Model(cfg, params, seed)


class StreamingEncoder:
    """Frame-at-a-time recurrent inference holding one hidden map between steps.

    ``retained_maps`` counts the n x D activation maps alive across steps
    (the hidden state plus the frame being processed); it never depends on
    how many frames have been seen.
    """

    def __init__(self, model: Model):
        if model.cfg.variant not in ("recurrent_dte", "recurrent_te"):
            raise ConfigError("streaming needs a recurrent variant")
        self.model = model
        self.state: RecurrentState | None = None
        self.retained_maps = 0
        self.peak_retained_maps = 0

    def reset(self):
        self.state = None
        self.retained_maps = 0

    def step(self, frame) -> Tensor:
        """Feed one frame ``[B, n, D]`` (features) and return its refined map."""
        m = self.model
        frame = frame if isinstance(frame, Tensor) else Tensor(np.asarray(frame, dtype=m.dtype))
        if m.cfg.use_encoder:
            frame = encode_frames(frame.data, m.params, m.cfg.patch_size)
        self.retained_maps = 1 + (self.state is not None)
        self.peak_retained_maps = max(self.peak_retained_maps, self.retained_maps)
        out, self.state = streaming_forward(frame, self.state, m.cfg.grid, m.attn, m.params,
                                            m.cfg.variant, m.training, m._dropout_rng)
        self.retained_maps = 1
        return out
