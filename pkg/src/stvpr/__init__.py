"""Sequential visual place recognition with a recurrent deformable transformer encoder."""

__version__ = "0.1.0"

from .errors import ConfigError, DimensionError, InputError, NumericError  # noqa: E402
from .model import Model, ModelConfig, StreamingEncoder, build_model  # noqa: E402

__all__ = [
    "ConfigError",
    "DimensionError",
    "InputError",
    "Model",
    "ModelConfig",
    "NumericError",
    "StreamingEncoder",
    "__version__",
    "build_model",
]
