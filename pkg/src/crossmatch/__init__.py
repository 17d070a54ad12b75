"""Semi-supervised segmentation with cross-stream self-distillation (CrossMatch)."""

from .errors import ConfigError, CrossMatchError, DataError, InternalError, NumericError

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "CrossMatchError",
    "DataError",
    "InternalError",
    "NumericError",
    "__version__",
]
