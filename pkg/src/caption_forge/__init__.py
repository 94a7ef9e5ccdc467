"""caption-forge: decode precomputed image-feature grids into sentences."""

from .errors import (
    CaptionForgeError,
    ConfigError,
    DataError,
    DimensionError,
    FormatError,
    NumericError,
    VocabularyError,
)
from .tensor import Tape, Tensor, backward, new_rng

__version__ = "0.1.0"

__all__ = [
    "CaptionForgeError",
    "ConfigError",
    "DataError",
    "DimensionError",
    "FormatError",
    "NumericError",
    "VocabularyError",
    "Tape",
    "Tensor",
    "backward",
    "new_rng",
    "__version__",
]
