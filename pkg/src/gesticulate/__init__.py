"""Desk-scale co-speech gesture pipeline: BVH I/O, RVQ motion tokenizer,
audio features, a token language model, and evaluation metrics."""

__version__ = "0.1.0"

from .exceptions import BvhParseError, ConfigError, FormatError, GesticulateError

__all__ = [
    "BvhParseError",
    "ConfigError",
    "FormatError",
    "GesticulateError",
    "__version__",
]
