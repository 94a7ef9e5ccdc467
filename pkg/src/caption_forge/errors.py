"""Exception hierarchy shared across the toolkit.

The CLI maps these onto its stable exit codes: format/IO problems exit 2,
configuration and validation problems exit 3, numeric failures exit 4.
"""


class CaptionForgeError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(CaptionForgeError):
    """Tensor shapes incompatible with the requested operation."""


class VocabularyError(CaptionForgeError):
    """Token id outside the vocabulary, or a malformed vocabulary file."""


class ConfigError(CaptionForgeError):
    """Invalid configuration value or unknown configuration key."""


class NumericError(CaptionForgeError):
    """Non-finite value produced where finite math was required."""


class FormatError(CaptionForgeError):
    """Malformed binary or text artifact (bad magic, truncation, ...)."""


class DataError(CaptionForgeError):
    """Well-formed file carrying invalid payload values."""
