"""Exception types shared across the package.

Each CLI exit code maps onto one branch of this hierarchy: ConfigError -> 2,
NumericError -> 3, everything else I/O-flavoured -> 1 (sweep cell failures are
reported separately with exit 4).
"""


class SprcError(Exception):
    """Base class for all package errors."""


class ManifestError(SprcError):
    """A triplet manifest line is malformed; message carries the line number."""


class VocabularyError(SprcError):
    """A token or token id is outside the vocabulary."""


class ReferentialError(SprcError):
    """A manifest references an image id that is not in the corpus."""


class CacheFormatError(SprcError):
    """An embedding-cache file has a bad magic string or truncated payload."""


class ConfigError(SprcError):
    """A configuration value or key is invalid."""


class NumericError(SprcError):
    """A loss or objective became non-finite; aborts the run."""


class LengthError(SprcError):
    """An encoded sequence exceeds the model's maximum length."""


class StructuralError(SprcError):
    """Tensor shapes or table columns do not line up."""


class CheckpointError(SprcError):
    """A checkpoint archive is unreadable or has an unsupported version."""
