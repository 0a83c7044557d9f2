"""Exception hierarchy.

Every error carries a ``category`` used by the command line to pick an exit
code: ``config``, ``data``, ``numeric`` or ``io``.
"""


class DiffLossLabError(Exception):
    category = "config"


class ConfigError(DiffLossLabError, ValueError):
    """Invalid configuration value or combination of values."""

    category = "config"


class ArgumentError(DiffLossLabError, ValueError):
    """Invalid argument passed to a library operation (shape, range, type)."""

    category = "data"


class DataError(DiffLossLabError, ValueError):
    """Missing or malformed data on disk."""

    category = "data"


class NumericError(DiffLossLabError, FloatingPointError):
    """Non-finite loss or diverging optimisation."""

    category = "numeric"


class ProbeGateError(DiffLossLabError, RuntimeError):
    """The probe classifier is not accurate enough to be used for evaluation."""

    category = "data"


class CheckpointError(DiffLossLabError, IOError):
    category = "io"


class CheckpointCorruptError(CheckpointError):
    """Checkpoint files are missing, unreadable or fail their checksum."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint was written with an unsupported format version."""


class CheckpointConfigMismatchError(CheckpointError):
    """Checkpoint manifest does not match the expected configuration or kind."""


class CheckpointShapeError(CheckpointError):
    """Stored parameter shapes do not match the model built from the manifest."""


class RunLockedError(DiffLossLabError, RuntimeError):
    """Another process holds the run directory lock."""

    category = "io"
