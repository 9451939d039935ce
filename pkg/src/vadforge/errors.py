"""Exception types shared across the package."""


class VadForgeError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(VadForgeError):
    """Tensor/array shapes are incompatible for the requested operation."""


class ParameterError(VadForgeError):
    """An operation parameter is outside its legal range."""


class InputError(VadForgeError):
    """Runtime input data is unusable (too short, zero energy, degenerate)."""


class ConfigError(VadForgeError):
    """A configuration value violates its contract."""


class UsageError(VadForgeError):
    """The API was called in an unsupported way."""


class MetricError(VadForgeError):
    """A metric is undefined for the given inputs (e.g. single-class labels)."""


class NumericError(VadForgeError):
    """Training aborted on a non-finite value; carries a diagnostic payload."""

    def __init__(self, message: str, batch_id: str | None = None):
        super().__init__(message)
        self.batch_id = batch_id


class CheckpointError(VadForgeError):
    """Base class for checkpoint load failures."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint magic or format version does not match."""


class CheckpointTruncatedError(CheckpointError):
    """Checkpoint file ended before all declared content was read."""


class CheckpointChecksumError(CheckpointError):
    """A CRC32 check failed; the file is corrupt."""
