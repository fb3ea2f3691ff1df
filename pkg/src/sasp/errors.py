"""Exception types shared across the package."""


class SaspError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(SaspError):
    """Invalid or inconsistent configuration."""


class TapeError(SaspError):
    """Gradient-tape state error (empty tape, optimizer step before backward)."""


class DataError(SaspError):
    """Base class for dataset and file-format errors."""


class FeatureFileError(DataError):
    """Malformed feature file; the message carries the byte offset."""


class CheckpointError(DataError):
    """Malformed checkpoint file."""


class ManifestError(DataError):
    """Malformed or inconsistent dataset manifest."""


class IngestError(DataError):
    """Invalid dataset directory layout or index contents."""


class NanLossError(SaspError):
    """Training loss became non-finite.

    When raised by ``train``, the model parameters have been restored to the
    last state for which every value was finite, so the caller can still
    write a usable checkpoint. ``log`` holds the partial training log.
    """

    def __init__(self, message: str, log=None):
        super().__init__(message)
        self.log = log
