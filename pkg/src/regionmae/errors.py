"""Exception types shared across the pipeline."""


class FormatError(ValueError):
    """A file does not conform to the expected on-disk format."""


class UnsupportedDatatypeError(FormatError):
    """The file is well-formed but uses a datatype we do not handle."""


class TruncatedFileError(OSError):
    """The payload ends before the header-declared extent."""


class GeometryError(ValueError):
    """Shapes, affines, or grids are inconsistent or singular."""


class ValidationError(ValueError):
    """An argument violates an operation's contract."""


class ConfigurationError(ValueError):
    """A run configuration is incomplete or self-contradictory."""


class DegenerateDataError(ValueError):
    """Input data admits no meaningful answer (constant volume, empty mask, ...)."""


class MetricError(ValueError):
    """A metric is undefined for the given inputs."""


class TrainingError(RuntimeError):
    """Training aborted (non-finite loss or gradient)."""


class AttributionError(RuntimeError):
    """Attribution produced non-finite values."""


class CheckpointError(RuntimeError):
    """A checkpoint cannot be loaded against the current configuration."""
