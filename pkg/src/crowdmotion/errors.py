"""Exception hierarchy shared across the package."""


class CrowdMotionError(Exception):
    """Base class for all library errors."""


class ShapeError(CrowdMotionError):
    """Tensor dimensions are inconsistent with the requested operation."""


class ConfigError(CrowdMotionError):
    """A configuration value is invalid or inconsistent."""


class DataError(CrowdMotionError):
    """Input data (scene files, corpora, poses) is malformed or invalid."""


class SceneFormatError(DataError):
    """A scene file failed to parse; the message carries the file position."""


class TrainingError(CrowdMotionError):
    """Training hit a numerically invalid state (NaN loss or gradient)."""


class RecordsUnavailableError(CrowdMotionError):
    """Attention records were requested but are not attached to the input."""
