"""Exception hierarchy shared by every module of the package."""


class FCDDError(Exception):
    """Base class for all package errors."""


class InvalidInputError(FCDDError, ValueError):
    pass


class InvalidParameterError(FCDDError, ValueError):
    pass


class UnsupportedBackboneError(FCDDError, KeyError):
    def __str__(self):
        # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class UnsupportedGeometryError(FCDDError, ValueError):
    pass


class WeightLoadError(FCDDError):
    pass


class LayoutError(FCDDError):
    """Dataset root does not follow the normal/ + anomalous/ layout."""


class ImageLoadError(FCDDError, OSError):
    pass


class FileWriteError(FCDDError, OSError):
    pass


class ConfigError(FCDDError, ValueError):
    pass


class TrainingDivergedError(FCDDError, FloatingPointError):
    pass


class CheckpointFormatError(FCDDError):
    pass


class VersionMismatchError(CheckpointFormatError):
    pass


class UndefinedMetricError(FCDDError, ValueError):
    """Raised when a metric needs both classes but only one is present."""
