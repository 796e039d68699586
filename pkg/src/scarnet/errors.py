class ScarError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 2


class ConfigError(ScarError):
    exit_code = 1


class DataError(ScarError):
    exit_code = 2


class AnnotationError(DataError):
    """A head point falls outside its image."""

    def __init__(self, message, point_index=None):
        super().__init__(message)
        self.point_index = point_index


class CheckpointError(ScarError):
    exit_code = 2


class ShapeError(ScarError, ValueError):
    exit_code = 2


class NumericalError(ScarError):
    exit_code = 3
