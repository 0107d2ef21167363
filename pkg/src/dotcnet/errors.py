class DotcError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(DotcError, ValueError):
    pass


class ConfigError(DotcError, ValueError):
    pass


class CheckpointError(DotcError):
    pass


class ProtocolError(DotcError, ValueError):
    pass


class TrainingDiverged(DotcError, RuntimeError):
    """Raised when a training step produces a non-finite loss or gradient.

    ``last_good_state`` holds a copy of the parameters from before the
    failing step so callers can still write a checkpoint.
    """

    def __init__(self, message, last_good_state=None):
        super().__init__(message)
        self.last_good_state = last_good_state
