"""Exception types shared across the lab."""


class LabError(Exception):
    """Base class for every error the lab raises on purpose."""


class ConfigError(LabError, ValueError):
    """Invalid experiment configuration; the message names the field."""

    def __init__(self, message, fields=None):
        super().__init__(message)
        self.fields = list(fields or [])


class DivergenceError(LabError, RuntimeError):
    """A loss or parameter went non-finite during training."""

    def __init__(self, message, op=None, iteration=None, history=None):
        super().__init__(message)
        self.op = op
        self.iteration = iteration
        self.history = list(history or [])


class ShapeError(LabError, ValueError):
    """Operands of a tensor op have incompatible shapes."""


class IllegalMoveError(LabError, ValueError):
    """An action does not name STOP or a neighbor of the current viewpoint."""


class GenerationError(LabError, ValueError):
    """A scene or tour cannot be generated from the given parameters."""


class UnknownViewpointError(LabError, KeyError):
    """A viewpoint is not part of the graph it was looked up in."""


class SnapshotError(LabError, ValueError):
    """A binary snapshot has the wrong version or a corrupt payload."""
