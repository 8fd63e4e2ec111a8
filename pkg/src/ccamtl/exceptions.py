class CcamError(Exception):
    """Base class for errors raised by this package."""


class ShapeError(CcamError, ValueError):
    pass


class NonFiniteError(CcamError, ValueError):
    pass


class InputError(CcamError, ValueError):
    """Bad user-supplied data (labels out of range, malformed files, ...)."""


class ParameterError(CcamError, ValueError):
    pass


class NoMovableObject(CcamError):
    """The label map holds no pixel of a movable class."""


class StateError(CcamError):
    pass


class MetricError(CcamError, ValueError):
    pass


class DivergenceError(CcamError, RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at step {step}")
        self.step = step
        self.loss = loss
