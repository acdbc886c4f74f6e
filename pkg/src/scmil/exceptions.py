"""Exception types raised across the package."""


class InvalidStateError(ValueError):
    """Cache, trace or model pieces do not belong together."""


class ConvergenceError(RuntimeError):
    """An iterative routine ran out of iterations.

    The last iterate is kept on ``last_iterate`` so callers can inspect or
    reuse it.
    """

    def __init__(self, message: str, last_iterate=None):
        super().__init__(message)
        self.last_iterate = last_iterate


class TrainingError(RuntimeError):
    def __init__(self, message: str, param: str | None = None, epoch: int | None = None):
        super().__init__(message)
        self.param = param
        self.epoch = epoch


class FormatError(ValueError):
    """Malformed input file. ``lineno`` is 1-based when known."""

    def __init__(self, message: str, lineno: int | None = None):
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)
        self.lineno = lineno


class UndefinedMetricError(ValueError):
    pass

