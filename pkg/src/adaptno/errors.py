"""Exception hierarchy shared by every module."""


class AdaptNOError(Exception):
    """Base class for all package errors."""


class ContractError(AdaptNOError, ValueError):
    """An argument violates a documented precondition (shape, sign, domain)."""


class ConfigError(AdaptNOError):
    """Experiment configuration is missing, malformed or inconsistent."""


class NumericalError(AdaptNOError):
    """Base for failures of a numerical procedure."""


class StabilityError(NumericalError):
    """Time step violates the CFL limit of the explicit scheme."""


class DivergenceError(NumericalError):
    """A state or iterate became non-finite."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class IterationError(NumericalError):
    """Fixed-point iteration did not reach tolerance."""

    def __init__(self, message, residual):
        super().__init__(message)
        self.residual = residual


class TrainingDivergenceError(NumericalError):
    """Training loss became NaN or infinite."""

    def __init__(self, message, epoch):
        super().__init__(message)
        self.epoch = epoch


class FormatError(AdaptNOError):
    """A binary container is corrupt, truncated or of the wrong kind."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
