"""Exception hierarchy shared by every okaf module."""


class OkafError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(OkafError, ValueError):
    """Input failed a declared precondition (maps to CLI exit code 2)."""


class ShapeError(ValidationError):
    pass


class ParameterError(ValidationError):
    pass


class ContractError(ValidationError):
    pass


class RoutingError(ValidationError):
    pass


class ScoringError(OkafError):
    def __init__(self, sample_id, message):
        super().__init__(f"scoring failed for sample {sample_id!r}: {message}")
        self.sample_id = sample_id


class NumericError(OkafError, ArithmeticError):
    """Non-finite value encountered (maps to CLI exit code 3)."""

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step
