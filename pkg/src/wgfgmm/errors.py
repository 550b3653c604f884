"""Exception hierarchy shared by all modules."""


class WgfError(Exception):
    """Base class for errors raised by this package."""


class InputError(WgfError, ValueError):
    """Malformed or inconsistent user input."""


class DimensionError(InputError):
    """Array shapes do not agree."""


class NumericError(WgfError, ArithmeticError):
    """A numerical routine produced an unusable result."""


class NotPositiveDefiniteError(NumericError):
    """A matrix expected to be SPD failed its Cholesky factorization."""


class StepTooLargeError(NumericError):
    """A retraction left the SPD cone; the caller should shrink the step."""


class GradientUnreliableError(NumericError):
    """Transport duals from an unconverged Sinkhorn run were requested."""


class EnvContractError(WgfError, RuntimeError):
    """An environment was stepped after it terminated."""
