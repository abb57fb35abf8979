"""Exception hierarchy shared by all modules."""


class QuenchedError(Exception):
    """Base class for errors raised by this package."""


class InvalidInputError(QuenchedError, ValueError):
    pass


class CapacityError(QuenchedError):
    """Problem size exceeds the cap of an exact solver."""


class NumericError(QuenchedError, ArithmeticError):
    pass


class NumericBlowupError(NumericError):
    """A simulated state became non-finite."""

    def __init__(self, message: str, step: int):
        super().__init__(f"{message} (step {step})")
        self.step = step


class BracketError(QuenchedError, ValueError):
    """The lower end of a bisection bracket is already feasible."""


class ConfigError(InvalidInputError):
    def __init__(self, message: str, field: str = ""):
        super().__init__(f"{field}: {message}" if field else message)
        self.field = field
