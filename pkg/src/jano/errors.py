"""Exception hierarchy shared by every module."""


class JanoError(Exception):
    """Base class for all package errors."""


class InvalidInputError(JanoError, ValueError):
    pass


class FormatError(JanoError):
    """Malformed latent file. ``offset`` is the byte position where parsing failed."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class SingularityError(JanoError, ZeroDivisionError):
    pass


class NumericError(JanoError, ArithmeticError):
    """Non-finite values appeared. ``step`` is set when raised inside an integrator."""

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class InvalidStateError(JanoError, RuntimeError):
    pass


class CorrelationUndefinedError(JanoError, ValueError):
    pass


class BudgetInfeasibleError(JanoError):
    def __init__(self, budget, min_cost):
        super().__init__(
            f"compute budget {budget:.4f} is infeasible; minimum achievable cost is {min_cost:.4f}"
        )
        self.budget = budget
        self.min_cost = min_cost


class ConfigError(JanoError, ValueError):
    pass
