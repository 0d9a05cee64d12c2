"""Exception types shared across the package.

Each maps onto one CLI exit code (see :mod:`dmjd.cli`).
"""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """Non-finite values appeared in a forward or gradient computation."""


class TapeError(RuntimeError):
    """Backward called on a graph that was already consumed."""


class ParameterError(ValueError):
    """A rate or count is outside its valid range."""


class InfeasiblePlanError(ValueError):
    """The requested prediction rate cannot be realized with the given views."""


class PlanInconsistencyError(RuntimeError):
    """A view plan does not match the cumulative mask it is applied to."""


class ContractError(ValueError):
    """An operation was called outside its precondition."""


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class FormatError(ValueError):
    """A binary or text file does not match its declared layout."""


class ComparisonError(ValueError):
    """Two runs cannot be compared."""
