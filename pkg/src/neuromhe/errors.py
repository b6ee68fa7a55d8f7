"""Exception types shared across the package."""


class DomainError(ValueError):
    """Input outside the domain of a model function (non-finite, wrong shape)."""


class ConfigError(ValueError):
    """Invalid weighting vector, solver option or run configuration."""


class NumericalError(ArithmeticError):
    """NaN/Inf produced inside a linear-algebra step."""


class NonConvergenceError(RuntimeError):
    """Inner MHE solver hit its iteration cap.

    The best iterate found so far is attached as ``solution`` so that a
    closed-loop caller can keep going.
    """

    def __init__(self, message, solution=None):
        super().__init__(message)
        self.solution = solution


class GradientFailure(ArithmeticError):
    """The sensitivity recursion met a singular matrix.

    ``index`` is the horizon index (0 = oldest sample) where it happened.
    """

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class ParseError(ValueError):
    """Malformed data file; ``row``/``column`` locate the offending cell."""

    def __init__(self, message, row=None, column=None):
        loc = []
        if row is not None:
            loc.append(f"row {row}")
        if column is not None:
            loc.append(f"column {column!r}")
        if loc:
            message = f"{message} ({', '.join(loc)})"
        super().__init__(message)
        self.row = row
        self.column = column
