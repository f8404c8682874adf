"""Exception types shared across the toolkit."""


class DomainError(ValueError):
    """An input violates an operation's stated precondition."""


class DegeneracyError(DomainError):
    """Geometric configuration is rank-deficient (collinear points, etc.)."""


class CapacityError(RuntimeError):
    """A configured resource budget was exceeded (grid size, placement retries)."""


class FitDivergenceError(RuntimeError):
    """Gradient descent produced a non-finite loss; carries the trace so far."""

    def __init__(self, message: str, trace: list[float]):
        super().__init__(message)
        self.trace = trace
