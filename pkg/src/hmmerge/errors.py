"""Exception types raised by the library."""


class HmmError(Exception):
    """Base class for all library errors."""


class ParameterError(HmmError):
    """Invalid distribution parameters (e.g. a non positive-definite covariance)."""


class DegenerateWeightsError(HmmError):
    """A weighted estimate was requested with zero total weight."""


class EmptyStateError(HmmError):
    """A hidden state lost essentially all posterior mass during an M-step."""

    def __init__(self, state: int, mass: float):
        super().__init__(f"state {state} has vanishing posterior mass ({mass:.3e})")
        self.state = state
        self.mass = mass


class ChainStructureError(HmmError):
    """The transition matrix does not describe an irreducible aperiodic chain."""


class ParseError(HmmError):
    """A data file could not be parsed."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
