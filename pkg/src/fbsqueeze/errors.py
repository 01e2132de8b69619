"""Exception and warning types shared across the package."""


class InvariantViolation(RuntimeError):
    """A state produced by an integrator is not a valid density matrix."""

    def __init__(self, message: str, time: float | None = None):
        if time is not None:
            message = f"{message} (t = {time:.6g})"
        super().__init__(message)
        self.time = time


class TruncationError(RuntimeError):
    """Population in the top Fock levels exceeds the hard limit."""


class TruncationWarning(UserWarning):
    """Population in the top Fock levels exceeds the soft limit."""


class NoSteadyStateError(ValueError):
    """The requested model has no steady state."""
