"""Continuous dual-quadrature measurement with Markovian feedback on a truncated oscillator."""

__version__ = "0.1.0"

from .errors import InvariantViolation, NoSteadyStateError, TruncationError, TruncationWarning
from .master_eq import FeedbackParams, Variant, evolve, k_coefficients, rhs, steady_state
from .states import ObservableReport, coherent_state, fock_state, report, thermal_state

__all__ = [
    "FeedbackParams",
    "InvariantViolation",
    "NoSteadyStateError",
    "ObservableReport",
    "TruncationError",
    "TruncationWarning",
    "Variant",
    "coherent_state",
    "evolve",
    "fock_state",
    "k_coefficients",
    "report",
    "rhs",
    "steady_state",
    "thermal_state",
]
