"""Density matrices on the truncated Fock space and their observables."""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np

from .errors import InvariantViolation, TruncationError, TruncationWarning
from .operators import check_dim, operator_set

__all__ = [
    "HERMITIAN_ATOL",
    "ObservableReport",
    "TRACE_ATOL",
    "TRUNCATION_HARD",
    "TRUNCATION_SOFT",
    "coherent_state",
    "expectation",
    "fock_state",
    "purity",
    "report",
    "report_arrays",
    "tail_population",
    "thermal_state",
    "truncation_guard",
    "validate_density_matrix",
]

HERMITIAN_ATOL = 1e-10
TRACE_ATOL = 1e-10
POSITIVITY_ATOL = 1e-8

TRUNCATION_SOFT = 1e-6
TRUNCATION_HARD = 1e-3


def tail_population(rho: np.ndarray) -> float | np.ndarray:
    """Total population of the top 10% of Fock levels (at least one level)."""
    dim = rho.shape[-1]
    k = max(1, math.ceil(0.1 * dim))
    diag = np.real(np.diagonal(rho, axis1=-2, axis2=-1))
    return diag[..., dim - k:].sum(axis=-1)


def truncation_guard(rho: np.ndarray, where: str = "state") -> float:
    """Check the Fock tail of ``rho`` (or of a stack of states).

    Returns the largest tail population. Emits :class:`TruncationWarning`
    above ``TRUNCATION_SOFT`` and raises :class:`TruncationError` above
    ``TRUNCATION_HARD``.
    """
    tail = float(np.max(tail_population(rho)))
    if tail > TRUNCATION_HARD:
        raise TruncationError(
            f"{where}: top-level population {tail:.3e} exceeds {TRUNCATION_HARD:g} "
            f"at dim={rho.shape[-1]}"
        )
    if tail > TRUNCATION_SOFT:
        warnings.warn(
            f"{where}: top-level population {tail:.3e} exceeds {TRUNCATION_SOFT:g} "
            f"at dim={rho.shape[-1]}",
            TruncationWarning,
            stacklevel=2,
        )
    return tail


def validate_density_matrix(
    rho: np.ndarray,
    *,
    hermitian_atol: float = HERMITIAN_ATOL,
    trace_atol: float = TRACE_ATOL,
    positivity_atol: float = POSITIVITY_ATOL,
    time: float | None = None,
) -> np.ndarray:
    """Raise :class:`InvariantViolation` unless ``rho`` is a density matrix.

    Works on a single matrix or a stack ``(..., n, n)``.
    """
    rho = np.asarray(rho)
    if rho.ndim < 2 or rho.shape[-1] != rho.shape[-2]:
        raise ValueError(f"density matrix must be square, got shape {rho.shape}")
    herm = np.max(np.abs(rho - np.swapaxes(rho, -1, -2).conj()))
    if herm > hermitian_atol:
        raise InvariantViolation(f"state not Hermitian (max deviation {herm:.3e})", time)
    tr = np.trace(rho, axis1=-2, axis2=-1)
    tr_err = np.max(np.abs(tr - 1.0))
    if tr_err > trace_atol:
        raise InvariantViolation(f"trace deviates from 1 by {tr_err:.3e}", time)
    lam = np.min(np.linalg.eigvalsh(rho))
    if lam < -positivity_atol:
        raise InvariantViolation(f"negative eigenvalue {lam:.3e}", time)
    return rho


def thermal_state(dim: int, beta: float, omega: float = 1.0) -> np.ndarray:
    """Gibbs state ``exp(-beta H) / Z`` restricted to ``dim`` Fock levels."""
    dim = check_dim(dim)
    if not beta > 0:
        raise ValueError(f"beta must be positive, got {beta!r}")
    if not omega > 0:
        raise ValueError(f"omega must be positive, got {omega!r}")
    # the zero-point factor cancels in the normalisation
    w = np.exp(-beta * omega * np.arange(dim, dtype=float))
    rho = np.diag(w / w.sum()).astype(complex)
    truncation_guard(rho, "thermal_state")
    return rho


def fock_state(dim: int, n: int) -> np.ndarray:
    dim = check_dim(dim)
    if not 0 <= n < dim:
        raise ValueError(f"Fock index {n} outside 0..{dim - 1}")
    rho = np.zeros((dim, dim), dtype=complex)
    rho[n, n] = 1.0
    return rho


def coherent_state(dim: int, alpha: complex) -> np.ndarray:
    """Projector on the coherent state ``|alpha>``, renormalised after truncation."""
    dim = check_dim(dim)
    n = np.arange(dim)
    log_fact = np.array([math.lgamma(k + 1) for k in n])
    amp = np.exp(-0.5 * abs(alpha) ** 2 - 0.5 * log_fact) * np.power(complex(alpha), n)
    amp = amp / np.linalg.norm(amp)
    rho = np.outer(amp, amp.conj())
    truncation_guard(rho, "coherent_state")
    return rho


def expectation(A: np.ndarray, rho: np.ndarray, *, hermitian: bool | None = None):
    """``Tr(A rho)``; real for Hermitian ``A``.

    If ``hermitian`` is None it is detected from ``A``. For a Hermitian
    observable an imaginary part of 1e-9 or more means ``rho`` is corrupt.
    """
    A = np.asarray(A)
    rho = np.asarray(rho)
    if A.shape != rho.shape[-2:]:
        raise ValueError(f"shape mismatch: A {A.shape} vs rho {rho.shape}")
    val = np.einsum("ij,...ji->...", A, rho)
    if hermitian is None:
        hermitian = bool(np.allclose(A, A.conj().T, rtol=0, atol=1e-12))
    if not hermitian:
        return val
    im = np.max(np.abs(np.imag(val)))
    if im >= 1e-9:
        raise InvariantViolation(f"imaginary expectation {im:.3e} of a Hermitian observable")
    re = np.real(val)
    return float(re) if np.ndim(re) == 0 else re


def purity(rho: np.ndarray):
    """``Tr(rho^2)`` for Hermitian ``rho`` (vectorised over leading axes)."""
    val = np.sum(np.abs(rho) ** 2, axis=(-2, -1))
    return float(val) if np.ndim(val) == 0 else val


@dataclass(frozen=True)
class ObservableReport:
    """Quadrature statistics of one state.

    ``r_x`` and ``r_p`` are second moments normalised by the vacuum value
    1/2, so they coincide with normalised variances only once the means
    vanish. ``uncertainty_product`` is ``var_x * var_p``.
    """

    mean_x: float
    mean_p: float
    var_x: float
    var_p: float
    mean_x2: float
    mean_p2: float
    sym_xp: float
    purity: float
    r_x: float
    r_p: float
    uncertainty_product: float

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


REPORT_FIELDS = tuple(ObservableReport.__dataclass_fields__)


def report_arrays(rho: np.ndarray) -> dict[str, np.ndarray]:
    """Report fields for a stack of states, one array per field."""
    ops = operator_set(rho.shape[-1])
    x, p = ops.x, ops.p
    xr = x @ rho if rho.ndim == 2 else np.matmul(x, rho)
    pr = p @ rho if rho.ndim == 2 else np.matmul(p, rho)

    def tr(a):
        return np.real(np.trace(a, axis1=-2, axis2=-1))

    mean_x = tr(xr)
    mean_p = tr(pr)
    # Tr(x x rho) = sum_ij x_ij (x rho)_ji
    mean_x2 = np.real(np.einsum("ij,...ji->...", x, xr))
    mean_p2 = np.real(np.einsum("ij,...ji->...", p, pr))
    sym_xp = 2.0 * np.real(np.einsum("ij,...ji->...", x, pr))
    var_x = mean_x2 - mean_x**2
    var_p = mean_p2 - mean_p**2
    return {
        "mean_x": mean_x,
        "mean_p": mean_p,
        "var_x": var_x,
        "var_p": var_p,
        "mean_x2": mean_x2,
        "mean_p2": mean_p2,
        "sym_xp": sym_xp,
        "purity": np.sum(np.abs(rho) ** 2, axis=(-2, -1)),
        "r_x": 2.0 * mean_x2,
        "r_p": 2.0 * mean_p2,
        "uncertainty_product": var_x * var_p,
    }


def report(rho: np.ndarray) -> ObservableReport:
    """Observables of a single density matrix."""
    rho = np.asarray(rho)
    if rho.ndim != 2:
        raise ValueError("report() takes a single density matrix; use report_arrays for stacks")
    return ObservableReport(**{k: float(v) for k, v in report_arrays(rho).items()})
