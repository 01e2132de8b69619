"""First and second quadrature moments without the density matrix.

Two independent routes:

* closed forms for the dual-feedback and single-observable models with the
  free oscillation switched off (:func:`closed_form`,
  :func:`single_observable_moments`);
* a general affine ODE ``dm/dt = A m + b`` for the five moments
  ``(<x>, <p>, <x^2>, <p^2>, <xp+px>)`` built from the k-coefficients,
  including the ``omega`` rotation (:func:`extended_moments`).

The second route is what makes dense parameter sweeps with the unitary term
cheap; its coefficients are tested against ``Tr(A rhs(rho))``.
"""

from __future__ import annotations

from dataclasses import astuple, dataclass

import numpy as np
import scipy.linalg

from .errors import NoSteadyStateError
from .master_eq import FeedbackParams, Variant, k_coefficients
from .states import report

__all__ = [
    "MomentSolution",
    "MomentState",
    "closed_form",
    "drift",
    "extended_moments",
    "extended_steady_state",
    "moment_solution",
    "single_observable_moments",
    "uncertainty_product_ss",
]


@dataclass(frozen=True)
class MomentState:
    """``<x>``, ``<p>``, ``<x^2>``, ``<p^2>``, ``<xp+px>``.

    Fields may be arrays when a state is evaluated on a time grid.
    """

    mean_x: float
    mean_p: float
    m_x2: float
    m_p2: float
    m_sym: float = 0.0

    @classmethod
    def from_density_matrix(cls, rho: np.ndarray) -> "MomentState":
        r = report(rho)
        return cls(r.mean_x, r.mean_p, r.mean_x2, r.mean_p2, r.sym_xp)

    @classmethod
    def from_array(cls, arr) -> "MomentState":
        arr = np.asarray(arr, dtype=float)
        return cls(*(arr[..., i] for i in range(5)))

    def as_array(self) -> np.ndarray:
        return np.stack(np.broadcast_arrays(*astuple(self)), axis=-1).astype(float)

    @property
    def var_x(self):
        return self.m_x2 - self.mean_x**2

    @property
    def var_p(self):
        return self.m_p2 - self.mean_p**2

    def validate(self, atol: float = 1e-12) -> "MomentState":
        if np.any(self.var_x < -atol) or np.any(self.var_p < -atol):
            raise ValueError("second moments smaller than squared means")
        return self


@dataclass(frozen=True)
class MomentSolution:
    """``<x^2>(t) = C1 exp(-2 kappa_f t) + x2_ss`` and likewise for ``p``."""

    C1: float
    C2: float
    x2_ss: float
    p2_ss: float
    rate: float


def _require_no_unitary(params: FeedbackParams, variant: Variant) -> None:
    if params.variant is not variant:
        raise ValueError(f"expected variant {variant.value}, got {params.variant.value}")
    if params.include_unitary:
        raise ValueError("closed forms assume include_unitary=False; use extended_moments")
    if not params.kappa_f > 0:
        raise NoSteadyStateError(
            "kappa_f = 0: measurement alone heats <x^2>, <p^2> linearly at gamma_p/4, gamma_x/4"
        )


def moment_solution(params: FeedbackParams, initial: MomentState) -> MomentSolution:
    _require_no_unitary(params, Variant.DUAL)
    gx, gp, kf = params.gamma_x, params.gamma_p, params.kappa_f
    x2_ss = gp / (8 * kf) + kf / (2 * gx)
    p2_ss = gx / (8 * kf) + kf / (2 * gp)
    return MomentSolution(
        C1=initial.m_x2 - x2_ss, C2=initial.m_p2 - p2_ss, x2_ss=x2_ss, p2_ss=p2_ss, rate=kf
    )


def closed_form(params: FeedbackParams, initial: MomentState, t) -> MomentState:
    """Analytic moments of the dual-feedback model without free oscillation."""
    sol = moment_solution(params, initial)
    t = np.asarray(t, dtype=float)
    e1 = np.exp(-sol.rate * t)
    e2 = e1 * e1
    out = MomentState(
        mean_x=initial.mean_x * e1,
        mean_p=initial.mean_p * e1,
        m_x2=sol.C1 * e2 + sol.x2_ss,
        m_p2=sol.C2 * e2 + sol.p2_ss,
        m_sym=initial.m_sym * e2,
    )
    return _scalarize(out) if t.ndim == 0 else out


def uncertainty_product_ss(gamma_x: float, gamma_p: float, kappa_f: float) -> float:
    """Steady ``<x^2><p^2>`` without free oscillation; minimum 1/4 on ``gx*gp = 4 kf^2``."""
    if not (gamma_x > 0 and gamma_p > 0 and kappa_f > 0):
        raise ValueError("strengths must be strictly positive")
    s = gamma_x * gamma_p
    return 1 / 8 + s / (64 * kappa_f**2) + kappa_f**2 / (4 * s)


def single_observable_moments(params: FeedbackParams, initial: MomentState, t) -> MomentState:
    """Moments when only ``x`` is measured; ``<p^2>`` grows without bound."""
    _require_no_unitary(params, Variant.SINGLE)
    gx, kf = params.gamma_x, params.kappa_f
    t = np.asarray(t, dtype=float)
    e1 = np.exp(-kf * t)
    x2_ss = kf / (2 * gx)
    out = MomentState(
        mean_x=initial.mean_x * e1,
        mean_p=initial.mean_p + 0.0 * t,
        m_x2=(initial.m_x2 - x2_ss) * e1 * e1 + x2_ss,
        m_p2=initial.m_p2 + 0.25 * gx * t,
        m_sym=initial.m_sym * e1,
    )
    return _scalarize(out) if t.ndim == 0 else out


def drift(params: FeedbackParams) -> tuple[np.ndarray, np.ndarray]:
    """``(A, b)`` with ``d/dt (<x>, <p>, <x^2>, <p^2>, <xp+px>) = A m + b``."""
    k = k_coefficients(params)
    w = params.omega if params.include_unitary else 0.0
    damp = k.k2 - k.k1
    A = np.array(
        [
            [damp / 2 - 2 * k.k4, w, 0, 0, 0],
            [-w, damp / 2 + 2 * k.k4, 0, 0, 0],
            [0, 0, damp - 4 * k.k4, 0, w],
            [0, 0, 0, damp + 4 * k.k4, -w],
            [0, 0, -2 * w, 2 * w, damp],
        ],
        dtype=float,
    )
    b = np.array([0, 0, (k.k1 + k.k2) / 2, (k.k1 + k.k2 + 4 * k.k3) / 2, 0], dtype=float)
    return A, b


def extended_moments(params: FeedbackParams, initial: MomentState, t) -> MomentState:
    """Solve the affine moment ODE exactly through an augmented 6x6 exponential."""
    A, b = drift(params)
    M = np.zeros((6, 6))
    M[:5, :5] = A
    M[:5, 5] = b
    m0 = np.append(initial.as_array(), 1.0)
    t = np.asarray(t, dtype=float)
    flat = np.atleast_1d(t)
    out = np.array([scipy.linalg.expm(M * s) @ m0 for s in flat])[:, :5]
    if t.ndim == 0:
        return MomentState(*(float(v) for v in out[0]))
    return MomentState.from_array(out.reshape(*t.shape, 5))


def extended_steady_state(params: FeedbackParams) -> MomentState:
    """Fixed point of the moment ODE; means are zero whenever it exists."""
    A, b = drift(params)
    eig = np.linalg.eigvals(A)
    if np.max(eig.real) >= -1e-12:
        raise NoSteadyStateError(
            f"moment ODE is not contracting (max Re eig = {eig.real.max():.3g})"
        )
    return MomentState(*(float(v) for v in np.linalg.solve(A, -b)))


def _scalarize(m: MomentState) -> MomentState:
    return MomentState(*(float(v) for v in astuple(m)))
