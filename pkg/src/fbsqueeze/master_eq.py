"""Ensemble-averaged (unconditioned) dynamics of the measured oscillator.

Three generators share one Lindblad skeleton::

    d rho/dt = -i[H, rho] + k1 D[c] rho + k2 D[c^dag] rho + k3 D[c + c^dag] rho
               + k4 [c c - c^dag c^dag, rho]

* ``dual_feedback``: both quadratures measured, record-driven feedback.
* ``measurement_only``: both quadratures measured, no feedback (``kappa_f = 0``).
* ``single_observable``: only ``x`` measured, feedback ``-kappa_f xbar p``.

The ``k4`` term appears only in the single-observable model; it is a
commutator with the anti-Hermitian operator ``cc - c^dag c^dag`` and is
folded into the effective non-Hermitian Hamiltonian.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import InvariantViolation, NoSteadyStateError, TruncationError, TruncationWarning
from .operators import check_dim, hamiltonian, operator_set
from .states import (
    TRUNCATION_SOFT,
    report_arrays,
    tail_population,
    truncation_guard,
    validate_density_matrix,
)

__all__ = [
    "DEFAULT_DIM",
    "MAX_DIM",
    "Evolution",
    "FeedbackParams",
    "Generator",
    "KCoefficients",
    "Variant",
    "evolve",
    "generator",
    "k_coefficients",
    "liouvillian",
    "rhs",
    "stable_step",
    "steady_state",
]

DEFAULT_DIM = 40
MAX_DIM = 120
RUN_ATOL = 1e-8


class Variant(str, enum.Enum):
    DUAL = "dual_feedback"
    MEASUREMENT_ONLY = "measurement_only"
    SINGLE = "single_observable"

    @classmethod
    def parse(cls, value) -> "Variant":
        if isinstance(value, cls):
            return value
        aliases = {"dual": cls.DUAL, "single": cls.SINGLE, "measure-only": cls.MEASUREMENT_ONLY,
                   "measurement-only": cls.MEASUREMENT_ONLY}
        try:
            return aliases.get(value) or cls(value)
        except ValueError:
            raise ValueError(f"unknown variant {value!r}") from None


@dataclass(frozen=True)
class FeedbackParams:
    """Model constants (hbar = 1).

    Parameters
    ----------
    gamma_x, gamma_p : float
        Measurement strengths of ``x`` and ``p``.
    kappa_f : float
        Feedback strength. Forced to zero for ``measurement_only``.
    omega : float
        Oscillator frequency, used only when ``include_unitary`` is set.
    include_unitary : bool
        Keep the ``-i[H_s, rho]`` term.
    variant : Variant or str
    """

    gamma_x: float
    gamma_p: float
    kappa_f: float = 0.0
    omega: float = 1.0
    include_unitary: bool = True
    variant: Variant = Variant.DUAL

    def __post_init__(self):
        variant = Variant.parse(self.variant)
        object.__setattr__(self, "variant", variant)
        for name in ("gamma_x", "gamma_p", "kappa_f", "omega"):
            val = float(getattr(self, name))
            if not math.isfinite(val):
                raise ValueError(f"{name} must be finite, got {val}")
            object.__setattr__(self, name, val)
        if self.gamma_x < 0 or self.gamma_p < 0 or self.kappa_f < 0:
            raise ValueError("measurement and feedback strengths must be nonnegative")
        if self.include_unitary and not self.omega > 0:
            raise ValueError(f"omega must be positive, got {self.omega}")
        if variant is Variant.DUAL:
            if not (self.gamma_x > 0 and self.gamma_p > 0):
                raise ValueError("dual_feedback requires gamma_x > 0 and gamma_p > 0")
        elif variant is Variant.SINGLE:
            if not self.gamma_x > 0:
                raise ValueError("single_observable requires gamma_x > 0")
        elif self.kappa_f != 0.0:
            object.__setattr__(self, "kappa_f", 0.0)

    def with_(self, **changes) -> "FeedbackParams":
        return replace(self, **changes)

    def as_dict(self) -> dict:
        return {
            "gamma_x": self.gamma_x,
            "gamma_p": self.gamma_p,
            "kappa_f": self.kappa_f,
            "omega": self.omega,
            "include_unitary": self.include_unitary,
            "variant": self.variant.value,
        }


@dataclass(frozen=True)
class KCoefficients:
    k1: float
    k2: float
    k3: float
    k4: float = 0.0
    gamma_eff_x: float | None = None
    gamma_eff_p: float | None = None


def k_coefficients(params: FeedbackParams) -> KCoefficients:
    """Dissipator weights of the ensemble-averaged generator."""
    gx, gp, kf = params.gamma_x, params.gamma_p, params.kappa_f
    if params.variant is Variant.SINGLE:
        return KCoefficients(
            k1=kf**2 / gx + kf / 2,
            k2=kf**2 / gx - kf / 2,
            k3=gx / 8 - kf**2 / (2 * gx),
            k4=kf / 4,
        )
    if params.variant is Variant.MEASUREMENT_ONLY:
        return KCoefficients(k1=gp / 4, k2=gp / 4, k3=(gx - gp) / 8,
                             gamma_eff_x=gx, gamma_eff_p=gp)
    return KCoefficients(
        k1=gp / 4 + kf**2 / gx + kf,
        k2=gp / 4 + kf**2 / gx - kf,
        k3=(gx - gp) / 8 - kf**2 / (2 * gx) + kf**2 / (2 * gp),
        gamma_eff_x=gx + 4 * kf**2 / gp,
        gamma_eff_p=gp + 4 * kf**2 / gx,
    )


@dataclass(frozen=True, eq=False)
class Generator:
    """Generator in the form ``K rho + rho K^dag + sum_j w_j L_j rho L_j^dag``."""

    dim: int
    K: np.ndarray
    jumps: tuple[tuple[float, np.ndarray], ...]
    _Kd: np.ndarray = field(repr=False)
    _jumps_d: tuple[np.ndarray, ...] = field(repr=False)

    def apply(self, rho: np.ndarray) -> np.ndarray:
        out = self.K @ rho + rho @ self._Kd
        for (w, L), Ld in zip(self.jumps, self._jumps_d):
            if w != 0.0:
                out = out + w * (L @ rho @ Ld)
        return out

    __call__ = apply


def _build_generator(params: FeedbackParams, dim: int) -> Generator:
    ops = operator_set(dim)
    c, cd = ops.c, ops.cd
    y = c + cd
    k = k_coefficients(params)
    jumps = ((k.k1, c), (k.k2, cd), (k.k3, y))
    K = np.zeros((dim, dim), dtype=complex)
    if params.include_unitary:
        K = K - 1j * hamiltonian(dim, params.omega)
    for w, L in jumps:
        K = K - 0.5 * w * (L.conj().T @ L)
    if k.k4:
        K = K + k.k4 * (c @ c - cd @ cd)
    Kd = K.conj().T.copy()
    jumps_d = tuple(L.conj().T.copy() for _, L in jumps)
    for arr in (K, Kd, *jumps_d):
        arr.setflags(write=False)
    return Generator(dim=dim, K=K, jumps=jumps, _Kd=Kd, _jumps_d=jumps_d)


@lru_cache(maxsize=64)
def generator(params: FeedbackParams, dim: int) -> Generator:
    return _build_generator(params, check_dim(dim))


def rhs(rho: np.ndarray, params: FeedbackParams) -> np.ndarray:
    """Time derivative of ``rho`` under the ensemble-averaged master equation."""
    rho = np.asarray(rho)
    if rho.ndim != 2 or rho.shape[0] != rho.shape[1]:
        raise ValueError(f"rho must be square, got shape {rho.shape}")
    return generator(params, rho.shape[0]).apply(rho)


@lru_cache(maxsize=16)
def liouvillian(params: FeedbackParams, dim: int) -> sp.csr_matrix:
    """Sparse superoperator acting on row-major ``vec(rho)``.

    Uses ``vec(A X B) = (A kron B^T) vec(X)``.
    """
    gen = generator(params, check_dim(dim))
    eye = sp.identity(dim, dtype=complex, format="csr")
    K = sp.csr_matrix(gen.K)
    sup = sp.kron(K, eye) + sp.kron(eye, K.conj())
    for w, L in gen.jumps:
        if w != 0.0:
            Ls = sp.csr_matrix(L)
            sup = sup + w * sp.kron(Ls, Ls.conj())
    sup = sp.csr_matrix(sup)
    sup.eliminate_zeros()
    return sup


def stable_step(params: FeedbackParams, dim: int) -> float:
    """Largest RK4 step we trust for this generator.

    Combines the rate-based guard ``dt * max(|k|, omega) <= 0.05`` with a
    spectral bound ``dt * ||L_d||_1 <= 1`` on the dissipative part. RK4 is
    stable up to about 2.78 on the real axis, but near-pure states need the
    smaller bound to keep eigenvalues above -1e-8. The free oscillation is
    integrated exactly in its rotating frame (see :func:`evolve`), so it
    only enters through the rate guard.
    """
    k = k_coefficients(params)
    rates = [abs(k.k1), abs(k.k2), abs(k.k3), abs(k.k4)]
    if params.include_unitary:
        rates.append(params.omega)
    h_rate = 0.05 / max(max(rates), 1e-300)
    norm1 = spla.norm(liouvillian(params.with_(include_unitary=False), dim), 1)
    h_spec = 1.0 / norm1 if norm1 > 0 else math.inf
    return min(h_rate, h_spec)


@dataclass
class Evolution:
    """Snapshots of ``rho(t)`` from :func:`evolve`."""

    times: np.ndarray
    states: np.ndarray
    params: FeedbackParams
    step: float
    max_tail: float

    @property
    def dim(self) -> int:
        return self.states.shape[-1]

    def reports(self) -> dict[str, np.ndarray]:
        return report_arrays(self.states)


def _rk4(L: sp.csr_matrix, v: np.ndarray, h: float, n: int, phi=None,
         t0: float = 0.0) -> np.ndarray:
    """``n`` classical RK4 steps of ``dv/dt = L v``.

    With ``phi`` the system is ``dv/dt = e^{i phi t} L (e^{-i phi t} v)``,
    the rotating-frame form of ``L`` plus a diagonal oscillation.
    """
    if phi is None:
        for _ in range(n):
            k1 = L @ v
            k2 = L @ (v + 0.5 * h * k1)
            k3 = L @ (v + 0.5 * h * k2)
            k4 = L @ (v + h * k3)
            v = v + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        return v
    half = np.exp(0.5j * h * phi)
    for m in range(n):
        ph0 = np.exp(1j * (t0 + m * h) * phi)
        ph1 = ph0 * half
        ph2 = ph1 * half

        def f(ph, w):
            return ph * (L @ (w / ph))

        k1 = f(ph0, v)
        k2 = f(ph1, v + 0.5 * h * k1)
        k3 = f(ph1, v + 0.5 * h * k2)
        k4 = f(ph2, v + h * k3)
        v = v + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return v


def evolve(
    rho0: np.ndarray,
    params: FeedbackParams,
    t_final: float,
    dt: float | None = None,
    *,
    times=None,
    n_samples: int = 101,
    check: bool = True,
) -> Evolution:
    """Integrate the master equation with fixed-step classical RK4.

    Steps act on the row-major vectorised state through the sparse
    :func:`liouvillian`, which costs ``O(dim^2)`` per stage.

    Parameters
    ----------
    rho0 : ndarray
        Initial density matrix; its shape fixes the Fock dimension.
    t_final : float
        End time (>= 0).
    dt : float, optional
        Upper bound on the internal step. It is reduced to
        :func:`stable_step` when larger, and each sampling interval is split
        into equal substeps.
    times : array_like, optional
        Sample times in ``[0, t_final]``, increasing. Defaults to
        ``n_samples`` evenly spaced points.
    check : bool
        Validate every snapshot (trace and Hermiticity to 1e-8, positivity,
        truncation guard). A failure raises :class:`InvariantViolation`
        carrying the offending time.
    """
    rho0 = np.asarray(rho0, dtype=complex)
    dim = check_dim(rho0.shape[0])
    if t_final < 0:
        raise ValueError("t_final must be >= 0")
    if dt is not None and not dt > 0:
        raise ValueError("dt must be positive")
    validate_density_matrix(rho0, hermitian_atol=RUN_ATOL, trace_atol=RUN_ATOL, time=0.0)
    if times is None:
        times = np.linspace(0.0, t_final, n_samples) if t_final > 0 else np.zeros(1)
    times = np.asarray(times, dtype=float)
    if times[0] != 0.0 or np.any(np.diff(times) <= 0) or times[-1] > t_final * (1 + 1e-12):
        raise ValueError("sample times must start at 0, increase, and end by t_final")

    h_max = stable_step(params, dim)
    if dt is not None:
        h_max = min(h_max, dt)
    # H is diagonal, so rho_ij picks up exp(-i phi_ij t) with phi_ij = omega (i - j).
    # We step the rotating-frame state and rotate back at each sample.
    L = liouvillian(params.with_(include_unitary=False), dim)
    phi = None
    if params.include_unitary and params.omega != 0:
        lvl = np.arange(dim, dtype=float)
        phi = (params.omega * (lvl[:, None] - lvl[None, :])).reshape(-1)

    states = np.empty((len(times), dim, dim), dtype=complex)
    states[0] = rho0
    rho = rho0.copy()
    max_tail = float(tail_population(rho0))
    step = h_max
    for i in range(1, len(times)):
        span = times[i] - times[i - 1]
        n = max(1, math.ceil(span / h_max - 1e-9))
        step = span / n
        t0 = float(times[i - 1])
        if phi is None:
            rho = _rk4(L, rho.reshape(-1), step, n).reshape(dim, dim)
        else:
            v = np.exp(1j * phi * t0) * rho.reshape(-1)
            v = _rk4(L, v, step, n, phi, t0)
            rho = (np.exp(-1j * phi * (t0 + n * step)) * v).reshape(dim, dim)
        rho = 0.5 * (rho + rho.conj().T)
        if check:
            t = float(times[i])
            validate_density_matrix(rho, hermitian_atol=RUN_ATOL, trace_atol=RUN_ATOL, time=t)
            try:
                max_tail = max(max_tail, truncation_guard(rho, f"evolve t={t:.6g}"))
            except TruncationError as exc:
                raise TruncationError(f"{exc} (t = {t:.6g})") from None
        states[i] = rho
    return Evolution(times=times, states=states, params=params, step=step, max_tail=max_tail)


def _null_space_state(params: FeedbackParams, dim: int) -> np.ndarray:
    L = liouvillian(params, dim).tolil()
    n = dim * dim
    # d(rho_00)/dt is redundant given trace preservation; swap in Tr(rho) = 1.
    L[0, :] = 0.0
    L[0, np.arange(dim) * (dim + 1)] = 1.0
    b = np.zeros(n, dtype=complex)
    b[0] = 1.0
    with warnings.catch_warnings():
        warnings.simplefilter("error", spla.MatrixRankWarning)
        try:
            v = spla.spsolve(L.tocsc(), b)
        except (spla.MatrixRankWarning, RuntimeError) as exc:
            raise InvariantViolation(f"degenerate steady-state null space at dim={dim}: {exc}")
    if not np.all(np.isfinite(v)):
        raise InvariantViolation(f"steady-state solve returned non-finite values at dim={dim}")
    rho = v.reshape(dim, dim)
    rho = 0.5 * (rho + rho.conj().T)
    return rho / np.trace(rho).real


def steady_state(
    params: FeedbackParams,
    dim: int | None = None,
    *,
    cross_check: bool = False,
    residual_tol: float = 1e-9,
    max_dim: int = MAX_DIM,
) -> np.ndarray:
    """Stationary state from the null space of the vectorised generator.

    With ``dim=None`` the search starts at ``DEFAULT_DIM`` and grows by 1.5x
    (capped at ``max_dim``) while the truncation guard fires. A fixed
    ``dim`` is used as given.

    With ``cross_check=True`` the result is compared against
    :func:`evolve` from the vacuum to ``t = 10 / kappa_f``; every report
    field must agree to 1e-6.
    """
    if params.variant is Variant.SINGLE:
        raise NoSteadyStateError(
            "single_observable has no steady state: <p^2> grows linearly at gamma_x/4"
        )
    if params.kappa_f == 0.0 and (params.gamma_x > 0 or params.gamma_p > 0):
        raise NoSteadyStateError(
            "without feedback the measurement heats the oscillator without bound"
        )
    if dim is not None:
        dims = [check_dim(dim)]
    else:
        max_dim = check_dim(max_dim)
        dims, d = [], min(DEFAULT_DIM, max_dim)
        while d < max_dim:
            dims.append(d)
            d = int(round(d * 1.5))
        dims.append(max_dim)

    for i, d in enumerate(dims):
        rho = _null_space_state(params, d)
        last = i == len(dims) - 1
        if not last and float(tail_population(rho)) > TRUNCATION_SOFT:
            continue
        break
    residual = float(np.max(np.abs(rhs(rho, params))))
    if residual > residual_tol * max(1.0, _rate_scale(params)):
        raise InvariantViolation(f"steady state residual {residual:.3e} at dim={d}")
    validate_density_matrix(rho, hermitian_atol=RUN_ATOL, trace_atol=RUN_ATOL)
    truncation_guard(rho, "steady_state")
    if cross_check:
        _cross_check(rho, params)
    return rho


def _rate_scale(params: FeedbackParams) -> float:
    k = k_coefficients(params)
    return max(abs(k.k1), abs(k.k2), abs(k.k3), abs(k.k4), 1.0)


def _cross_check(rho_ss: np.ndarray, params: FeedbackParams, atol: float = 1e-6) -> None:
    dim = rho_ss.shape[0]
    vac = np.zeros((dim, dim), dtype=complex)
    vac[0, 0] = 1.0
    t_end = 10.0 / params.kappa_f
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", TruncationWarning)
        ev = evolve(vac, params, t_end, times=np.array([0.0, t_end]))
    a = report_arrays(rho_ss)
    b = report_arrays(ev.states[-1])
    worst = max(abs(float(a[k]) - float(b[k][()])) for k in a)
    if worst > atol:
        raise InvariantViolation(
            f"null-space and time-integrated steady states differ by {worst:.3e}"
        )
