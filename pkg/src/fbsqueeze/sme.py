"""Conditioned trajectories of the measured oscillator with Markovian feedback.

Two integrators are provided.

``euler``: one Euler-Maruyama step of the Ito conditioned master equation
followed by conjugation with the feedback unitary ``exp(-i H_f dt)``,
expanded to first order in ``dt``::

    rho' = (rho + d rho) - i[H_f dt, rho] - i[H_f dt, d rho]
           - 1/2 [H_f dt, [H_f dt, rho]]

with ``H_f dt = -kappa_f xbar dt p + kappa_f pbar dt x`` built from the
measurement record of the same step. In the last two terms only the
``d xi_j**2 -> dt`` contributions survive. Near-pure states pick up
negative eigenvalues of order ``dt`` under this scheme.

``kraus``: the same record drives a completely positive update
``rho' = K rho K^dag / Tr(K rho K^dag)``. Its mean increment matches the
Euler scheme to ``O(dt^2)``, and positivity holds by construction. This is
the default for :func:`run_batch`.

Steps are vectorised over a batch of trajectories. In the Euler path every
left product ``O @ rho`` is evaluated as ``(rho @ O)^dag``, which holds for
Hermitian ``O`` and ``rho`` and turns the batch into one flat GEMM.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import InvariantViolation, TruncationError, TruncationWarning
from .master_eq import FeedbackParams, Variant, generator, k_coefficients
from .operators import operator_set
from .states import (
    REPORT_FIELDS,
    TRUNCATION_HARD,
    TRUNCATION_SOFT,
    report_arrays,
    tail_population,
    validate_density_matrix,
)

__all__ = [
    "EnsembleAverage",
    "NoiseStream",
    "SCHEMES",
    "TrajectoryRecord",
    "ensemble_average",
    "run_batch",
    "run_ensemble",
    "run_trajectory",
    "sme_step",
]

POSITIVITY_ABORT = -1e-6
NOISE_CHUNK = 256


class NoiseStream:
    """Two independent Wiener-increment sequences ``(d xi_x, d xi_p)``.

    Each increment has mean 0 and variance ``dt``. Draws come in a fixed
    order, so a stream is fully determined by ``(seed, dt)``.
    """

    def __init__(self, seed: int, dt: float):
        if not dt > 0:
            raise ValueError("dt must be positive")
        self.seed = int(seed)
        self.dt = float(dt)
        self._rng = np.random.default_rng(self.seed)
        self._scale = math.sqrt(self.dt)

    def draw(self, n_steps: int) -> np.ndarray:
        """Next ``n_steps`` increments, shape ``(n_steps, 2)``."""
        return self._rng.standard_normal((n_steps, 2)) * self._scale


def _dag(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2).conj()


def _rmul(a: np.ndarray, op: np.ndarray) -> np.ndarray:
    """``a @ op`` for a stack ``a`` of shape ``(..., n, n)`` as a single GEMM."""
    n = op.shape[0]
    return (a.reshape(-1, n) @ op).reshape(a.shape)


def _trace_re(a: np.ndarray) -> np.ndarray:
    return np.real(np.trace(a, axis1=-2, axis2=-1))


@dataclass(frozen=True)
class _StepOps:
    x: np.ndarray
    p: np.ndarray
    h_diag: np.ndarray | None
    gx: float
    gp: float
    kf: float
    measure_p: bool
    feedback_p: bool


def _step_ops(params: FeedbackParams, dim: int) -> _StepOps:
    ops = operator_set(dim)
    h = None
    if params.include_unitary:
        h = params.omega * (np.arange(dim, dtype=float) + 0.5)
    single = params.variant is Variant.SINGLE
    return _StepOps(
        x=ops.x,
        p=ops.p,
        h_diag=h,
        gx=params.gamma_x,
        gp=0.0 if single else params.gamma_p,
        kf=params.kappa_f,
        measure_p=(not single) and params.gamma_p > 0,
        feedback_p=(params.variant is Variant.DUAL) and params.kappa_f > 0,
    )


def _step(rho, so: _StepOps, dxi_x, dxi_p, dt, signals_out=None):
    """Batched update; ``rho`` has shape ``(N, n, n)``, noises shape ``(N,)``."""
    wx = dxi_x[:, None, None]
    wp = dxi_p[:, None, None]
    kf = so.kf

    rx = _rmul(rho, so.x)                      # rho x
    xr = _dag(rx)                              # x rho
    mx = _trace_re(rx)
    cx = xr - rx                               # [x, rho]
    cxx = _rmul(cx, so.x)
    dcx = -_dag(cxx) - cxx                     # [x, [x, rho]]

    drift = -(so.gx / 8.0) * dcx
    if so.h_diag is not None:
        h = so.h_diag
        drift = drift - 1j * (h[:, None] * rho - rho * h[None, :])

    ax = 0.5 * (xr + rx) - mx[:, None, None] * rho
    noise = math.sqrt(so.gx) * ax * wx if so.gx > 0 else 0.0

    if so.measure_p or so.feedback_p:
        rp = _rmul(rho, so.p)
        pr = _dag(rp)
        mp = _trace_re(rp)
        cp = pr - rp
        cpp = _rmul(cp, so.p)
        dcp = -_dag(cpp) - cpp
    else:
        mp = cp = dcp = None

    if so.measure_p:
        drift = drift - (so.gp / 8.0) * dcp
        ap = 0.5 * (pr + rp) - mp[:, None, None] * rho
        noise = noise + math.sqrt(so.gp) * ap * wp

    d_rho = drift * dt + noise
    new = rho + d_rho

    if kf > 0:
        # x channel: H_f dt contains u p with u = -kf xbar dt
        if cp is None:
            rp = _rmul(rho, so.p)
            cp = _dag(rp) - rp
            cpp = _rmul(cp, so.p)
            dcp = -_dag(cpp) - cpp
        u = -kf * (mx * dt + dxi_x / math.sqrt(so.gx))
        new = new - 1j * u[:, None, None] * cp
        axp = _rmul(ax, so.p)                  # Ax p; p Ax = (Ax p)^dag
        new = new + (1j * kf * dt) * (_dag(axp) - axp)
        new = new - (0.5 * kf**2 / so.gx * dt) * dcp
        if so.feedback_p:
            v = kf * (mp * dt + dxi_p / math.sqrt(so.gp))
            new = new - 1j * v[:, None, None] * cx
            apx = _rmul(ap, so.x)
            new = new - (1j * kf * dt) * (_dag(apx) - apx)
            new = new - (0.5 * kf**2 / so.gp * dt) * dcx

    if signals_out is not None:
        signals_out[:, 0] = mx * dt + (dxi_x / math.sqrt(so.gx) if so.gx > 0 else 0.0)
        if so.measure_p:
            signals_out[:, 1] = mp * dt + dxi_p / math.sqrt(so.gp)
        else:
            signals_out[:, 1] = np.nan

    new = 0.5 * (new + _dag(new))
    new /= _trace_re(new)[:, None, None]
    return new


@dataclass(frozen=True)
class _FusedOps:
    x: np.ndarray
    p: np.ndarray
    col: np.ndarray          # diagonal part of K^dag, acts as column scaling
    k_off: np.ndarray | None  # off-diagonal part of K^dag
    xx: float                # weight of x rho x
    pp: float                # weight of p rho p
    xp: float                # weight of herm(-i x rho p)
    sx: float                # sqrt(gamma_x)
    sp: float                # sqrt(gamma_p), 0 if p is not measured
    fx: float                # 2 kappa_f / sqrt(gamma_x), 0 without x feedback
    fp: float                # 2 kappa_f / sqrt(gamma_p), 0 without p feedback


def _fused_ops(params: FeedbackParams, dim: int) -> _FusedOps:
    gen = generator(params, dim)
    k = k_coefficients(params)
    kd = gen.K.conj().T
    col = np.diag(kd).copy()
    k_off = kd - np.diag(col)
    so = _step_ops(params, dim)
    # c rho c^dag and c^dag rho c rewritten in x, p; (c + c^dag) = sqrt(2) x
    return _FusedOps(
        x=so.x,
        p=so.p,
        col=col,
        k_off=k_off if np.any(k_off) else None,
        xx=(k.k1 + k.k2) / 2 + 2 * k.k3,
        pp=(k.k1 + k.k2) / 2,
        xp=k.k1 - k.k2,
        sx=math.sqrt(so.gx),
        sp=math.sqrt(so.gp) if so.measure_p else 0.0,
        fx=2 * so.kf / math.sqrt(so.gx) if so.kf > 0 else 0.0,
        fp=2 * so.kf / math.sqrt(so.gp) if so.feedback_p else 0.0,
    )


def _fused_step(rho, fo: _FusedOps, dxi_x, dxi_p, dt, signals_out=None):
    """Same update as :func:`_step` after cancelling the ``<x> dt`` feedback terms.

    ``rho' = rho + dt L(rho) + B_x d xi_x + B_p d xi_p`` with ``L`` the
    ensemble generator; used for large batches.
    """
    X = _rmul(rho, fo.x)                       # rho x
    P = _rmul(rho, fo.p)                       # rho p
    mx = _trace_re(X)
    mp = _trace_re(P)
    Xd = _dag(X)                               # x rho
    Pd = _dag(P)
    xrx = _rmul(Xd, fo.x)
    prp = _rmul(Pd, fo.p)
    xrp = _rmul(Xd, fo.p)

    A = rho * (2 * dt * fo.col)[None, None, :]
    if fo.k_off is not None:
        A += (2 * dt) * _rmul(rho, fo.k_off)
    A -= (1j * fo.xp * dt) * xrp
    ax = fo.sx * dxi_x + 1j * fo.fp * dxi_p
    ap = fo.sp * dxi_p - 1j * fo.fx * dxi_x
    A += ax[:, None, None] * X
    A += ap[:, None, None] * P
    new = 0.5 * (A + _dag(A))
    new += (fo.xx * dt) * xrx
    new += (fo.pp * dt) * prp
    shift = fo.sx * mx * dxi_x + fo.sp * mp * dxi_p
    new += (1.0 - shift)[:, None, None] * rho

    if signals_out is not None:
        signals_out[:, 0] = mx * dt + (dxi_x / fo.sx if fo.sx > 0 else 0.0)
        signals_out[:, 1] = mp * dt + dxi_p / fo.sp if fo.sp > 0 else np.nan

    new /= _trace_re(new)[:, None, None]
    return new


@dataclass(frozen=True)
class _KrausOps:
    basis: np.ndarray        # (8, n*n): I, H, x, p, x^2, p^2, xp, px
    x: np.ndarray
    p: np.ndarray
    unitary: bool
    gx: float
    gp: float
    kf: float
    feedback_p: bool


def _kraus_ops(params: FeedbackParams, dim: int) -> _KrausOps:
    so = _step_ops(params, dim)
    x, p = so.x, so.p
    h = np.zeros((dim, dim), complex)
    if so.h_diag is not None:
        h = np.diag(so.h_diag).astype(complex)
    basis = np.stack([np.eye(dim, dtype=complex), h, x, p, x @ x, p @ p, x @ p, p @ x])
    return _KrausOps(
        basis=basis.reshape(8, dim * dim),
        x=x,
        p=p,
        unitary=so.h_diag is not None,
        gx=so.gx,
        gp=so.gp if so.measure_p else 0.0,
        kf=so.kf,
        feedback_p=so.feedback_p,
    )


def _kraus_step(rho, ko: _KrausOps, dxi_x, dxi_p, dt, signals_out=None):
    """Positivity-preserving step ``rho' = K rho K^dag / Tr``.

    ``K = U_f M`` with ``M`` the first-order measurement operator including
    the ``dy_j dy_k - delta_jk dt`` corrections, and ``U_f = 1 - i G - G^2/2``
    the feedback unitary for ``G = H_f dt``. Terms of order ``dt^(3/2)`` and
    higher in the product are dropped. The mean increment agrees with the
    ensemble generator to ``O(dt^2)``.
    """
    n = rho.shape[0]
    mx = np.real(np.einsum("ij,nji->n", ko.x, rho))
    mp = np.real(np.einsum("ij,nji->n", ko.p, rho))
    sgx, sgp = math.sqrt(ko.gx), math.sqrt(ko.gp)
    dyx = sgx * mx * dt + dxi_x
    dyp = sgp * mp * dt + dxi_p if ko.gp > 0 else np.zeros(n)
    a, b = sgx / 2, sgp / 2
    u = -ko.kf * dyx / sgx if ko.kf > 0 else np.zeros(n)
    v = ko.kf * dyp / sgp if ko.feedback_p else np.zeros(n)

    C = np.empty((n, 8), dtype=complex)
    C[:, 0] = 1.0
    C[:, 1] = -1j * dt if ko.unitary else 0.0
    C[:, 2] = a * dyx - 1j * v
    C[:, 3] = b * dyp - 1j * u
    C[:, 4] = ko.gx / 8 * (dyx**2 - 2 * dt) - 1j * a * v * dyx - 0.5 * v**2
    C[:, 5] = ko.gp / 8 * (dyp**2 - 2 * dt) - 1j * b * u * dyp - 0.5 * u**2
    cross = sgx * sgp / 8 * dyx * dyp - 0.5 * u * v
    C[:, 6] = cross - 1j * b * v * dyp
    C[:, 7] = cross - 1j * a * u * dyx
    K = (C @ ko.basis).reshape(rho.shape)

    new = np.matmul(np.matmul(K, rho), _dag(K))
    new = 0.5 * (new + _dag(new))
    new /= _trace_re(new)[:, None, None]

    if signals_out is not None:
        signals_out[:, 0] = dyx / sgx
        signals_out[:, 1] = dyp / sgp if ko.gp > 0 else np.nan
    return new


SCHEMES = ("euler", "kraus")


def _stepper(scheme: str, params: FeedbackParams, dim: int):
    if scheme == "euler":
        fo = _fused_ops(params, dim)
        return lambda rho, wx, wp, dt, buf=None: _fused_step(rho, fo, wx, wp, dt, buf)
    if scheme == "kraus":
        ko = _kraus_ops(params, dim)
        return lambda rho, wx, wp, dt, buf=None: _kraus_step(rho, ko, wx, wp, dt, buf)
    raise ValueError(f"scheme must be one of {SCHEMES}, got {scheme!r}")


def sme_step(
    rho,
    params: FeedbackParams,
    dxi_x,
    dxi_p,
    dt: float,
    *,
    check: bool = True,
    scheme: str = "euler",
):
    """One conditioned step for a single state or a stack of states.

    Parameters
    ----------
    rho : ndarray, shape ``(n, n)`` or ``(N, n, n)``
    dxi_x, dxi_p : float or ndarray of shape ``(N,)``
        Wiener increments of this step.
    check : bool
        Abort with :class:`InvariantViolation` if an eigenvalue of the result
        falls below -1e-6 (``dt`` too large).
    scheme : {"euler", "kraus"}
        ``euler`` applies the literal four-term update; ``kraus`` the
        positivity-preserving form.
    """
    rho = np.asarray(rho, dtype=complex)
    single = rho.ndim == 2
    batch = rho[None] if single else rho
    n = batch.shape[0]
    dx = np.broadcast_to(np.asarray(dxi_x, dtype=float), (n,))
    dp = np.broadcast_to(np.asarray(dxi_p, dtype=float), (n,))
    if scheme == "euler":
        out = _step(batch, _step_ops(params, rho.shape[-1]), dx, dp, float(dt))
    elif scheme == "kraus":
        out = _kraus_step(batch, _kraus_ops(params, rho.shape[-1]), dx, dp, float(dt))
    else:
        raise ValueError(f"scheme must be one of {SCHEMES}, got {scheme!r}")
    if check:
        lam = np.linalg.eigvalsh(out).min()
        if lam < POSITIVITY_ABORT:
            raise InvariantViolation(f"negative eigenvalue {lam:.3e} after SME step; reduce dt")
    return out[0] if single else out


@dataclass
class TrajectoryRecord:
    """Sampled conditioned observables of one trajectory.

    ``signals`` holds the measurement increments ``(xbar dt, pbar dt)`` of
    every step when requested; the ``p`` column is NaN if ``p`` is not
    measured.
    """

    times: np.ndarray
    observables: dict[str, np.ndarray]
    seed: int
    params: FeedbackParams
    dt: float
    dim: int
    signals: np.ndarray | None = None
    max_tail: float = 0.0

    def __getitem__(self, key: str) -> np.ndarray:
        return self.observables[key]


@dataclass
class BatchFailure:
    seed: int
    time: float
    reason: str


@dataclass
class BatchResult:
    records: list[TrajectoryRecord]
    failures: list[BatchFailure] = field(default_factory=list)


def _grid(t_final: float, dt: float, sample_every: int | None, n_samples: int):
    n_steps = int(round(t_final / dt))
    if n_steps < 1 or abs(n_steps * dt - t_final) > 1e-9 * max(1.0, t_final):
        raise ValueError("t_final must be a positive integer multiple of dt")
    if sample_every is None:
        sample_every = max(1, n_steps // max(1, n_samples - 1))
    sample_steps = np.arange(0, n_steps + 1, sample_every)
    if sample_steps[-1] != n_steps:
        sample_steps = np.append(sample_steps, n_steps)
    return n_steps, sample_steps


def run_batch(
    rho0: np.ndarray,
    params: FeedbackParams,
    t_final: float,
    dt: float,
    seeds,
    *,
    sample_every: int | None = None,
    n_samples: int = 101,
    check_every: int = 10,
    keep_signals: bool = False,
    scheme: str = "kraus",
) -> BatchResult:
    """Integrate one trajectory per seed, vectorised over the batch.

    A trajectory whose state loses positivity (checked every
    ``check_every`` steps and at every sample) or trips the hard truncation
    limit is dropped and reported in ``failures``. ``scheme="euler"`` uses
    the Euler update (rearranged so the ``<x> dt`` feedback terms cancel).
    """
    rho0 = np.asarray(rho0, dtype=complex)
    validate_density_matrix(rho0, hermitian_atol=1e-8, trace_atol=1e-8)
    dim = rho0.shape[0]
    seeds = [int(s) for s in seeds]
    n_steps, sample_steps = _grid(t_final, dt, sample_every, n_samples)
    step_fn = _stepper(scheme, params, dim)
    streams = [NoiseStream(s, dt) for s in seeds]
    N = len(seeds)

    active = np.arange(N)
    rho = np.broadcast_to(rho0, (N, dim, dim)).copy()
    n_samp = len(sample_steps)
    obs = {k: np.full((N, n_samp), np.nan) for k in REPORT_FIELDS}
    signals = np.full((N, n_steps, 2), np.nan) if keep_signals else None
    max_tail = np.zeros(N)
    failures: list[BatchFailure] = []

    def record(idx: int):
        vals = report_arrays(rho)
        for k in REPORT_FIELDS:
            obs[k][active, idx] = vals[k]

    record(0)
    next_sample = 1
    noise = None
    sig_buf = np.empty((N, 2)) if keep_signals else None
    for step in range(n_steps):
        j = step % NOISE_CHUNK
        if j == 0:
            m = min(NOISE_CHUNK, n_steps - step)
            noise = np.stack([s.draw(m) for s in streams], axis=1)  # (m, N, 2)
        w = noise[j, active]
        buf = sig_buf[: len(active)] if keep_signals else None
        rho = step_fn(rho, w[:, 0], w[:, 1], dt, buf)
        if keep_signals:
            signals[active, step] = buf

        at_sample = next_sample < n_samp and step + 1 == sample_steps[next_sample]
        bad = np.zeros(len(active), dtype=bool)
        reasons = [""] * len(active)
        if at_sample or (step + 1) % check_every == 0:
            lam = np.linalg.eigvalsh(rho).min(axis=-1)
            for i in np.flatnonzero(lam < POSITIVITY_ABORT):
                bad[i] = True
                reasons[i] = f"negative eigenvalue {lam[i]:.3e}"
        if at_sample:
            tail = tail_population(rho)
            max_tail[active] = np.maximum(max_tail[active], tail)
            for i in np.flatnonzero(tail > TRUNCATION_HARD):
                if not bad[i]:
                    bad[i] = True
                    reasons[i] = f"top-level population {tail[i]:.3e} > {TRUNCATION_HARD:g}"
        if bad.any():
            t_now = (step + 1) * dt
            for i in np.flatnonzero(bad):
                failures.append(BatchFailure(seeds[active[i]], t_now, reasons[i]))
            keep = ~bad
            active = active[keep]
            rho = rho[keep]
            if len(active) == 0:
                break
        if at_sample:
            record(next_sample)
            next_sample += 1

    if np.any(max_tail[active] > TRUNCATION_SOFT):
        warnings.warn(
            f"conditioned states exceeded top-level population {TRUNCATION_SOFT:g} "
            f"(max {max_tail[active].max():.3e}) at dim={dim}",
            TruncationWarning,
            stacklevel=2,
        )
    times = sample_steps * dt
    records = [
        TrajectoryRecord(
            times=times,
            observables={k: obs[k][i] for k in REPORT_FIELDS},
            seed=seeds[i],
            params=params,
            dt=dt,
            dim=dim,
            signals=signals[i] if keep_signals else None,
            max_tail=float(max_tail[i]),
        )
        for i in active
    ]
    failures.sort(key=lambda f: f.seed)
    return BatchResult(records, failures)


def run_trajectory(
    rho0: np.ndarray,
    params: FeedbackParams,
    t_final: float,
    dt: float,
    seed: int,
    *,
    sample_every: int | None = None,
    n_samples: int = 101,
    check_every: int = 10,
    keep_signals: bool = True,
    scheme: str = "kraus",
) -> TrajectoryRecord:
    """Single conditioned trajectory; bit-reproducible for fixed inputs."""
    res = run_batch(
        rho0, params, t_final, dt, [seed],
        sample_every=sample_every, n_samples=n_samples,
        check_every=check_every, keep_signals=keep_signals, scheme=scheme,
    )
    if res.failures:
        f = res.failures[0]
        exc = TruncationError if "population" in f.reason else InvariantViolation
        if exc is TruncationError:
            raise TruncationError(f"trajectory seed={f.seed}: {f.reason} (t = {f.time:.6g})")
        raise InvariantViolation(f"trajectory seed={f.seed}: {f.reason}", f.time)
    return res.records[0]


def _run_batch_job(args):
    rho0, params, t_final, dt, seeds, kwargs = args
    return run_batch(rho0, params, t_final, dt, seeds, **kwargs)


def run_ensemble(
    rho0: np.ndarray,
    params: FeedbackParams,
    t_final: float,
    dt: float,
    n_traj: int,
    seed_base: int,
    *,
    batch_size: int = 250,
    workers: int = 1,
    **kwargs,
) -> BatchResult:
    """Run ``n_traj`` trajectories seeded ``seed_base + index``.

    Trajectories are split into fixed batches of ``batch_size`` regardless of
    ``workers``, so results do not depend on the degree of parallelism.
    """
    if n_traj < 1:
        raise ValueError("n_traj must be >= 1")
    seeds = [seed_base + i for i in range(n_traj)]
    jobs = [
        (rho0, params, t_final, dt, seeds[i : i + batch_size], kwargs)
        for i in range(0, n_traj, batch_size)
    ]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_run_batch_job, jobs))
    else:
        parts = [_run_batch_job(j) for j in jobs]
    records = [r for part in parts for r in part.records]
    failures = [f for part in parts for f in part.failures]
    return BatchResult(records, failures)


@dataclass
class EnsembleAverage:
    times: np.ndarray
    mean: dict[str, np.ndarray]
    stderr: dict[str, np.ndarray]
    n: int


def ensemble_average(records: list[TrajectoryRecord]) -> EnsembleAverage:
    """Pointwise mean and standard error of the sampled observables."""
    if not records:
        raise ValueError("no trajectories to average")
    first = records[0]
    for r in records[1:]:
        if r.params != first.params or r.dt != first.dt or not np.array_equal(r.times, first.times):
            raise ValueError("records differ in params, dt or sample grid")
    n = len(records)
    mean, stderr = {}, {}
    for k in REPORT_FIELDS:
        vals = np.stack([r.observables[k] for r in records])
        mean[k] = vals.mean(axis=0)
        stderr[k] = vals.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.zeros_like(mean[k])
    return EnsembleAverage(first.times.copy(), mean, stderr, n)
