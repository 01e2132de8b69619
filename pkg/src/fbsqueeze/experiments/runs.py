"""Experiment drivers: sweeps, relaxation runs, trajectory ensembles.

Every driver writes CSV data files plus ``manifest.json`` into an output
directory. The manifest echoes the resolved spec, so :func:`rerun` can
rebuild the same outputs byte for byte.
"""

from __future__ import annotations

import json
import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import InvariantViolation, NoSteadyStateError, TruncationError, TruncationWarning
from ..master_eq import FeedbackParams, Variant, evolve, steady_state
from ..moments import (
    MomentState,
    closed_form,
    extended_moments,
    extended_steady_state,
    moment_solution,
    single_observable_moments,
)
from ..sme import ensemble_average, run_ensemble
from ..states import (
    REPORT_FIELDS,
    TRUNCATION_HARD,
    TRUNCATION_SOFT,
    report,
    tail_population,
    thermal_state,
)
from .io import engine_versions, write_columns, write_grid, write_json
from .specs import MomentsSpec, RelaxationSpec, SteadySpec, SweepSpec, TrajectorySpec

__all__ = [
    "RunResult",
    "compare_outputs",
    "moments_series",
    "relaxation",
    "rerun",
    "steady_point",
    "sweep",
    "trajectories",
]

MANIFEST = "manifest.json"
SWEEP_QUANTITIES = ("r_x", "r_p", "product", "purity")
TRAJ_COLUMNS = ("mean_x", "mean_p", "var_x", "var_p", "purity")
# conditioned averages of these equal unconditioned expectations
Z_FIELDS = ("mean_x", "mean_p", "mean_x2", "mean_p2")
SPREAD_FIELDS = ("var_x", "var_p", "purity")


@dataclass
class RunResult:
    """Output of one driver call.

    ``exit_code`` follows the CLI convention: 0 clean, 2 an integrator
    aborted, 3 the truncation guard failed hard.
    """

    out_dir: Path
    manifest: dict
    files: list[Path] = field(default_factory=list)
    exit_code: int = 0


# shared plumbing


def _prepare(out) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _truncation(max_tail: float, hard_failures: int = 0) -> dict:
    if hard_failures or max_tail > TRUNCATION_HARD:
        status = "hard"
    elif max_tail > TRUNCATION_SOFT:
        status = "soft"
    else:
        status = "ok"
    return {
        "status": status,
        "max_tail_population": max_tail,
        "soft_limit": TRUNCATION_SOFT,
        "hard_limit": TRUNCATION_HARD,
        "hard_failures": hard_failures,
    }


def _finish(kind, spec_dict, out, files, t0, *, config, dim, truncation, seeds=None,
            notes=(), results=None, exit_code=0) -> RunResult:
    manifest = {
        "kind": kind,
        "spec": spec_dict,
        "config": config or {},
        "versions": engine_versions(),
        "seeds": seeds or {},
        "dim": dim,
        "truncation": truncation,
        "notes": list(notes),
        "results": results or {},
        "wall_clock_s": time.perf_counter() - t0,
        "files": sorted(str(Path(f).relative_to(out)) for f in files),
    }
    write_json(out / MANIFEST, manifest)
    return RunResult(out, manifest, list(files), exit_code)


def _exit_code(exc: Exception) -> int:
    return 3 if isinstance(exc, TruncationError) else 2


def _moment_report(m: MomentState) -> dict[str, np.ndarray]:
    """Report fields of a Gaussian state with moments ``m``."""
    var_x, var_p = m.var_x, m.var_p
    cov = 0.5 * np.asarray(m.m_sym) - np.asarray(m.mean_x) * np.asarray(m.mean_p)
    det = var_x * var_p - cov**2
    with np.errstate(invalid="ignore", divide="ignore"):
        pur = np.where(det > 0, 0.5 / np.sqrt(np.where(det > 0, det, 1.0)), np.nan)
    return {
        "mean_x": np.asarray(m.mean_x, dtype=float),
        "mean_p": np.asarray(m.mean_p, dtype=float),
        "var_x": np.asarray(var_x, dtype=float),
        "var_p": np.asarray(var_p, dtype=float),
        "mean_x2": np.asarray(m.m_x2, dtype=float),
        "mean_p2": np.asarray(m.m_p2, dtype=float),
        "sym_xp": np.asarray(m.m_sym, dtype=float),
        "purity": pur,
        "r_x": 2.0 * np.asarray(m.m_x2, dtype=float),
        "r_p": 2.0 * np.asarray(m.m_p2, dtype=float),
        "uncertainty_product": np.asarray(var_x * var_p, dtype=float),
    }


def _steady_moments(params: FeedbackParams, engine: str) -> MomentState:
    if engine == "moments":
        sol = moment_solution(params, MomentState(0.0, 0.0, 0.0, 0.0))
        return MomentState(0.0, 0.0, sol.x2_ss, sol.p2_ss, 0.0)
    return extended_steady_state(params)


# sweep


def _sweep_point(spec: SweepSpec, gx: float, gp: float):
    """``(values, dim, tail, note)`` for one grid point; failures give NaN and a note."""
    params = FeedbackParams(gx, gp, spec.kappa_f, omega=spec.omega,
                            include_unitary=spec.include_unitary)
    try:
        if spec.engine == "full":
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", TruncationWarning)
                rho = steady_state(params, spec.dim)
            r = report(rho).as_dict()
            dim, tail = rho.shape[0], float(tail_population(rho))
        else:
            m = _moment_report(_steady_moments(params, spec.engine))
            r = {k: float(v) for k, v in m.items()}
            dim, tail = 0, 0.0
    except (NoSteadyStateError, InvariantViolation, TruncationError, np.linalg.LinAlgError) as exc:
        return [math.nan] * 4, 0, 0.0, (type(exc).__name__, str(exc))
    vals = [r["r_x"], r["r_p"], r["uncertainty_product"], r["purity"]]
    note = None
    if not all(math.isfinite(v) for v in vals):
        note = ("NonFinite", "non-finite moment (state not physical at this point)")
    return vals, dim, tail, note


def _sweep_row(args):
    spec, gx, gps = args
    return [_sweep_point(spec, gx, gp) for gp in gps]


def sweep(spec: SweepSpec, out, *, config: dict | None = None) -> RunResult:
    """Steady-state grids of ``r_x``, ``r_p``, ``var_x var_p`` and purity.

    Rows run over ``gamma_x / kappa_f`` and columns over ``gamma_p / kappa_f``.
    """
    t0 = time.perf_counter()
    out = _prepare(out)
    xs, ps = spec.x_axis, spec.p_axis
    jobs = [(spec, spec.kappa_f * gx, [spec.kappa_f * gp for gp in ps]) for gx in xs]
    if spec.workers > 1:
        with ProcessPoolExecutor(max_workers=spec.workers) as pool:
            rows = list(pool.map(_sweep_row, jobs))
    else:
        rows = [_sweep_row(j) for j in jobs]

    grids = np.full((4, len(xs), len(ps)), np.nan)
    dims = np.zeros((len(xs), len(ps)), dtype=int)
    max_tail = 0.0
    notes = []
    failed: dict[str, int] = {}
    for i, row in enumerate(rows):
        for j, (vals, dim, tail, note) in enumerate(row):
            grids[:, i, j] = vals
            dims[i, j] = dim
            max_tail = max(max_tail, tail)
            if note:
                kind, reason = note
                failed[kind] = failed.get(kind, 0) + 1
                notes.append({"gamma_x/kappa_f": float(xs[i]), "gamma_p/kappa_f": float(ps[j]),
                              "reason": f"{kind}: {reason}"})

    corner = "gamma_x/kappa_f \\ gamma_p/kappa_f"
    files = [write_grid(out / f"{q}.csv", xs, ps, grids[k], corner)
             for k, q in enumerate(SWEEP_QUANTITIES)]
    if spec.engine == "full":
        files.append(write_grid(out / "dim.csv", xs, ps, dims, corner))
    finite = grids[2][np.isfinite(grids[2])]
    results = {"nan_cells": int(np.isnan(grids).any(axis=0).sum()), "failed_cells": failed}
    if finite.size:
        i, j = np.unravel_index(np.nanargmin(grids[2]), grids[2].shape)
        results["min_product"] = {"value": grids[2][i, j], "gamma_x/kappa_f": xs[i],
                                  "gamma_p/kappa_f": ps[j]}
    used = dims[dims > 0]
    return _finish(
        "sweep", spec.to_dict(), out, files, t0, config=config,
        dim={"min": int(used.min()), "max": int(used.max())} if used.size else None,
        truncation=_truncation(max_tail, failed.get("TruncationError", 0)), notes=notes,
        results=results, exit_code=_cells_exit_code(failed),
    )


def _cells_exit_code(failed: dict[str, int]) -> int:
    if failed.get("TruncationError"):
        return 3
    return 2 if failed else 0


# relaxation


def _settling_time(t, y, target, frac=0.01):
    """First time after which ``|y - target|`` stays within ``frac`` of the initial gap."""
    gap = np.abs(np.asarray(y) - target)
    tol = frac * gap[0]
    outside = np.flatnonzero(gap > tol)
    if outside.size == 0:
        return float(t[0])
    k = outside[-1] + 1
    return float(t[k]) if k < len(t) else math.nan


def relaxation(spec: RelaxationSpec, out, *, config: dict | None = None) -> RunResult:
    """``var_x(t)`` and purity from thermal starts, one CSV per ``(beta, kappa_f)``."""
    t0 = time.perf_counter()
    out = _prepare(out)
    times = spec.times()
    files, series, notes = [], [], []
    max_tail, hard, exit_code = 0.0, 0, 0
    for beta in spec.betas:
        for kappa in spec.kappas:
            params = spec.params(kappa)
            entry = {"beta": beta, "kappa_f": kappa}
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", TruncationWarning)
                    rho0 = thermal_state(spec.dim, beta, spec.omega)
                    ev = evolve(rho0, params, spec.t_final, spec.dt, times=times)
                    rho_ss = steady_state(params, spec.dim)
            except (InvariantViolation, TruncationError) as exc:
                hard += isinstance(exc, TruncationError)
                exit_code = exit_code or _exit_code(exc)
                entry["error"] = f"{type(exc).__name__}: {exc}"
                notes.append(entry)
                series.append(entry)
                continue
            rep = ev.reports()
            ss = report(rho_ss)
            name = f"relax_beta{beta:g}_kappa{kappa:g}.csv"
            files.append(write_columns(out / name,
                                       {"t": times, "var_x": rep["var_x"],
                                        "purity": rep["purity"]}))
            max_tail = max(max_tail, ev.max_tail)
            entry.update({
                "file": name,
                "step": ev.step,
                "max_tail_population": ev.max_tail,
                "var_x_initial": rep["var_x"][0],
                "var_x_final": rep["var_x"][-1],
                "purity_final": rep["purity"][-1],
                "var_x_steady": ss.var_x,
                "purity_steady": ss.purity,
                "settling_time_var_x": _settling_time(times, rep["var_x"], ss.var_x),
            })
            series.append(entry)
    return _finish(
        "relax", spec.to_dict(), out, files, t0, config=config, dim=spec.dim,
        truncation=_truncation(max_tail, hard), notes=notes, results={"series": series},
        exit_code=exit_code,
    )


# trajectories


def _zscores(mean, stderr, det):
    diff = mean - det
    floor = 1e-12 * (1.0 + np.abs(det))
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(stderr > floor, diff / np.where(stderr > floor, stderr, 1.0),
                     np.where(np.abs(diff) <= floor, 0.0, np.inf * np.sign(diff)))
    return z


def trajectories(spec: TrajectorySpec, out, *, config: dict | None = None) -> RunResult:
    """Conditioned ensemble from a thermal start, compared with the master equation."""
    t0 = time.perf_counter()
    out = _prepare(out)
    tdir = out / "traj"
    tdir.mkdir(exist_ok=True)
    rho0 = thermal_state(spec.dim, spec.beta, spec.params.omega)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", TruncationWarning)
        res = run_ensemble(
            rho0, spec.params, spec.t_final, spec.dt, spec.n_traj, spec.seed_base,
            batch_size=spec.batch_size, workers=spec.workers, n_samples=spec.n_samples,
            keep_signals=spec.keep_signals, scheme=spec.scheme,
        )
    notes = [str(w.message) for w in caught if issubclass(w.category, TruncationWarning)]

    files = []
    for rec in res.records:
        stem = f"traj_{rec.seed:06d}"
        files.append(write_columns(tdir / f"{stem}.csv",
                                   {"t": rec.times, **{k: rec[k] for k in TRAJ_COLUMNS}}))
        sidecar = {"seed": rec.seed, "params": rec.params.as_dict(), "dt": rec.dt,
                   "dim": rec.dim, "scheme": spec.scheme, "max_tail_population": rec.max_tail}
        if rec.signals is not None:
            n = len(rec.signals)
            sig = {"t": np.arange(1, n + 1) * rec.dt,
                   "xbar_dt": rec.signals[:, 0], "pbar_dt": rec.signals[:, 1]}
            files.append(write_columns(tdir / f"{stem}_signals.csv", sig))
            sidecar["signals"] = f"{stem}_signals.csv"
        files.append(write_json(tdir / f"{stem}.json", sidecar))

    failures = [{"seed": f.seed, "time": f.time, "reason": f.reason} for f in res.failures]
    hard = sum("population" in f.reason for f in res.failures)
    results = {"n_used": len(res.records), "n_failed": len(failures), "failures": failures}
    exit_code = 0
    max_tail = max((r.max_tail for r in res.records), default=0.0)
    if res.records:
        avg = ensemble_average(res.records)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", TruncationWarning)
            det = evolve(rho0, spec.params, spec.t_final, times=avg.times).reports()
        cols = {"t": avg.times}
        z_summary = {}
        for k in Z_FIELDS:
            z = _zscores(avg.mean[k], avg.stderr[k], det[k])
            cols.update({k: avg.mean[k], f"{k}_stderr": avg.stderr[k],
                         f"{k}_det": det[k], f"{k}_z": z})
            z_summary[k] = float(np.max(np.abs(z[1:]))) if len(z) > 1 else 0.0
        for k in SPREAD_FIELDS:
            cols.update({k: avg.mean[k], f"{k}_stderr": avg.stderr[k]})
        files.append(write_columns(out / "ensemble_mean.csv", cols))
        results["max_abs_z"] = z_summary
        results["primary"] = "mean_x2"
    else:
        exit_code = 3 if hard else 2
    return _finish(
        "traj", spec.to_dict(), out, files, t0, config=config, dim=spec.dim,
        seeds={"seed_base": spec.seed_base, "n_traj": spec.n_traj,
               "rule": "seed_base + trajectory index"},
        truncation=_truncation(max_tail, hard), notes=notes, results=results,
        exit_code=exit_code,
    )


# single point and moment series


def steady_point(spec: SteadySpec, out, *, config: dict | None = None) -> RunResult:
    """One steady-state report written as ``steady.csv``."""
    t0 = time.perf_counter()
    out = _prepare(out)
    if spec.engine == "full":
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", TruncationWarning)
            rho = steady_state(spec.params, spec.dim)
        r = report(rho).as_dict()
        dim, tail = rho.shape[0], float(tail_population(rho))
    else:
        m = _moment_report(_steady_moments(spec.params, spec.engine))
        r = {k: float(v) for k, v in m.items()}
        dim, tail = None, 0.0
    f = write_columns(out / "steady.csv", {k: [r[k]] for k in REPORT_FIELDS})
    return _finish("steady", spec.to_dict(), out, [f], t0, config=config, dim=dim,
                   truncation=_truncation(tail), results={"report": r})


def _initial_moments(spec: MomentsSpec) -> MomentState:
    v = 0.5 / math.tanh(0.5 * spec.beta * spec.params.omega)
    return MomentState(spec.x0, spec.p0, v + spec.x0**2, v + spec.p0**2, 2 * spec.x0 * spec.p0)


def moments_series(spec: MomentsSpec, out, *, config: dict | None = None) -> RunResult:
    """Closed-form or moment-ODE time series written as ``moments.csv``."""
    t0 = time.perf_counter()
    out = _prepare(out)
    t = spec.times()
    m0 = _initial_moments(spec)
    if spec.engine == "extended":
        m = extended_moments(spec.params, m0, t)
    elif spec.params.variant is Variant.DUAL:
        m = closed_form(spec.params, m0, t)
    elif spec.params.variant is Variant.SINGLE:
        m = single_observable_moments(spec.params, m0, t)
    else:
        raise ValueError("no closed form for measurement_only; use engine 'extended'")
    r = _moment_report(m)
    f = write_columns(out / "moments.csv", {"t": t, **{k: r[k] for k in REPORT_FIELDS}})
    return _finish("moments", spec.to_dict(), out, [f], t0, config=config, dim=None,
                   truncation=_truncation(0.0),
                   results={"final": {k: float(r[k][-1]) for k in REPORT_FIELDS}})


# reproduction

KINDS = {
    "sweep": (SweepSpec, sweep),
    "relax": (RelaxationSpec, relaxation),
    "traj": (TrajectorySpec, trajectories),
    "steady": (SteadySpec, steady_point),
    "moments": (MomentsSpec, moments_series),
}


def rerun(manifest_path, out) -> RunResult:
    """Run again from a manifest's spec echo into ``out``."""
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / MANIFEST
    m = json.loads(manifest_path.read_text())
    try:
        spec_cls, fn = KINDS[m["kind"]]
    except KeyError:
        raise ValueError(f"unknown run kind {m.get('kind')!r} in {manifest_path}") from None
    return fn(spec_cls(**m["spec"]), out, config=m.get("config"))


def compare_outputs(a, b) -> list[str]:
    """CSV files listed in ``a``'s manifest whose bytes differ in ``b``."""
    a, b = Path(a), Path(b)
    listed = json.loads((a / MANIFEST).read_text())["files"]
    bad = []
    for rel in listed:
        if not rel.endswith(".csv"):
            continue
        pb = b / rel
        if not pb.exists() or (a / rel).read_bytes() != pb.read_bytes():
            bad.append(rel)
    return bad
