"""Command-line entry point: ``fbsqueeze {sweep,relax,traj,steady,moments,rerun}``.

Settings resolve as spec defaults, then ``--config FILE``, then flags.
Exit codes: 0 success, 1 invalid input, 2 numerical failure, 3 truncation
guard hard failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .errors import InvariantViolation, TruncationError
from .experiments import runs
from .experiments.io import read_config
from .experiments.specs import (
    ENGINES,
    MomentsSpec,
    RelaxationSpec,
    SteadySpec,
    SweepSpec,
    TrajectorySpec,
)
from .master_eq import FeedbackParams
from .sme import SCHEMES

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_TRUNCATION = 0, 1, 2, 3

VARIANTS = {
    "dual": "dual_feedback",
    "single": "single_observable",
    "measure-only": "measurement_only",
}


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with code 1 instead of argparse's 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def _bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _floats(text: str) -> tuple[float, ...]:
    vals = tuple(float(v) for v in str(text).split(",") if v.strip())
    if not vals:
        raise ValueError("empty list")
    return vals


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise ValueError(f"expected a positive integer, got {text!r}")
    return v


def _optional_int(text: str):
    return None if str(text).strip().lower() in ("", "none", "auto") else _positive_int(text)


def _variant(text: str) -> str:
    if text in VARIANTS:
        return VARIANTS[text]
    if text in VARIANTS.values():
        return text
    raise ValueError(f"variant must be one of {sorted(VARIANTS)}, got {text!r}")


def _argtype(fn, name):
    def conv(text):
        try:
            return fn(text)
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from None

    conv.__name__ = name
    return conv


# (flag, dest, converter, help); converters double as config-file parsers
MODEL_FLAGS = [
    ("--gamma-x", "gamma_x", float, "x measurement strength"),
    ("--gamma-p", "gamma_p", float, "p measurement strength"),
    ("--kappa-f", "kappa_f", _floats, "feedback strength (comma list for relax)"),
    ("--omega", "omega", float, "oscillator frequency"),
    ("--variant", "variant", _variant, "dual, single or measure-only"),
]
COMMON_FLAGS = [
    ("--dim", "dim", _optional_int, "Fock dimension, or 'auto' where the guard can choose"),
    ("--engine", "engine", str, f"one of {ENGINES}"),
    ("--beta", "beta", _floats, "inverse temperature of the thermal start (comma list for relax)"),
    ("--dt", "dt", float, "time step"),
    ("--t-final", "t_final", float, "end time"),
    ("--n-traj", "n_traj", _positive_int, "number of trajectories"),
    ("--seed", "seed", int, "seed of the first trajectory"),
    ("--workers", "workers", _positive_int, "parallel worker processes"),
]
EXTRA_FLAGS = {
    "sweep": [
        ("--grid-min", "grid_min", float, "smallest gamma/kappa_f on both axes"),
        ("--grid-max", "grid_max", float, "largest gamma/kappa_f on both axes"),
        ("--n-points", "n_points", _positive_int, "points per axis"),
        ("--spacing", "spacing", str, "log or linear"),
    ],
    "relax": [("--sample-dt", "sample_dt", float, "output sampling interval")],
    "traj": [
        ("--n-samples", "n_samples", _positive_int, "sample times including t=0"),
        ("--batch-size", "batch_size", _positive_int, "trajectories per vectorised batch"),
        ("--scheme", "scheme", str, f"one of {SCHEMES}"),
    ],
    "moments": [
        ("--x0", "x0", float, "initial <x>"),
        ("--p0", "p0", float, "initial <p>"),
        ("--n-samples", "n_samples", _positive_int, "number of output times"),
    ],
}
BOOL_FLAGS = {
    "unitary": "include the free-oscillation term",
    "signals": "store per-step measurement signals (traj)",
}

COMMANDS = {
    "sweep": "steady-state grids over gamma_x/kappa_f and gamma_p/kappa_f",
    "relax": "relaxation of var_x and purity from thermal starts",
    "traj": "conditioned trajectory ensemble compared with the master equation",
    "steady": "single-point steady-state report",
    "moments": "closed-form or moment-ODE time series",
}


def _flag_table(cmd: str):
    return MODEL_FLAGS + COMMON_FLAGS + EXTRA_FLAGS.get(cmd, [])


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fbsqueeze", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {_version()}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for cmd, help_text in COMMANDS.items():
        p = sub.add_parser(cmd, help=help_text, description=help_text)
        for flag, dest, conv, h in _flag_table(cmd):
            p.add_argument(flag, dest=dest, type=_argtype(conv, dest), default=None, help=h)
        for dest, h in BOOL_FLAGS.items():
            p.add_argument(f"--{dest}", dest=dest, action=argparse.BooleanOptionalAction,
                           default=None, help=h)
        p.add_argument("--out", type=Path, default=None, help="output directory")
        p.add_argument("--config", type=Path, default=None, help="flat key = value file")
    p = sub.add_parser("rerun", help="repeat a run from its manifest and compare CSV bytes")
    p.add_argument("manifest", type=Path, help="manifest.json or its directory")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    return parser


def _version() -> str:
    from . import __version__

    return __version__


def merge_settings(cmd: str, args: argparse.Namespace) -> dict:
    """Config-file values overridden by explicitly given flags."""
    table = {dest: conv for _, dest, conv, _ in _flag_table(cmd)}
    table.update({dest: _bool for dest in BOOL_FLAGS})
    merged: dict = {}
    if args.config is not None:
        for key, text in read_config(args.config).items():
            if key == "out":
                merged["out"] = Path(text)
                continue
            if key not in table:
                raise ValueError(f"{args.config}: unknown key {key!r} for '{cmd}'")
            try:
                merged[key] = table[key](text)
            except ValueError as exc:
                raise ValueError(f"{args.config}: {key}: {exc}") from None
    for key in list(table) + ["out"]:
        val = getattr(args, key, None)
        if val is not None:
            merged[key] = val
    return merged


def _single(settings: dict, key: str):
    vals = settings.get(key)
    if vals is None:
        return None
    if len(vals) != 1:
        raise ValueError(f"--{key.replace('_', '-')} takes a single value for this command")
    return vals[0]


def _params(settings: dict, default: FeedbackParams) -> FeedbackParams:
    d = default.as_dict()
    for key in ("gamma_x", "gamma_p", "omega", "variant"):
        if key in settings:
            d[key] = settings[key]
    kf = _single(settings, "kappa_f")
    if kf is not None:
        d["kappa_f"] = kf
    if "unitary" in settings:
        d["include_unitary"] = settings["unitary"]
    return FeedbackParams(**d)


def _reject(settings: dict, cmd: str, allowed: set) -> None:
    extra = sorted(set(settings) - allowed - {"out"})
    if extra:
        flags = ", ".join("--" + k.replace("_", "-") for k in extra)
        raise ValueError(f"'{cmd}' does not use {flags}")


def build_spec(cmd: str, settings: dict):
    """Turn merged settings into the run spec of ``cmd``."""
    s = settings
    if cmd == "sweep":
        _reject(s, cmd, {"kappa_f", "omega", "unitary", "engine", "dim", "workers",
                         "grid_min", "grid_max", "n_points", "spacing"})
        kw = {}
        if "grid_min" in s:
            kw["x_min"] = kw["p_min"] = s["grid_min"]
        if "grid_max" in s:
            kw["x_max"] = kw["p_max"] = s["grid_max"]
        if "n_points" in s:
            kw["n_x"] = kw["n_p"] = s["n_points"]
        for src, dst in (("spacing", "spacing"), ("engine", "engine"), ("omega", "omega"),
                         ("dim", "dim"), ("workers", "workers"), ("unitary", "include_unitary")):
            if src in s:
                kw[dst] = s[src]
        kf = _single(s, "kappa_f")
        if kf is not None:
            kw["kappa_f"] = kf
        return SweepSpec(**kw)
    if cmd == "relax":
        _reject(s, cmd, {"gamma_x", "gamma_p", "kappa_f", "omega", "unitary", "beta", "dim",
                         "dt", "t_final", "sample_dt"})
        kw = {}
        if "kappa_f" in s:
            kw["kappas"] = s["kappa_f"]
        if "beta" in s:
            kw["betas"] = s["beta"]
        for src, dst in (("gamma_x", "gamma_x"), ("gamma_p", "gamma_p"), ("omega", "omega"),
                         ("unitary", "include_unitary"), ("dim", "dim"), ("dt", "dt"),
                         ("t_final", "t_final"), ("sample_dt", "sample_dt")):
            if src in s:
                kw[dst] = s[src]
        if kw.get("dim", 1) is None:
            raise ValueError("relax needs a fixed --dim")
        return RelaxationSpec(**kw)
    if cmd == "traj":
        _reject(s, cmd, {"gamma_x", "gamma_p", "kappa_f", "omega", "unitary", "variant", "beta",
                         "dim", "dt", "t_final", "n_traj", "seed", "workers", "n_samples",
                         "batch_size", "scheme", "signals"})
        kw = {"params": _params(s, TrajectorySpec().params)}
        beta = _single(s, "beta")
        if beta is not None:
            kw["beta"] = beta
        for src, dst in (("dim", "dim"), ("dt", "dt"), ("t_final", "t_final"),
                         ("n_traj", "n_traj"), ("seed", "seed_base"), ("workers", "workers"),
                         ("n_samples", "n_samples"), ("batch_size", "batch_size"),
                         ("scheme", "scheme"), ("signals", "keep_signals")):
            if src in s:
                kw[dst] = s[src]
        if kw.get("dim", 1) is None:
            raise ValueError("traj needs a fixed --dim")
        return TrajectorySpec(**kw)
    if cmd == "steady":
        _reject(s, cmd, {"gamma_x", "gamma_p", "kappa_f", "omega", "unitary", "variant",
                         "engine", "dim"})
        kw = {"params": _params(s, SteadySpec().params)}
        for key in ("engine", "dim"):
            if key in s:
                kw[key] = s[key]
        return SteadySpec(**kw)
    if cmd == "moments":
        _reject(s, cmd, {"gamma_x", "gamma_p", "kappa_f", "omega", "unitary", "variant",
                         "engine", "beta", "t_final", "x0", "p0", "n_samples"})
        kw = {"params": _params(s, MomentsSpec().params)}
        beta = _single(s, "beta")
        if beta is not None:
            kw["beta"] = beta
        for key in ("engine", "t_final", "x0", "p0", "n_samples"):
            if key in s:
                kw[key] = s[key]
        return MomentsSpec(**kw)
    raise ValueError(f"unknown command {cmd!r}")


DRIVERS = {
    "sweep": runs.sweep,
    "relax": runs.relaxation,
    "traj": runs.trajectories,
    "steady": runs.steady_point,
    "moments": runs.moments_series,
}


def _echo(settings: dict) -> dict:
    return {k: (str(v) if isinstance(v, Path) else list(v) if isinstance(v, tuple) else v)
            for k, v in sorted(settings.items())}


def _summary(res: runs.RunResult) -> str:
    m = res.manifest
    lines = [f"{m['kind']}: wrote {len(m['files'])} file(s) + manifest to {res.out_dir}",
             f"truncation: {m['truncation']['status']} "
             f"(max tail {m['truncation']['max_tail_population']:.3g})"]
    r = m["results"]
    if m["kind"] == "sweep" and "min_product" in r:
        mp = r["min_product"]
        lines.append(f"min var_x*var_p = {mp['value']:.6g} at gamma_x/kappa_f = "
                     f"{mp['gamma_x/kappa_f']:.4g}, gamma_p/kappa_f = {mp['gamma_p/kappa_f']:.4g}")
    elif m["kind"] == "relax":
        for s in r["series"]:
            if "error" in s:
                lines.append(f"beta={s['beta']:g} kappa_f={s['kappa_f']:g}: {s['error']}")
            else:
                lines.append(f"beta={s['beta']:g} kappa_f={s['kappa_f']:g}: "
                             f"var_x -> {s['var_x_final']:.6g}, purity -> {s['purity_final']:.6g}")
    elif m["kind"] == "traj":
        lines.append(f"trajectories used {r['n_used']}, failed {r['n_failed']}")
        if "max_abs_z" in r:
            lines.append(f"max |z| on <x^2> vs master equation: {r['max_abs_z']['mean_x2']:.3g}")
    elif m["kind"] == "steady":
        lines.extend(f"{k} = {v:.10g}" for k, v in r["report"].items())
    elif m["kind"] == "moments":
        lines.extend(f"{k}(t_final) = {v:.10g}" for k, v in r["final"].items())
    return "\n".join(lines)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "rerun":
            res = runs.rerun(args.manifest, args.out)
            src = args.manifest if args.manifest.is_dir() else args.manifest.parent
            diff = runs.compare_outputs(src, args.out)
            print(_summary(res))
            if diff:
                print(f"rerun differs in {len(diff)} CSV file(s): {', '.join(diff)}",
                      file=sys.stderr)
                return EXIT_NUMERIC
            print("rerun: all CSV outputs byte-identical")
            return res.exit_code
        settings = merge_settings(args.command, args)
        spec = build_spec(args.command, settings)
        out = settings.get("out", Path("runs") / args.command)
        config = _echo(settings)
        if args.config is not None:
            config["config_file"] = str(args.config)
        res = DRIVERS[args.command](spec, out, config=config)
        print(_summary(res))
        for note in res.manifest["notes"]:
            print(f"note: {note}", file=sys.stderr)
        return res.exit_code
    except TruncationError as exc:
        print(f"truncation guard: {exc}", file=sys.stderr)
        return EXIT_TRUNCATION
    except InvariantViolation as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
