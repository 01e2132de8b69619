"""Run specifications for the experiment drivers."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ..master_eq import FeedbackParams
from ..sme import SCHEMES

__all__ = [
    "ENGINES",
    "MomentsSpec",
    "RelaxationSpec",
    "SteadySpec",
    "SweepSpec",
    "TrajectorySpec",
]

ENGINES = ("full", "moments", "extended")


@dataclass(frozen=True)
class SweepSpec:
    """Grid over ``gamma_x / kappa_f`` (rows) and ``gamma_p / kappa_f`` (columns).

    ``engine`` selects the full master-equation steady state (``full``),
    the closed-form moments without free oscillation (``moments``) or the
    moment ODE with free oscillation (``extended``).
    """

    x_min: float = 0.25
    x_max: float = 16.0
    p_min: float = 0.25
    p_max: float = 16.0
    n_x: int = 30
    n_p: int = 30
    spacing: str = "log"
    kappa_f: float = 1.0
    include_unitary: bool = False
    engine: str = "moments"
    omega: float = 1.0
    dim: int | None = None
    workers: int = 1

    def __post_init__(self):
        if self.n_x < 2 or self.n_p < 2:
            raise ValueError("each axis needs at least 2 points")
        if not (0 < self.x_min < self.x_max and 0 < self.p_min < self.p_max):
            raise ValueError("axis ranges must satisfy 0 < min < max")
        if self.spacing not in ("linear", "log"):
            raise ValueError(f"spacing must be 'linear' or 'log', got {self.spacing!r}")
        if not self.kappa_f > 0:
            raise ValueError("kappa_f must be positive")
        if self.engine not in ENGINES:
            raise ValueError(f"engine must be one of {ENGINES}, got {self.engine!r}")
        if self.engine == "moments" and self.include_unitary:
            raise ValueError("the 'moments' engine has no free-oscillation term; use 'extended'")

    def axis(self, lo: float, hi: float, n: int) -> np.ndarray:
        return np.geomspace(lo, hi, n) if self.spacing == "log" else np.linspace(lo, hi, n)

    @property
    def x_axis(self) -> np.ndarray:
        return self.axis(self.x_min, self.x_max, self.n_x)

    @property
    def p_axis(self) -> np.ndarray:
        return self.axis(self.p_min, self.p_max, self.n_p)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class RelaxationSpec:
    """Thermal starts relaxing under dual feedback, one series per ``(beta, kappa_f)``."""

    betas: tuple[float, ...] = (1.0, 2.0)
    kappas: tuple[float, ...] = (1.0, 2.0, 3.0)
    gamma_x: float = 9.0
    gamma_p: float = 4.0
    omega: float = 1.0
    include_unitary: bool = True
    t_final: float = 10.0
    sample_dt: float = 0.02
    dim: int = 40
    dt: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        object.__setattr__(self, "kappas", tuple(float(k) for k in self.kappas))
        if not self.betas or not self.kappas:
            raise ValueError("need at least one beta and one kappa_f")
        if any(b <= 0 for b in self.betas):
            raise ValueError("beta must be positive")
        if any(k <= 0 for k in self.kappas):
            raise ValueError("kappa_f must be positive")
        if not self.t_final > 0 or not self.sample_dt > 0:
            raise ValueError("t_final and sample_dt must be positive")

    def times(self) -> np.ndarray:
        n = max(1, math.ceil(self.t_final / self.sample_dt - 1e-9))
        return np.linspace(0.0, self.t_final, n + 1)

    def params(self, kappa_f: float) -> FeedbackParams:
        return FeedbackParams(self.gamma_x, self.gamma_p, kappa_f, omega=self.omega,
                              include_unitary=self.include_unitary)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class TrajectorySpec:
    """Ensemble of conditioned trajectories from a thermal start."""

    params: FeedbackParams = field(
        default_factory=lambda: FeedbackParams(9.0, 4.0, 3.0, include_unitary=False)
    )
    n_traj: int = 100
    t_final: float = 3.0
    dt: float = 1e-3
    seed_base: int = 0
    beta: float = 2.0
    dim: int = 14
    n_samples: int = 11
    workers: int = 1
    batch_size: int = 250
    keep_signals: bool = False
    scheme: str = "kraus"

    def __post_init__(self):
        _coerce_params(self)
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if self.n_traj < 1:
            raise ValueError("n_traj must be >= 1")
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if not (self.dt > 0 and self.t_final > 0):
            raise ValueError("dt and t_final must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["params"] = self.params.as_dict()
        return d


def _coerce_params(spec) -> None:
    if isinstance(spec.params, dict):
        object.__setattr__(spec, "params", FeedbackParams(**spec.params))


@dataclass(frozen=True)
class SteadySpec:
    """One steady-state report for the chosen engine."""

    params: FeedbackParams = field(default_factory=lambda: FeedbackParams(9.0, 4.0, 3.0))
    engine: str = "full"
    dim: int | None = None

    def __post_init__(self):
        _coerce_params(self)
        if self.engine not in ENGINES:
            raise ValueError(f"engine must be one of {ENGINES}, got {self.engine!r}")
        if self.engine == "moments" and self.params.include_unitary:
            raise ValueError("the 'moments' engine has no free-oscillation term; use 'extended'")

    def to_dict(self) -> dict:
        return {"params": self.params.as_dict(), "engine": self.engine, "dim": self.dim}


@dataclass(frozen=True)
class MomentsSpec:
    """Moment time series from a displaced thermal start.

    The start has means ``(x0, p0)`` and ``<dx^2> = <dp^2> = coth(beta omega / 2) / 2``.
    """

    params: FeedbackParams = field(
        default_factory=lambda: FeedbackParams(9.0, 4.0, 3.0, include_unitary=False)
    )
    engine: str = "moments"
    beta: float = 1.0
    x0: float = 0.0
    p0: float = 0.0
    t_final: float = 10.0
    n_samples: int = 201

    def __post_init__(self):
        _coerce_params(self)
        if self.engine not in ("moments", "extended"):
            raise ValueError("moment series need engine 'moments' or 'extended'")
        if self.engine == "moments" and self.params.include_unitary:
            raise ValueError("the 'moments' engine has no free-oscillation term; use 'extended'")
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if not self.t_final > 0 or self.n_samples < 2:
            raise ValueError("need t_final > 0 and n_samples >= 2")

    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.t_final, self.n_samples)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["params"] = self.params.as_dict()
        return d
