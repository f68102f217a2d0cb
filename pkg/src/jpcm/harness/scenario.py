"""Experiment definitions and their flat key-value config files.

A config file holds one ``[scenario]`` section::

    [scenario]
    name = jpcm-gi
    mode = jpcm-gi
    duration = 10
    meas_sigma_p = 0.20

Unknown keys are rejected so that typos do not silently fall back to defaults.
Vector values are whitespace- or comma-separated numbers.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..controllers import MODES, ControlConfig
from ..dynamics import MeasurementNoise, ProcessNoise, QuadParams
from ..fgo import LMConfig
from ..trajgen import CircleSpec, HoverSpec

SECTION = "scenario"


def _floats(text: str) -> tuple:
    return tuple(float(t) for t in text.replace(",", " ").split())


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class Disturbance:
    """Instantaneous position offset ``dp`` (m) applied to the vehicle at ``time`` (s)."""

    time: float
    dp: tuple

    def __post_init__(self):
        if len(self.dp) != 3:
            raise ValueError("disturbance dp needs three components")


@dataclass(frozen=True)
class Scenario:
    name: str = "scenario"
    mode: str = "nominal-mpc"
    duration: float = 10.0
    seed: int = 0
    dt: float = 0.01
    horizon: int = 20
    window: int = 1
    # trajectory
    trajectory: str = "circle"
    radius: float = 1.5
    speed: float = 5.0
    center: tuple = (0.0, 0.0, 1.0)
    normal: tuple = (0.0, 0.0, 1.0)
    attitude: str = "thrust"
    # simulator process noise
    thrust_noise: float = 1.0
    omega_noise: float = 0.02
    # positioning measurement noise (position m, rotation rad, velocity m/s, rate rad/s)
    meas_sigma_p: float = 0.0
    meas_sigma_R: float = 0.0
    meas_sigma_v: float = 0.0
    meas_sigma_omega: float = 0.0
    # relative-pose (LiDAR) measurements between consecutive steps
    lidar: bool = False
    lidar_sigma: float = 0.001
    disturbance: Disturbance | None = None
    # controller covariances: sigmas unless the name says variances
    q_k_sigmas: tuple = (0.03,) * 3 + (0.3,) * 3 + (3.0,) * 3
    q_n_sigmas: tuple = (0.005,) * 3 + (0.3,) * 3 + (3.0,) * 3
    r_t_variances: tuple = (1.0, 0.5, 0.5, 0.5)
    dynamics_sigma: float = 1e-4
    caf_sigma: float = 0.03
    limit_sigma: float = 10.0
    pin_variance: float = 1e-8
    # positioning factor sigmas used by the joint graphs; None means the
    # standard positioning-output sigmas, also for noise-free runs
    pos_sigmas: tuple | None = None
    max_iter: int = 20
    rel_tol: float = 1e-3
    # vehicle
    params: QuadParams = field(default_factory=QuadParams)
    rmse_skip: float = 1.0

    def __post_init__(self):
        if self.duration <= 0:
            raise ValueError("duration must be positive")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.trajectory not in ("circle", "hover"):
            raise ValueError("trajectory must be 'circle' or 'hover'")
        if self.disturbance is not None and not 0 <= self.disturbance.time < self.duration:
            raise ValueError("disturbance time must lie inside the run")
        if self.lidar and self.mode == "nominal-mpc":
            raise ValueError("relative-pose measurements need a joint graph mode")
        if self.rmse_skip < 0:
            raise ValueError("rmse_skip must be non-negative")

    @property
    def steps(self) -> int:
        return int(round(self.duration / self.dt))

    def trajectory_spec(self):
        if self.trajectory == "hover":
            return HoverSpec(tuple(self.center))
        return CircleSpec(self.radius, self.speed, tuple(self.center), tuple(self.normal),
                          self.attitude, self.params.gravity)

    def measurement_noise(self) -> MeasurementNoise:
        return MeasurementNoise(self.meas_sigma_p, self.meas_sigma_R, self.meas_sigma_v,
                                self.meas_sigma_omega)

    def process_noise(self) -> ProcessNoise:
        return ProcessNoise(self.thrust_noise, self.omega_noise)

    def control_config(self) -> ControlConfig:
        pos = self.pos_sigmas
        if pos is None:
            # standard positioning-output sigmas; a noise-free run still needs a finite model
            pos = (0.20,) * 3 + (0.05,) * 3 + (0.01,) * 3 + (0.001,) * 3
        if len(pos) != 12:
            raise ValueError("pos_sigmas needs 12 values")
        return ControlConfig(
            mode=self.mode,
            horizon=self.horizon,
            window=self.window,
            dt=self.dt,
            Q_k=tuple(s * s for s in self.q_k_sigmas),
            Q_N=tuple(s * s for s in self.q_n_sigmas),
            R_t=tuple(self.r_t_variances),
            D_l=(self.dynamics_sigma ** 2,) * 12,
            P=tuple(s * s for s in pos),
            Q_lim=self.limit_sigma ** 2,
            caf=self.caf_sigma ** 2,
            pin=self.pin_variance,
            lm=LMConfig(max_iter=self.max_iter, rel_tol=self.rel_tol),
        )

    def lidar_cov(self) -> np.ndarray:
        return np.diag(np.full(6, self.lidar_sigma ** 2))

    def with_(self, **changes) -> "Scenario":
        return dataclasses.replace(self, **changes)


_PARAM_KEYS = {f.name for f in dataclasses.fields(QuadParams)}
_TUPLE_KEYS = {"center", "normal", "q_k_sigmas", "q_n_sigmas", "r_t_variances", "pos_sigmas"}
_INT_KEYS = {"seed", "horizon", "window", "max_iter"}
_STR_KEYS = {"name", "mode", "trajectory", "attitude"}
_BOOL_KEYS = {"lidar"}


def _parse_items(items: dict[str, str]) -> Scenario:
    kw: dict = {}
    params: dict = {}
    dist_time = dist_dp = None
    fields_ = {f.name for f in dataclasses.fields(Scenario)} - {"params", "disturbance"}
    for key, raw in items.items():
        raw = raw.strip()
        if key == "disturbance_time":
            dist_time = float(raw)
        elif key == "disturbance_dp":
            dist_dp = _floats(raw)
        elif key in _PARAM_KEYS:
            params[key] = _floats(raw) if key == "inertia" else float(raw)
        elif key not in fields_:
            raise ValueError(f"unknown config key {key!r}")
        elif key in _TUPLE_KEYS:
            kw[key] = _floats(raw)
        elif key in _INT_KEYS:
            kw[key] = int(raw)
        elif key in _STR_KEYS:
            kw[key] = raw
        elif key in _BOOL_KEYS:
            kw[key] = _bool(raw)
        else:
            kw[key] = float(raw)
    if (dist_time is None) != (dist_dp is None):
        raise ValueError("disturbance_time and disturbance_dp go together")
    if dist_time is not None:
        kw["disturbance"] = Disturbance(dist_time, dist_dp)
    if params:
        kw["params"] = QuadParams(**params)
    return Scenario(**kw)


def load_scenario(path) -> Scenario:
    """Read a scenario from a config file; raises ``ValueError`` on bad content."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str  # keep key case (meas_sigma_R)
    path = Path(path)
    with path.open() as fh:
        try:
            parser.read_file(fh)
        except configparser.Error as exc:
            raise ValueError(f"{path}: {exc}") from exc
    if not parser.has_section(SECTION):
        raise ValueError(f"{path}: missing [{SECTION}] section")
    return _parse_items(dict(parser.items(SECTION)))


def canned_config_dir() -> Path:
    return Path(__file__).resolve().parent.parent / "configs"


def canned(name: str) -> Scenario:
    """One of the shipped experiment configs, by file stem (``mpc-nl``, ``jpcm-gi``, ...)."""
    path = canned_config_dir() / f"{name}.cfg"
    if not path.exists():
        names = sorted(p.stem for p in canned_config_dir().glob("*.cfg"))
        raise ValueError(f"no canned config {name!r}; available: {', '.join(names)}")
    return load_scenario(path)
