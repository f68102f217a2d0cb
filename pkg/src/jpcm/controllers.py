"""Receding-horizon controllers built on the factor graph.

Three graph variants share one builder:

* ``nominal-mpc``: the current state is pinned to the positioning output.
* ``jpcm-gi``: the current state gets a positioning factor and is estimated
  jointly with the future inputs (window of one).
* ``sw-jpcm``: a window of past states with positioning and relative-pose
  factors, bridged into the prediction by the first dynamics factor.
"""

from __future__ import annotations

import logging
import time
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from .dynamics import QuadParams, allocate_inverse, euler_step
from .factors import (
    RefPoint,
    RelPoseMeas,
    caf_factor,
    clf_factor,
    dynamics_factor,
    input_rate_factor,
    lidar_factor,
    positioning_factor,
    reference_factor,
)
from .fgo import FactorGraph, LMConfig, NoiseModel, SolveResult, U, W, X, solve_lm
from .states import QuadState, RotorSpeeds, Wrench

log = logging.getLogger(__name__)

MODES = ("nominal-mpc", "jpcm-gi", "sw-jpcm")


def _cov(x, dim: int) -> np.ndarray:
    a = np.asarray(x, dtype=float)
    if a.ndim == 0:
        return np.eye(dim) * float(a)
    if a.ndim == 1:
        if a.shape[0] != dim:
            raise ValueError(f"expected {dim} variances, got {a.shape[0]}")
        return np.diag(a)
    if a.shape != (dim, dim):
        raise ValueError(f"expected a {dim}x{dim} covariance")
    return a


def _sq(*sigmas) -> tuple:
    return tuple(float(s) ** 2 for s in sigmas)


@dataclass
class ControlConfig:
    """Horizon, window and covariances. Vectors are diagonal variances."""

    mode: str = "jpcm-gi"
    horizon: int = 20
    window: int = 1
    dt: float = 0.01
    Q_k: tuple = _sq(*[0.03] * 3, *[0.3] * 3, *[3.0] * 3)
    Q_N: tuple = _sq(*[0.005] * 3, *[0.3] * 3, *[3.0] * 3)
    R_t: tuple = (1.0, 0.5, 0.5, 0.5)
    D_l: tuple = _sq(*[1e-4] * 12)
    P: tuple = _sq(*[0.20] * 3, *[0.05] * 3, *[0.01] * 3, *[0.001] * 3)
    Q_lim: float = 10.0 ** 2
    caf: float = 0.03 ** 2
    pin: float = 1e-8
    rollout: bool = True
    # Control solves are warm-started every 10 ms; a loose relative tolerance
    # stops once further iterations change the cost by < 0.1 %.
    lm: LMConfig = field(default_factory=lambda: LMConfig(max_iter=20, rel_tol=1e-3))

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.horizon < 1 or self.window < 1:
            raise ValueError("horizon and window must be >= 1")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        self.noise = {
            "Q_k": NoiseModel.from_covariance(_cov(self.Q_k, 9)),
            "Q_N": NoiseModel.from_covariance(_cov(self.Q_N, 9)),
            "R_t": NoiseModel.from_covariance(_cov(self.R_t, 4)),
            "D_l": NoiseModel.from_covariance(_cov(self.D_l, 12)),
            "P": NoiseModel.from_covariance(_cov(self.P, 12)),
            "Q_lim": NoiseModel.from_covariance(_cov(self.Q_lim, 4)),
            "caf": NoiseModel.from_covariance(_cov(self.caf, 4)),
            "pin": NoiseModel.from_covariance(_cov(self.pin, 12)),
        }

    @property
    def effective_window(self) -> int:
        return 1 if self.mode == "nominal-mpc" else self.window


@dataclass
class Plan:
    """A solved (or seeded) horizon in relative indices.

    ``states[0]`` is the current state, ``states[k]`` the k-th prediction;
    ``past`` holds the window states before the current one, oldest first.
    """

    states: list
    wrenches: list
    rotors: list
    past: list = field(default_factory=list)


@dataclass
class WindowEntry:
    index: int
    z: QuadState
    rel: RelPoseMeas | None = None


class WindowBuffer:
    """The last ``W`` positioning measurements (and relative poses)."""

    def __init__(self, size: int):
        self.size = size
        self._items: deque[WindowEntry] = deque(maxlen=size)

    def push(self, index: int, z: QuadState, rel: RelPoseMeas | None = None) -> None:
        if self._items and index <= self._items[-1].index:
            raise ValueError("window timestamps must increase")
        self._items.append(WindowEntry(index, z, rel))

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self):
        return iter(self._items)

    @property
    def latest(self) -> WindowEntry:
        return self._items[-1]


def cold_start(z: QuadState, refs: list[RefPoint], params: QuadParams, past=()) -> Plan:
    hover = params.hover_wrench()
    rotor = allocate_inverse(hover, params)
    return Plan(
        states=[z] + [r.as_state() for r in refs],
        wrenches=[hover] * len(refs),
        rotors=[rotor] * len(refs),
        past=list(past),
    )


def shift_warm_start(prev: Plan, params: QuadParams | None = None, dt: float | None = None,
                     window: int = 1) -> Plan:
    """Shift a solved horizon one step forward.

    Predictions move down one index and the last wrench/rotor entry is
    duplicated. The new terminal state is the old terminal state, or its
    Euler propagation under the last wrench when ``params`` and ``dt`` are
    given. The old current state joins the past window.
    """
    if params is not None and dt is not None:
        last = euler_step(prev.states[-1], prev.wrenches[-1], dt, params)
    else:
        last = prev.states[-1]
    past = (prev.past + [prev.states[0]])[-(window - 1):] if window > 1 else []
    return Plan(
        states=prev.states[1:] + [last],
        wrenches=prev.wrenches[1:] + [prev.wrenches[-1]],
        rotors=prev.rotors[1:] + [prev.rotors[-1]],
        past=past,
    )


def rollout(plan: Plan, params: QuadParams, dt: float) -> Plan:
    """Re-simulate the predicted states from ``states[0]`` under the planned wrenches.

    Rotor speeds are re-derived from the wrenches so the dynamics and
    allocation factors start out satisfied.
    """
    states = [plan.states[0]]
    for w in plan.wrenches:
        states.append(euler_step(states[-1], w, dt, params))
    rotors = [allocate_inverse(w, params, saturate=True) for w in plan.wrenches]
    return Plan(states, list(plan.wrenches), rotors, list(plan.past))


def _add_control_part(graph: FactorGraph, i: int, refs, plan: Plan, cfg: ControlConfig,
                      params: QuadParams) -> None:
    n = len(refs)
    nz = cfg.noise
    for k in range(1, n + 1):
        graph.add_variable(X(i + k), plan.states[k])
    for k in range(n):
        graph.add_variable(W(i + k), plan.wrenches[k])
        graph.add_variable(U(i + k), plan.rotors[k])
    for k in range(n):
        graph.add_factor(dynamics_factor(X(i + k), W(i + k), X(i + k + 1), cfg.dt, params, nz["D_l"]))
    for k in range(1, n + 1):
        graph.add_factor(reference_factor(X(i + k), refs[k - 1], nz["Q_N"] if k == n else nz["Q_k"]))
    for t in range(n - 1):
        graph.add_factor(input_rate_factor(W(i + t), W(i + t + 1), nz["R_t"]))
    for k in range(n):
        graph.add_factor(caf_factor(W(i + k), U(i + k), params, nz["caf"]))
        graph.add_factor(clf_factor(U(i + k), params, nz["Q_lim"]))


def build_nominal_mpc(x0: QuadState, refs: list[RefPoint], cfg: ControlConfig, params: QuadParams,
                      initial: Plan | None = None, step: int = 0) -> FactorGraph:
    """MPC with the initial state pinned by a near-zero-covariance prior."""
    if len(refs) != cfg.horizon:
        raise ValueError(f"need {cfg.horizon} references, got {len(refs)}")
    plan = initial or cold_start(x0, refs, params)
    graph = FactorGraph()
    graph.add_variable(X(step), x0)
    graph.add_factor(positioning_factor(X(step), x0, cfg.noise["pin"], name="prior"))
    _add_control_part(graph, step, refs, plan, cfg, params)
    return graph


def build_jpcm(buffer: WindowBuffer, refs: list[RefPoint], cfg: ControlConfig, params: QuadParams,
               initial: Plan | None = None) -> FactorGraph:
    """Joint graph: positioning window + control horizon, no pin on the current state."""
    if len(buffer) == 0:
        raise ValueError("window buffer is empty")
    if len(refs) != cfg.horizon:
        raise ValueError(f"need {cfg.horizon} references, got {len(refs)}")
    entries = list(buffer)
    i = entries[-1].index
    plan = initial or cold_start(entries[-1].z, refs, params)
    past_init = plan.past[-(len(entries) - 1):] if len(entries) > 1 else []
    past_init = [e.z for e in entries[:-1]][: len(entries) - 1 - len(past_init)] + past_init

    graph = FactorGraph()
    for e, x in zip(entries[:-1], past_init):
        graph.add_variable(X(e.index), x)
    graph.add_variable(X(i), plan.states[0])
    present = {e.index for e in entries}
    for e in entries:
        graph.add_factor(positioning_factor(X(e.index), e.z, cfg.noise["P"]))
        if e.rel is not None and e.rel.i in present and e.rel.j == e.index:
            graph.add_factor(lidar_factor(X(e.rel.i), X(e.rel.j), e.rel))
    _add_control_part(graph, i, refs, plan, cfg, params)
    return graph


def extract_plan(values: dict, i: int, n: int, past_indices=()) -> Plan:
    return Plan(
        states=[values[X(i + k)] for k in range(n + 1)],
        wrenches=[values[W(i + k)] for k in range(n)],
        rotors=[values[U(i + k)] for k in range(n)],
        past=[values[X(j)] for j in past_indices],
    )


@dataclass
class StepOutput:
    rotors: RotorSpeeds
    wrench: Wrench
    estimate: QuadState
    iterations: int
    error: float
    solve_ms: float
    failed: bool = False
    reason: str = ""


class Controller:
    """Stateful receding-horizon loop around one of the graph variants."""

    def __init__(self, cfg: ControlConfig, params: QuadParams):
        self.cfg = cfg
        self.params = params
        self.buffer = WindowBuffer(cfg.effective_window)
        self._plan: Plan | None = None
        self._last_input: RotorSpeeds | None = None
        self._step = 0
        self.last_graph: FactorGraph | None = None
        self.last_result: SolveResult | None = None

    def step(self, z: QuadState, refs: list[RefPoint], rel: RelPoseMeas | None = None) -> StepOutput:
        cfg, params = self.cfg, self.params
        i = self._step
        self.buffer.push(i, z, rel)

        if self._plan is None:
            past = [e.z for e in self.buffer][:-1]
            plan = cold_start(z, refs, params, past)
        else:
            plan = shift_warm_start(self._plan, params, cfg.dt, len(self.buffer))
            if cfg.mode == "nominal-mpc":
                plan.states[0] = z
            if cfg.rollout:
                plan = rollout(plan, params, cfg.dt)
        if cfg.mode == "nominal-mpc":
            graph = build_nominal_mpc(z, refs, cfg, params, plan, step=i)
        else:
            graph = build_jpcm(self.buffer, refs, cfg, params, plan)

        t0 = time.perf_counter()
        result = solve_lm(graph, cfg.lm)
        solve_ms = 1e3 * (time.perf_counter() - t0)
        self.last_graph, self.last_result = graph, result
        self._step += 1

        if result.diverged:
            log.warning("step %d: solver failed (%s); holding last input", i, result.reason)
            held = self._last_input or allocate_inverse(params.hover_wrench(), params)
            self._plan = None
            self._last_input = held
            return StepOutput(held, Wrench(), z, result.iterations, result.error, solve_ms,
                              True, result.reason)

        past_idx = [e.index for e in self.buffer][:-1]
        self._plan = extract_plan(result.values, i, cfg.horizon, past_idx)
        w0 = self._plan.wrenches[0]
        rotors = allocate_inverse(w0, params, saturate=True)
        self._last_input = rotors
        return StepOutput(rotors, w0, self._plan.states[0], result.iterations, result.error, solve_ms)

    def reset(self) -> None:
        self.buffer = WindowBuffer(self.cfg.effective_window)
        self._plan = None
        self._last_input = None
        self._step = 0


def with_mode(cfg: ControlConfig, mode: str, **changes) -> ControlConfig:
    return replace(cfg, mode=mode, **changes)
