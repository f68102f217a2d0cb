"""Closed-loop simulation of one scenario."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..controllers import Controller
from ..dynamics import measure, step_truth
from ..factors import RefPoint, RelPoseMeas
from ..so3 import _log, exp_so3
from ..states import QuadState, RotorSpeeds
from ..trajgen import horizon_refs, reference_at
from .scenario import Scenario

log = logging.getLogger(__name__)

# Abort the run after this many consecutive solver failures.
MAX_CONSECUTIVE_FAILURES = 50


@dataclass
class StepRecord:
    t: float
    truth: QuadState
    measured: QuadState
    estimate: QuadState
    ref: RefPoint
    rotors: RotorSpeeds
    iterations: int
    solve_ms: float
    failed: bool = False

    @property
    def pos_error(self) -> np.ndarray:
        return self.truth.p - self.ref.p

    @property
    def rot_error(self) -> np.ndarray:
        return _log(self.ref.R.T @ self.truth.R)


@dataclass
class RunLog:
    scenario: Scenario
    records: list = field(default_factory=list)
    failure: str = ""  # set when the run was cut short

    @property
    def truncated(self) -> bool:
        return bool(self.failure)

    @property
    def solver_failures(self) -> int:
        return sum(r.failed for r in self.records)

    def __len__(self) -> int:
        return len(self.records)


def synth_relative_pose(xi: QuadState, xj: QuadState, i: int, j: int, cov: np.ndarray,
                        rng: np.random.Generator) -> RelPoseMeas:
    """Exact relative pose of ``xj`` in the frame of ``xi``, perturbed in the tangent space."""
    n = rng.multivariate_normal(np.zeros(6), cov)
    R = xi.R.T @ xj.R @ exp_so3(n[0:3])
    t = xi.R.T @ (xj.p - xi.p) + n[3:6]
    return RelPoseMeas(i, j, R, t, cov)


def run_scenario(s: Scenario) -> RunLog:
    """Measure, control and simulate at ``1/dt`` Hz for the scenario's duration.

    The record at step ``k`` holds the state at ``t = k dt`` together with the
    input applied over ``[t, t + dt)``. Deterministic for a given seed.
    """
    rng = np.random.default_rng(s.seed)
    params = s.params
    spec = s.trajectory_spec()
    meas_noise = s.measurement_noise()
    proc_noise = s.process_noise()
    ctl = Controller(s.control_config(), params)
    lidar_cov = s.lidar_cov()

    x = reference_at(spec, 0.0).as_state()
    prev_x = None
    out = RunLog(s)
    dist_step = None if s.disturbance is None else int(round(s.disturbance.time / s.dt))
    streak = 0
    for k in range(s.steps):
        t = k * s.dt
        if k == dist_step:
            x = x.with_(p=x.p + np.asarray(s.disturbance.dp, dtype=float))
        z = measure(x, meas_noise, rng)
        rel = None
        if s.lidar and prev_x is not None:
            rel = synth_relative_pose(prev_x, x, k - 1, k, lidar_cov, rng)
        step = ctl.step(z, horizon_refs(spec, k, s.dt, s.horizon), rel)
        out.records.append(StepRecord(t, x, z, step.estimate, reference_at(spec, t), step.rotors,
                                      step.iterations, step.solve_ms, step.failed))
        streak = streak + 1 if step.failed else 0
        if streak >= MAX_CONSECUTIVE_FAILURES:
            out.failure = f"{streak} consecutive solver failures at t={t:.2f}s ({step.reason})"
            break
        prev_x = x
        x = step_truth(x, step.rotors, s.dt, params, proc_noise, rng)
        if not x.is_valid():
            out.failure = f"simulated state became invalid at t={t + s.dt:.2f}s"
            break
    if out.failure:
        log.error("%s: run truncated: %s", s.name, out.failure)
    return out
