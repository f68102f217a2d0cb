"""Quadrotor model: parameters, control allocation, rigid-body dynamics, simulator."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .so3 import cross, exp_so3, project_to_rotation, skew
from .states import QuadState, RotorSpeeds, Wrench

E3 = np.array([0.0, 0.0, 1.0])


class InfeasibleWrench(ValueError):
    """The wrench would need a negative squared rotor speed."""


@dataclass(frozen=True)
class QuadParams:
    mass: float = 1.0
    inertia: tuple = (0.01, 0.01, 0.02)
    arm_length: float = 0.25
    thrust_coeff: float = 1e-5
    moment_coeff: float = 1e-7
    gravity: float = 10.0
    u_min: float = 200.0
    u_max: float = 800.0
    u_ths: float = 20.0

    def __post_init__(self):
        positive = [self.mass, *self.inertia, self.arm_length, self.thrust_coeff,
                    self.moment_coeff, self.gravity, self.u_max, self.u_ths]
        if min(positive) <= 0 or self.u_min < 0:
            raise ValueError("quadrotor parameters must be positive")
        if not self.u_min + self.u_ths < self.u_max - self.u_ths:
            raise ValueError("need u_min + u_ths < u_max - u_ths")

    @property
    def J(self) -> np.ndarray:
        return np.diag(self.inertia)

    @property
    def hover_thrust(self) -> float:
        return self.mass * self.gravity

    def hover_wrench(self) -> Wrench:
        return Wrench(self.hover_thrust, np.zeros(3))

    def hover_speed(self) -> float:
        return math.sqrt(self.hover_thrust / (4.0 * self.thrust_coeff))


def allocation_matrix(params: QuadParams) -> np.ndarray:
    """The 6x4 map from squared rotor speeds to body force and moment.

    Rows are (F_x, F_y, F_z, M_x, M_y, M_z); the first two are zero.
    """
    ct, lct, km = params.thrust_coeff, params.arm_length * params.thrust_coeff, params.moment_coeff
    return np.array([
        [0.0, 0.0, 0.0, 0.0],
        [0.0, 0.0, 0.0, 0.0],
        [ct, ct, ct, ct],
        [0.0, 0.0, lct, -lct],
        [-lct, lct, 0.0, 0.0],
        [km, km, -km, -km],
    ])


def wrench_matrix(params: QuadParams) -> np.ndarray:
    """Rows 3-6 of :func:`allocation_matrix`: the invertible 4x4 block."""
    return allocation_matrix(params)[2:]


def allocate(u: RotorSpeeds, params: QuadParams) -> Wrench:
    A = np.square(np.asarray(getattr(u, "speeds", u), dtype=float))
    return Wrench.from_vector(wrench_matrix(params) @ A)


def allocate_inverse(w: Wrench, params: QuadParams, saturate: bool = False) -> RotorSpeeds:
    """Rotor speeds producing ``w``.

    With ``saturate`` the squared speeds are clipped into the actuator band
    ``[u_min^2, u_max^2]`` instead of raising :class:`InfeasibleWrench`.
    """
    A = np.linalg.solve(wrench_matrix(params), w.vector())
    if saturate:
        A = np.clip(A, params.u_min ** 2, params.u_max ** 2)
    elif np.any(A < 0.0):
        raise InfeasibleWrench(f"wrench {w.vector()} needs squared speeds {A}")
    return RotorSpeeds(np.sqrt(A))


def continuous_dynamics(x: QuadState, w: Wrench, params: QuadParams) -> np.ndarray:
    """Tangent-space derivative ``[p_dot, omega, v_dot, omega_dot]``.

    The rotation block is the body rate; it is consumed as ``R @ Exp(omega dt)``.
    """
    inertia = np.asarray(params.inertia, dtype=float)
    v_dot = -params.gravity * E3 + x.R[:, 2] * (w.thrust / params.mass)
    omega_dot = (w.moment - cross(x.omega, inertia * x.omega)) / inertia
    return np.concatenate([x.v, x.omega, v_dot, omega_dot])


def _rk4(x: QuadState, w: Wrench, dt: float, params: QuadParams) -> QuadState:
    # Integrates R as a matrix ODE R_dot = R skew(omega).
    def f(p, R, v, om):
        d = continuous_dynamics(QuadState(p, R, v, om), w, params)
        return d[0:3], R @ skew(om), d[6:9], d[9:12]

    y0 = (x.p, x.R, x.v, x.omega)
    k1 = f(*y0)
    k2 = f(*(a + 0.5 * dt * k for a, k in zip(y0, k1)))
    k3 = f(*(a + 0.5 * dt * k for a, k in zip(y0, k2)))
    k4 = f(*(a + dt * k for a, k in zip(y0, k3)))
    p, R, v, om = (a + dt / 6.0 * (b1 + 2 * b2 + 2 * b3 + b4)
                   for a, b1, b2, b3, b4 in zip(y0, k1, k2, k3, k4))
    return QuadState(p, project_to_rotation(R), v, om)


@dataclass(frozen=True)
class ProcessNoise:
    thrust: float = 0.0  # N
    omega: float = 0.0  # rad/s, added after each step


@dataclass(frozen=True)
class MeasurementNoise:
    p: float = 0.0
    R: float = 0.0
    v: float = 0.0
    omega: float = 0.0

    def sigmas(self) -> np.ndarray:
        return np.repeat([self.p, self.R, self.v, self.omega], 3)

    @property
    def is_zero(self) -> bool:
        return not np.any(self.sigmas())


def step_truth(
    x: QuadState,
    u: RotorSpeeds,
    dt: float,
    params: QuadParams,
    noise: ProcessNoise = ProcessNoise(),
    rng: np.random.Generator | None = None,
) -> QuadState:
    """Advance the simulated vehicle by one RK4 step under rotor command ``u``."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    w = allocate(u, params)
    if noise.thrust > 0:
        w = Wrench(w.thrust + rng.normal(0.0, noise.thrust), w.moment)
    x1 = _rk4(x, w, dt, params)
    if noise.omega > 0:
        x1 = x1.with_(omega=x1.omega + rng.normal(0.0, noise.omega, 3))
    return x1


def measure(x: QuadState, noise: MeasurementNoise, rng: np.random.Generator | None = None) -> QuadState:
    """Noisy full-state measurement; rotation noise enters as ``R @ Exp(n)``."""
    if noise.is_zero:
        return x
    n = rng.normal(0.0, 1.0, 12) * noise.sigmas()
    return QuadState(x.p + n[0:3], x.R @ exp_so3(n[3:6]), x.v + n[6:9], x.omega + n[9:12])


def euler_step(x: QuadState, w: Wrench, dt: float, params: QuadParams) -> QuadState:
    """The discrete model the dynamics factor encodes (Euler, exact group update)."""
    d = continuous_dynamics(x, w, params)
    return QuadState(x.p + x.v * dt, x.R @ exp_so3(x.omega * dt), x.v + d[6:9] * dt,
                     x.omega + d[9:12] * dt)
