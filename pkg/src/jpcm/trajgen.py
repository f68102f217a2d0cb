"""Analytic reference trajectories."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .factors import RefPoint
from .so3 import _log, cross

E3 = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True)
class CircleSpec:
    radius: float = 1.5
    speed: float = 5.0
    center: tuple = (0.0, 0.0, 1.0)
    normal: tuple = (0.0, 0.0, 1.0)
    # "thrust": body z along the required thrust, x along the velocity.
    # "level": zero roll/pitch, x along the velocity.
    attitude: str = "thrust"
    gravity: float = 10.0

    def __post_init__(self):
        if self.radius <= 0 or self.speed < 0:
            raise ValueError("circle needs radius > 0 and speed >= 0")
        if self.attitude not in ("thrust", "level"):
            raise ValueError(f"unknown attitude rule {self.attitude!r}")

    @property
    def period(self) -> float:
        return math.inf if self.speed == 0 else 2.0 * math.pi * self.radius / self.speed

    def basis(self) -> tuple[np.ndarray, np.ndarray]:
        """Orthonormal in-plane axes ``(e1, e2)`` with ``e1 x e2 = normal``."""
        return _plane_basis(tuple(float(c) for c in self.normal))


@lru_cache(maxsize=None)
def _plane_basis(normal: tuple) -> tuple[np.ndarray, np.ndarray]:
    n = np.asarray(normal, dtype=float)
    n = n / np.linalg.norm(n)
    seed = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = seed - (seed @ n) * n
    e1 /= np.linalg.norm(e1)
    return e1, cross(n, e1)


def _attitude(acc, vel, fallback_heading, gravity, rule) -> np.ndarray:
    heading = vel if np.linalg.norm(vel) > 1e-12 else fallback_heading
    z = acc + gravity * E3 if rule == "thrust" else E3
    z = z / math.sqrt(z @ z)
    y = cross(z, heading)
    y /= math.sqrt(y @ y)
    return np.column_stack([cross(y, z), y, z])


def _circle_kinematics(spec: CircleSpec, t: float):
    e1, e2 = spec.basis()
    rate = spec.speed / spec.radius
    ang = rate * t
    c, s = math.cos(ang), math.sin(ang)
    p = np.asarray(spec.center, dtype=float) + spec.radius * (c * e1 + s * e2)
    v = spec.speed * (-s * e1 + c * e2)
    a = -spec.radius * rate * rate * (c * e1 + s * e2)
    R = _attitude(a, v, e1, spec.gravity, spec.attitude)
    return p, v, R


@lru_cache(maxsize=8192)
def circle_ref(spec: CircleSpec, t: float, h: float = 1e-4) -> RefPoint:
    """Constant-speed circle starting at ``center + radius * e1``.

    The body rate is a central difference of the attitude and is only used
    to seed initial states. Results are cached because a receding horizon
    asks for every time point many times; treat the arrays as read-only.
    """
    if t < 0:
        raise ValueError("t must be non-negative")
    p, v, R = _circle_kinematics(spec, t)
    _, _, Rm = _circle_kinematics(spec, t - h)
    _, _, Rp = _circle_kinematics(spec, t + h)
    omega = _log(Rm.T @ Rp) / (2.0 * h)
    for a in (p, R, v, omega):
        a.setflags(write=False)
    return RefPoint(p, R, v, omega)


def hover_ref(p) -> RefPoint:
    return RefPoint(np.asarray(p, dtype=float), np.eye(3), np.zeros(3), np.zeros(3))


@dataclass(frozen=True)
class HoverSpec:
    position: tuple = (0.0, 0.0, 1.0)


def reference_at(spec, t: float) -> RefPoint:
    if isinstance(spec, CircleSpec):
        return circle_ref(spec, t)
    if isinstance(spec, HoverSpec):
        return hover_ref(spec.position)
    raise TypeError(f"unsupported trajectory spec {type(spec).__name__}")


def horizon_refs(spec, step: int, dt: float, n: int) -> list[RefPoint]:
    """References for predicted steps ``step + 1 .. step + n``."""
    return [reference_at(spec, (step + k) * dt) for k in range(1, n + 1)]
