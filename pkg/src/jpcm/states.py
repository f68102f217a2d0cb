"""Manifold value types carried by graph variables.

Every type exposes ``dim`` (tangent dimension) and ``retract(delta)``; that
is all the solver needs. The quadrotor state tangent is ordered
``[dp, dtheta, dv, domega]`` with the rotation perturbed on the right.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .so3 import exp_many, exp_so3, is_rotation


def _vec3(x) -> np.ndarray:
    a = np.asarray(x, dtype=float).reshape(3)
    return a


@dataclass(frozen=True)
class QuadState:
    p: np.ndarray = field(default_factory=lambda: np.zeros(3))
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    omega: np.ndarray = field(default_factory=lambda: np.zeros(3))

    dim = 12

    def __post_init__(self):
        object.__setattr__(self, "p", _vec3(self.p))
        object.__setattr__(self, "v", _vec3(self.v))
        object.__setattr__(self, "omega", _vec3(self.omega))
        object.__setattr__(self, "R", np.asarray(self.R, dtype=float).reshape(3, 3))

    def retract(self, delta) -> "QuadState":
        d = np.asarray(delta, dtype=float)
        return QuadState(
            self.p + d[0:3], self.R @ exp_so3(d[3:6]), self.v + d[6:9], self.omega + d[9:12]
        )

    @classmethod
    def retract_many(cls, states: list, deltas: np.ndarray) -> list:
        """Retract each ``states[n]`` by ``deltas[n]`` (shape ``(n, 12)``)."""
        P = np.array([x.p for x in states]) + deltas[:, 0:3]
        R = np.array([x.R for x in states]) @ exp_many(deltas[:, 3:6])
        V = np.array([x.v for x in states]) + deltas[:, 6:9]
        W = np.array([x.omega for x in states]) + deltas[:, 9:12]
        return [cls._trusted(P[n], R[n], V[n], W[n]) for n in range(len(states))]

    @classmethod
    def _trusted(cls, p, R, v, omega) -> "QuadState":
        # Skips the conversions in __post_init__ for arrays already in shape.
        x = object.__new__(cls)
        object.__setattr__(x, "p", p)
        object.__setattr__(x, "R", R)
        object.__setattr__(x, "v", v)
        object.__setattr__(x, "omega", omega)
        return x

    def is_valid(self) -> bool:
        finite = all(np.all(np.isfinite(a)) for a in (self.p, self.v, self.omega))
        return finite and is_rotation(self.R)

    def with_(self, **changes) -> "QuadState":
        kw = dict(p=self.p, R=self.R, v=self.v, omega=self.omega)
        kw.update(changes)
        return QuadState(**kw)


@dataclass(frozen=True)
class Wrench:
    """Collective body-z thrust ``thrust`` (N) and body moments ``moment`` (N m)."""

    thrust: float = 0.0
    moment: np.ndarray = field(default_factory=lambda: np.zeros(3))

    dim = 4

    def __post_init__(self):
        object.__setattr__(self, "thrust", float(self.thrust))
        object.__setattr__(self, "moment", _vec3(self.moment))

    @classmethod
    def from_vector(cls, x) -> "Wrench":
        x = np.asarray(x, dtype=float)
        return cls(x[0], x[1:4])

    def vector(self) -> np.ndarray:
        return np.array([self.thrust, *self.moment])

    def retract(self, delta) -> "Wrench":
        return Wrench.from_vector(self.vector() + np.asarray(delta, dtype=float))

    @classmethod
    def retract_many(cls, wrenches: list, deltas: np.ndarray) -> list:
        X = np.array([[w.thrust, *w.moment] for w in wrenches]) + deltas
        out = []
        for row in X:
            w = object.__new__(cls)
            object.__setattr__(w, "thrust", float(row[0]))
            object.__setattr__(w, "moment", row[1:4])
            out.append(w)
        return out


@dataclass(frozen=True)
class RotorSpeeds:
    speeds: np.ndarray = field(default_factory=lambda: np.zeros(4))

    def __post_init__(self):
        object.__setattr__(self, "speeds", np.asarray(self.speeds, dtype=float).reshape(-1))

    @property
    def dim(self) -> int:
        return self.speeds.shape[0]

    def vector(self) -> np.ndarray:
        return self.speeds.copy()

    def retract(self, delta) -> "RotorSpeeds":
        return RotorSpeeds(self.speeds + np.asarray(delta, dtype=float))

    @classmethod
    def retract_many(cls, rotors: list, deltas: np.ndarray) -> list:
        S = np.array([u.speeds for u in rotors]) + deltas
        out = []
        for row in S:
            u = object.__new__(cls)
            object.__setattr__(u, "speeds", row)
            out.append(u)
        return out
