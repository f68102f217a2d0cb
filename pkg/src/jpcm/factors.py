"""Residuals of the joint positioning-and-control graph and their Jacobians.

Rotation residuals are right-tangent errors ``Log(R_target^T R_estimate)``.
Each ``*_error`` function returns the raw residual of one factor instance and
is written for readability. Each ``*_factor`` builds a :class:`~jpcm.fgo.BatchFactor`
whose residuals and analytic Jacobians are evaluated for all instances of a
graph at once; the tests check both against each other and against finite
differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dynamics import QuadParams, allocate, wrench_matrix
from .fgo import BatchFactor, Factor, Key, NoiseModel
from .so3 import (_log, cross, dexp_right_inv_many, dexp_right_many, exp_so3, exp_many,
                  log_many, skew_many)
from .states import QuadState, RotorSpeeds, Wrench


@dataclass(frozen=True)
class RefPoint:
    """Reference position, attitude and velocity; ``omega`` only seeds cold starts."""

    p: np.ndarray
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    omega: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def as_state(self) -> QuadState:
        return QuadState(self.p, self.R, self.v, self.omega)


@dataclass(frozen=True)
class RelPoseMeas:
    """Pose of body ``j`` expressed in the frame of body ``i`` (``R``, ``t``)."""

    i: int
    j: int
    R: np.ndarray
    t: np.ndarray
    cov: np.ndarray = field(default_factory=lambda: np.diag(np.full(6, 0.001 ** 2)))
    extrinsic_R: np.ndarray = field(default_factory=lambda: np.eye(3))
    extrinsic_t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not self.i < self.j:
            raise ValueError("relative pose needs i < j")

    @property
    def has_extrinsic(self) -> bool:
        return bool(np.any(self.extrinsic_R != np.eye(3)) or np.any(self.extrinsic_t))


def _stack_states(xs) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    return (np.array([x.p for x in xs]), np.array([x.R for x in xs]),
            np.array([x.v for x in xs]), np.array([x.omega for x in xs]))


def _T(R: np.ndarray) -> np.ndarray:
    return R.transpose(0, 2, 1)


def _eye_stack(n: int, d: int) -> np.ndarray:
    return np.broadcast_to(np.eye(d), (n, d, d)).copy()


# ---------------------------------------------------------------- positioning

def positioning_error(x: QuadState, z: QuadState) -> np.ndarray:
    return np.concatenate([x.p - z.p, _log(z.R.T @ x.R), x.v - z.v, x.omega - z.omega])


class PositioningFactor(BatchFactor):
    """Full-state measurement (or prior) ``z`` on one state variable."""

    def __init__(self, key: Key, z: QuadState, noise: NoiseModel, name: str = "positioning"):
        super().__init__([key], noise, name)
        self.z = z

    @classmethod
    def error_many(cls, factors, values):
        P, R, V, W = _stack_states([v[0] for v in values])
        Pz, Rz, Vz, Wz = _stack_states([f.z for f in factors])
        return np.hstack([P - Pz, log_many(_T(Rz) @ R), V - Vz, W - Wz])

    @classmethod
    def linearize_many(cls, factors, values):
        E = cls.error_many(factors, values)
        J = _eye_stack(len(factors), 12)
        J[:, 3:6, 3:6] = dexp_right_inv_many(E[:, 3:6])
        return E, [J]


def positioning_factor(key: Key, z: QuadState, noise: NoiseModel, name: str = "positioning") -> Factor:
    return PositioningFactor(key, z, noise, name)


# ---------------------------------------------------------------- LiDAR

def _lidar_pose(x: QuadState, meas: RelPoseMeas):
    return x.R @ meas.extrinsic_R, x.p + x.R @ meas.extrinsic_t


def lidar_relative_error(xi: QuadState, xj: QuadState, meas: RelPoseMeas) -> np.ndarray:
    """Error of ``T_meas * T_j^-1 * T_i`` as (rotation vector, translation)."""
    Ri, pi = _lidar_pose(xi, meas)
    Rj, pj = _lidar_pose(xj, meas)
    A = meas.R @ Rj.T
    return np.concatenate([_log(A @ Ri), A @ (pi - pj) + meas.t])


class LidarFactor(BatchFactor):
    """Relative pose between two states, sensor frame equal to the body frame."""

    def __init__(self, key_i: Key, key_j: Key, meas: RelPoseMeas):
        if meas.has_extrinsic:
            raise ValueError("LidarFactor assumes an identity extrinsic; see lidar_factor")
        super().__init__([key_i, key_j], NoiseModel.from_covariance(meas.cov), "lidar")
        self.meas = meas

    @classmethod
    def _parts(cls, factors, values):
        Pi, Ri, _, _ = _stack_states([v[0] for v in values])
        Pj, Rj, _, _ = _stack_states([v[1] for v in values])
        Rm = np.array([f.meas.R for f in factors])
        tm = np.array([f.meas.t for f in factors])
        A = Rm @ _T(Rj)
        dp = (Pi - Pj)[:, :, None]
        E = np.hstack([log_many(A @ Ri), (A @ dp)[:, :, 0] + tm])
        return E, Ri, Rj, Rm, A, dp

    @classmethod
    def error_many(cls, factors, values):
        return cls._parts(factors, values)[0]

    @classmethod
    def linearize_many(cls, factors, values):
        E, Ri, Rj, Rm, A, dp = cls._parts(factors, values)
        n = len(factors)
        Jinv = dexp_right_inv_many(E[:, 0:3])
        Ji = np.zeros((n, 6, 12))
        Jj = np.zeros((n, 6, 12))
        Ji[:, 0:3, 3:6] = Jinv
        Ji[:, 3:6, 0:3] = A
        Jj[:, 0:3, 3:6] = -Jinv @ _T(Ri) @ Rj
        Jj[:, 3:6, 0:3] = -A
        Jj[:, 3:6, 3:6] = Rm @ skew_many((_T(Rj) @ dp)[:, :, 0])
        return E, [Ji, Jj]


def lidar_factor(key_i: Key, key_j: Key, meas: RelPoseMeas) -> Factor:
    """Relative-pose factor; a non-identity extrinsic falls back to numerical Jacobians."""
    if not meas.has_extrinsic:
        return LidarFactor(key_i, key_j, meas)
    noise = NoiseModel.from_covariance(meas.cov)
    res = lambda xi, xj: lidar_relative_error(xi, xj, meas)  # noqa: E731
    return Factor([key_i, key_j], noise, res, name="lidar")


# ---------------------------------------------------------------- dynamics

def dynamics_error(xi: QuadState, wi: Wrench, xj: QuadState, dt: float, params: QuadParams) -> np.ndarray:
    """One explicit-Euler step residual, ordered ``[e_p, e_theta, e_v, e_omega]``."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    Jb = params.J
    Jinv = 1.0 / np.asarray(params.inertia)
    e_p = xj.p - xi.v * dt - xi.p
    e_th = _log(xj.R.T @ xi.R @ exp_so3(xi.omega * dt))
    acc = -params.gravity * np.array([0.0, 0.0, 1.0]) + xi.R[:, 2] * (wi.thrust / params.mass)
    e_v = xj.v - xi.v - acc * dt
    e_w = xj.omega - xi.omega - Jinv * (wi.moment - cross(xi.omega, Jb @ xi.omega)) * dt
    return np.concatenate([e_p, e_th, e_v, e_w])


def gyroscopic_jacobian(omega, inertia) -> np.ndarray:
    """Derivative of ``J^-1 (omega x J omega)`` w.r.t. omega in closed form.

    ``[[0, a w3, a w2], [b w3, 0, b w1], [c w2, c w1, 0]]`` with
    ``a = (I3 - I2)/I1``, ``b = (I1 - I3)/I2``, ``c = (I2 - I1)/I3``.
    Accepts a single ``omega`` or a stack of shape ``(n, 3)``.
    """
    I1, I2, I3_ = inertia
    a = (I3_ - I2) / I1
    b = (I1 - I3_) / I2
    c = (I2 - I1) / I3_
    w = np.asarray(omega, dtype=float)
    G = np.zeros(w.shape[:-1] + (3, 3))
    G[..., 0, 1] = a * w[..., 2]
    G[..., 0, 2] = a * w[..., 1]
    G[..., 1, 0] = b * w[..., 2]
    G[..., 1, 2] = b * w[..., 0]
    G[..., 2, 0] = c * w[..., 1]
    G[..., 2, 1] = c * w[..., 0]
    return G


def _cross(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.stack([a[:, 1] * b[:, 2] - a[:, 2] * b[:, 1],
                     a[:, 2] * b[:, 0] - a[:, 0] * b[:, 2],
                     a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]], axis=1)


class DynamicsFactor(BatchFactor):
    """Discrete rigid-body step linking ``x_i``, ``w_i`` and ``x_j``."""

    def __init__(self, key_i: Key, key_w: Key, key_j: Key, dt: float, params: QuadParams,
                 noise: NoiseModel):
        if dt <= 0:
            raise ValueError("dt must be positive")
        super().__init__([key_i, key_w, key_j], noise, "dynamics")
        self.dt = float(dt)
        self.params = params

    def shared(self) -> tuple:
        return (self.dt, self.params)

    @classmethod
    def _parts(cls, factors, values):
        f0 = factors[0]
        dt, prm = f0.dt, f0.params
        inertia = np.asarray(prm.inertia, dtype=float)
        Pi, Ri, Vi, Wi = _stack_states([v[0] for v in values])
        Pj, Rj, Vj, Wj = _stack_states([v[2] for v in values])
        thrust = np.array([v[1].thrust for v in values])
        moment = np.array([v[1].moment for v in values])
        phi = Wi * dt
        Ephi = exp_many(phi)
        Erel = _T(Rj) @ Ri @ Ephi
        e_th = log_many(Erel)
        acc = Ri[:, :, 2] * (thrust / prm.mass)[:, None]
        acc[:, 2] -= prm.gravity
        gyro = _cross(Wi, Wi * inertia) / inertia
        E = np.hstack([
            Pj - Vi * dt - Pi,
            e_th,
            Vj - Vi - acc * dt,
            Wj - Wi - (moment / inertia - gyro) * dt,
        ])
        return E, (dt, prm, inertia, Ri, Wi, thrust, phi, Ephi, Erel)

    @classmethod
    def error_many(cls, factors, values):
        return cls._parts(factors, values)[0]

    @classmethod
    def linearize_many(cls, factors, values):
        E, (dt, prm, inertia, Ri, Wi, thrust, phi, Ephi, Erel) = cls._parts(factors, values)
        n = len(factors)
        Jr_inv = dexp_right_inv_many(E[:, 3:6])
        Ji = np.zeros((n, 12, 12))
        idx = np.arange(3)
        Ji[:, idx, idx] = -1.0
        Ji[:, idx, 6 + idx] = -dt
        Ji[:, 3:6, 3:6] = Jr_inv @ _T(Ephi)
        Ji[:, 3:6, 9:12] = Jr_inv @ dexp_right_many(phi) * dt
        # d(R e3 T)/dtheta = -R skew(e3) T
        tz = np.zeros((n, 3))
        tz[:, 2] = thrust / prm.mass * dt
        Ji[:, 6:9, 3:6] = Ri @ skew_many(tz)
        Ji[:, 6 + idx, 6 + idx] = -1.0
        Ji[:, 9:12, 9:12] = gyroscopic_jacobian(Wi, inertia) * dt
        Ji[:, 9 + idx, 9 + idx] -= 1.0

        Jw = np.zeros((n, 12, 4))
        Jw[:, 6:9, 0] = -Ri[:, :, 2] * (dt / prm.mass)
        Jw[:, 9 + idx, 1 + idx] = -dt / inertia

        Jj = _eye_stack(n, 12)
        Jj[:, 3:6, 3:6] = -Jr_inv @ _T(Erel)
        return E, [Ji, Jw, Jj]


def dynamics_factor(key_i: Key, key_w: Key, key_j: Key, dt: float, params: QuadParams,
                    noise: NoiseModel) -> Factor:
    return DynamicsFactor(key_i, key_w, key_j, dt, params, noise)


# ---------------------------------------------------------------- reference

def reference_error(x: QuadState, ref: RefPoint) -> np.ndarray:
    return np.concatenate([x.p - ref.p, _log(ref.R.T @ x.R), x.v - ref.v])


class ReferenceFactor(BatchFactor):
    """Position, attitude and velocity tracking cost on one state."""

    def __init__(self, key: Key, ref: RefPoint, noise: NoiseModel):
        super().__init__([key], noise, "reference")
        self.ref = ref

    @classmethod
    def error_many(cls, factors, values):
        P, R, V, _ = _stack_states([v[0] for v in values])
        Pr = np.array([f.ref.p for f in factors])
        Rr = np.array([f.ref.R for f in factors])
        Vr = np.array([f.ref.v for f in factors])
        return np.hstack([P - Pr, log_many(_T(Rr) @ R), V - Vr])

    @classmethod
    def linearize_many(cls, factors, values):
        E = cls.error_many(factors, values)
        J = np.zeros((len(factors), 9, 12))
        idx = np.arange(3)
        J[:, idx, idx] = 1.0
        J[:, 3:6, 3:6] = dexp_right_inv_many(E[:, 3:6])
        J[:, 6 + idx, 6 + idx] = 1.0
        return E, [J]


def reference_factor(key: Key, ref: RefPoint, noise: NoiseModel) -> Factor:
    return ReferenceFactor(key, ref, noise)


# ---------------------------------------------------------------- actuation

def caf_error(w: Wrench, u: RotorSpeeds, params: QuadParams) -> np.ndarray:
    """Control allocation: commanded wrench minus the wrench the rotors produce."""
    return w.vector() - allocate(u, params).vector()


class CafFactor(BatchFactor):
    """Ties a wrench variable to the rotor speeds that realise it."""

    def __init__(self, key_w: Key, key_u: Key, params: QuadParams, noise: NoiseModel):
        super().__init__([key_w, key_u], noise, "caf")
        self.params = params

    def shared(self) -> tuple:
        return (self.params,)

    @classmethod
    def _parts(cls, factors, values):
        B = wrench_matrix(factors[0].params)
        Wv = np.array([[v[0].thrust, *v[0].moment] for v in values])
        S = np.array([v[1].speeds for v in values])
        return Wv - (S * S) @ B.T, B, S

    @classmethod
    def error_many(cls, factors, values):
        return cls._parts(factors, values)[0]

    @classmethod
    def linearize_many(cls, factors, values):
        E, B, S = cls._parts(factors, values)
        return E, [_eye_stack(len(factors), 4), -B[None, :, :] * (2.0 * S)[:, None, :]]


def caf_factor(key_w: Key, key_u: Key, params: QuadParams, noise: NoiseModel) -> Factor:
    return CafFactor(key_w, key_u, params, noise)


def clf_error(u: RotorSpeeds, params: QuadParams) -> np.ndarray:
    """Hinge loss keeping each rotor inside ``[u_min + u_ths, u_max - u_ths]``."""
    s = np.asarray(getattr(u, "speeds", u), dtype=float)
    lo = params.u_min + params.u_ths
    hi = params.u_max - params.u_ths
    return np.where(s < lo, lo - s, np.where(s >= hi, s - params.u_max + params.u_ths, 0.0))


class ClfFactor(BatchFactor):
    """Rotor speed limits as a one-sided penalty."""

    def __init__(self, key_u: Key, params: QuadParams, noise: NoiseModel):
        super().__init__([key_u], noise, "clf")
        self.params = params

    def shared(self) -> tuple:
        return (self.params,)

    @classmethod
    def error_many(cls, factors, values):
        return clf_error(np.array([v[0].speeds for v in values]), factors[0].params)

    @classmethod
    def linearize_many(cls, factors, values):
        prm = factors[0].params
        S = np.array([v[0].speeds for v in values])
        slope = np.where(S < prm.u_min + prm.u_ths, -1.0,
                         np.where(S >= prm.u_max - prm.u_ths, 1.0, 0.0))
        J = np.zeros(S.shape + (S.shape[1],))
        k = np.arange(S.shape[1])
        J[:, k, k] = slope
        return clf_error(S, prm), [J]


def clf_factor(key_u: Key, params: QuadParams, noise: NoiseModel) -> Factor:
    return ClfFactor(key_u, params, noise)


def input_rate_error(w0: Wrench, w1: Wrench) -> np.ndarray:
    return w0.vector() - w1.vector()


class InputRateFactor(BatchFactor):
    """Penalises the change between consecutive wrench commands."""

    def __init__(self, key0: Key, key1: Key, noise: NoiseModel):
        super().__init__([key0, key1], noise, "input_rate")

    @classmethod
    def error_many(cls, factors, values):
        return np.array([[v[0].thrust - v[1].thrust, *(v[0].moment - v[1].moment)] for v in values])

    @classmethod
    def linearize_many(cls, factors, values):
        n = len(factors)
        eye = _eye_stack(n, 4)
        return cls.error_many(factors, values), [eye, -eye]


def input_rate_factor(key0: Key, key1: Key, noise: NoiseModel) -> Factor:
    return InputRateFactor(key0, key1, noise)
