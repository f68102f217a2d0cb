"""Rotation group SO(3): hat/vee, exponential and logarithm maps, right Jacobians.

Perturbations are applied on the right everywhere in this package,
``R <- R @ exp_so3(delta)``, so the Jacobian that matters is the right one.
"""

from __future__ import annotations

import math

import numpy as np

# Below this angle the closed forms divide by ~0; Taylor branches take over.
SMALL_ANGLE = 1e-4
# Above pi - NEAR_PI the log extracts the axis from the symmetric part.
NEAR_PI = 1e-2
ORTHO_TOL = 1e-6

_I3 = np.eye(3)


def skew(v) -> np.ndarray:
    """Hat operator: ``skew(v) @ w == np.cross(v, w)``."""
    x, y, z = v[0], v[1], v[2]
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def cross(a, b) -> np.ndarray:
    """Cross product of two 3-vectors (cheaper than ``np.cross`` for one pair)."""
    return np.array([a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]])


def vee(S: np.ndarray) -> np.ndarray:
    """Inverse of :func:`skew` (reads the antisymmetric part)."""
    return 0.5 * np.array([S[2, 1] - S[1, 2], S[0, 2] - S[2, 0], S[1, 0] - S[0, 1]])


def exp_so3(omega) -> np.ndarray:
    """Rodrigues formula, rotation vector -> rotation matrix."""
    omega = np.asarray(omega, dtype=float)
    theta2 = float(omega @ omega)
    W = skew(omega)
    if theta2 < SMALL_ANGLE * SMALL_ANGLE:
        # 1 - theta^2/6 and 1/2 - theta^2/24 series
        A = 1.0 - theta2 / 6.0
        B = 0.5 - theta2 / 24.0
    else:
        theta = math.sqrt(theta2)
        A = math.sin(theta) / theta
        B = (1.0 - math.cos(theta)) / theta2
    return _I3 + A * W + B * (W @ W)


def is_rotation(R, tol: float = ORTHO_TOL) -> bool:
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        return False
    return bool(np.max(np.abs(R.T @ R - _I3)) <= tol and abs(np.linalg.det(R) - 1.0) <= tol)


def _log(R: np.ndarray) -> np.ndarray:
    c = 0.5 * (R[0, 0] + R[1, 1] + R[2, 2] - 1.0)
    c = min(1.0, max(-1.0, c))
    axis2s = 2.0 * vee(R)  # 2 sin(theta) * axis
    s = 0.5 * math.sqrt(float(axis2s @ axis2s))
    theta = math.atan2(s, c)
    if theta < SMALL_ANGLE:
        return 0.5 * axis2s * (1.0 + theta * theta / 6.0)
    if theta > math.pi - NEAR_PI:
        # (R + R^T)/2 - cos(theta) I = (1 - cos(theta)) a a^T
        A = 0.5 * (R + R.T) - c * _I3
        k = int(np.argmax(np.diag(A)))
        a = A[:, k] / math.sqrt(A[k, k] * (1.0 - c))
        a /= np.linalg.norm(a)
        if a @ axis2s < 0.0:
            a = -a
        return theta * a
    return (theta / (2.0 * s)) * axis2s


def log_so3(R) -> np.ndarray:
    """Rotation matrix -> rotation vector with norm in [0, pi].

    Raises ``ValueError`` when ``R`` is not orthonormal with det 1.
    At exactly pi the axis sign is arbitrary (both representatives are valid).
    """
    R = np.asarray(R, dtype=float)
    if not is_rotation(R):
        raise ValueError("log_so3: input is not a rotation matrix")
    return _log(R)


def dexp_right(omega) -> np.ndarray:
    """Right Jacobian of the exponential map.

    ``exp_so3(w + d) ~= exp_so3(w) @ exp_so3(dexp_right(w) @ d)``. Closed form
    ``I - a K + b K^2`` with ``K = skew(w)/theta``, ``a = 2 sin^2(theta/2)/theta``
    and ``b = 1 - sin(theta)/theta``.
    """
    omega = np.asarray(omega, dtype=float)
    theta2 = float(omega @ omega)
    W = skew(omega)
    if theta2 < SMALL_ANGLE * SMALL_ANGLE:
        return _I3 - 0.5 * W + (W @ W) / 6.0
    theta = math.sqrt(theta2)
    K = W / theta
    a = 2.0 * math.sin(0.5 * theta) ** 2 / theta
    b = 1.0 - math.sin(theta) / theta
    return _I3 - a * K + b * (K @ K)


def dexp_right_inv(omega) -> np.ndarray:
    """Inverse of :func:`dexp_right`; the Jacobian of ``Log(R @ Exp(d))`` at d=0."""
    omega = np.asarray(omega, dtype=float)
    theta2 = float(omega @ omega)
    W = skew(omega)
    if theta2 < SMALL_ANGLE * SMALL_ANGLE:
        return _I3 + 0.5 * W + (W @ W) / 12.0
    theta = math.sqrt(theta2)
    coef = 1.0 / theta2 - (1.0 + math.cos(theta)) / (2.0 * theta * math.sin(theta))
    return _I3 + 0.5 * W + coef * (W @ W)


def project_to_rotation(M) -> np.ndarray:
    """Closest rotation in Frobenius norm (polar decomposition via SVD)."""
    U, _, Vt = np.linalg.svd(np.asarray(M, dtype=float))
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


# ---------------------------------------------------------------- batched forms
# Same maps over a leading axis: (n, 3) vectors and (n, 3, 3) matrices.

def skew_many(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    S = np.zeros(v.shape[:-1] + (3, 3))
    S[..., 0, 1] = -v[..., 2]
    S[..., 0, 2] = v[..., 1]
    S[..., 1, 0] = v[..., 2]
    S[..., 1, 2] = -v[..., 0]
    S[..., 2, 0] = -v[..., 1]
    S[..., 2, 1] = v[..., 0]
    return S


def _series_coeffs(theta2: np.ndarray, small, exact):
    # Evaluate ``exact`` only where theta is not tiny; ``small`` elsewhere.
    big = theta2 >= SMALL_ANGLE * SMALL_ANGLE
    th = np.sqrt(np.where(big, theta2, 1.0))
    return [np.where(big, e, s) for s, e in zip(small(theta2), exact(th, np.where(big, theta2, 1.0)))]


def exp_many(omega: np.ndarray) -> np.ndarray:
    omega = np.asarray(omega, dtype=float)
    theta2 = np.einsum("ni,ni->n", omega, omega)
    A, B = _series_coeffs(
        theta2,
        lambda t2: (1.0 - t2 / 6.0, 0.5 - t2 / 24.0),
        lambda th, t2: (np.sin(th) / th, (1.0 - np.cos(th)) / t2),
    )
    W = skew_many(omega)
    return np.eye(3) + A[:, None, None] * W + B[:, None, None] * (W @ W)


def log_many(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    c = np.clip(0.5 * (R[:, 0, 0] + R[:, 1, 1] + R[:, 2, 2] - 1.0), -1.0, 1.0)
    axis2s = np.stack([R[:, 2, 1] - R[:, 1, 2], R[:, 0, 2] - R[:, 2, 0], R[:, 1, 0] - R[:, 0, 1]], axis=1)
    s = 0.5 * np.sqrt(np.einsum("ni,ni->n", axis2s, axis2s))
    theta = np.arctan2(s, c)
    small = theta < SMALL_ANGLE
    k = np.where(small, 0.5 * (1.0 + theta * theta / 6.0), theta / (2.0 * np.where(small, 1.0, s)))
    out = k[:, None] * axis2s
    for n in np.flatnonzero(theta > math.pi - NEAR_PI):
        out[n] = _log(R[n])
    return out


def dexp_right_many(omega: np.ndarray) -> np.ndarray:
    omega = np.asarray(omega, dtype=float)
    theta2 = np.einsum("ni,ni->n", omega, omega)
    # I - a' W + b' W^2 with a' = (1 - cos)/theta^2, b' = (theta - sin)/theta^3
    A, B = _series_coeffs(
        theta2,
        lambda t2: (0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0),
        lambda th, t2: ((1.0 - np.cos(th)) / t2, (th - np.sin(th)) / (t2 * th)),
    )
    W = skew_many(omega)
    return np.eye(3) - A[:, None, None] * W + B[:, None, None] * (W @ W)


def dexp_right_inv_many(omega: np.ndarray) -> np.ndarray:
    omega = np.asarray(omega, dtype=float)
    theta2 = np.einsum("ni,ni->n", omega, omega)
    (C,) = _series_coeffs(
        theta2,
        lambda t2: (1.0 / 12.0 + t2 / 720.0,),
        lambda th, t2: (1.0 / t2 - (1.0 + np.cos(th)) / (2.0 * th * np.sin(th)),),
    )
    W = skew_many(omega)
    return np.eye(3) + 0.5 * W + C[:, None, None] * (W @ W)
