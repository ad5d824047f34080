"""Rotation arithmetic: Hamilton quaternions, SO(3) exponential and its Jacobians.

Quaternions are stored as ``numpy`` arrays ``[w, x, y, z]`` and are kept in the
canonical hemisphere ``w >= 0``. Attitude errors are left-multiplicative::

    R_true = Exp(phi) @ R_est        (equivalently R_est ~= (I - [phi x]) R_true)
"""
from __future__ import annotations

import math

import numpy as np

_SMALL = 1e-2
_I3 = np.eye(3)


def _norm(v: np.ndarray) -> float:
    return math.sqrt(float(v @ v))


def skew(v) -> np.ndarray:
    """Return the cross-product matrix ``[v x]`` so that ``skew(a) @ b == a x b``."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def cross(a, b) -> np.ndarray:
    """``a x b`` for single 3-vectors, without the overhead of ``np.cross``."""
    return np.array([a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]])


def vee(m: np.ndarray) -> np.ndarray:
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def _coeffs(theta: float):
    """Series-safe coefficients (sin t/t, (1-cos t)/t^2, (t-sin t)/t^3, (t^2/2+cos t-1)/t^4)."""
    t2 = theta * theta
    if theta < _SMALL:
        a = 1.0 - t2 / 6.0 + t2 * t2 / 120.0 - t2**3 / 5040.0
        b = 0.5 - t2 / 24.0 + t2 * t2 / 720.0 - t2**3 / 40320.0
        c = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0 - t2**3 / 362880.0
        d = 1.0 / 24.0 - t2 / 720.0 + t2 * t2 / 40320.0 - t2**3 / 3628800.0
        return a, b, c, d
    s, co = math.sin(theta), math.cos(theta)
    return s / theta, (1.0 - co) / t2, (theta - s) / (t2 * theta), (t2 / 2.0 + co - 1.0) / (t2 * t2)


def so3_exp(phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    a, b, _, _ = _coeffs(_norm(phi))
    K = skew(phi)
    return _I3 + a * K + b * (K @ K)


def so3_log(R: np.ndarray) -> np.ndarray:
    cos_t = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = float(np.arccos(cos_t))
    w = vee(R - R.T) / 2.0
    if theta < _SMALL:
        # sin(t)/t from the antisymmetric part, series inverse
        return w * (1.0 + theta**2 / 6.0 + 7.0 * theta**4 / 360.0)
    if np.pi - theta < 1e-6:
        # near pi: axis from the symmetric part
        M = (R + np.eye(3)) / 2.0
        i = int(np.argmax(np.diag(M)))
        axis = M[:, i] / np.sqrt(M[i, i])
        axis = axis if axis @ w >= 0 else -axis
        return theta * axis / np.linalg.norm(axis)
    return w * theta / np.sin(theta)


def left_jacobian(phi) -> np.ndarray:
    """J_l(phi) = sum_n [phi x]^n / (n+1)!  (also the integral of Exp(s phi), s in [0, 1])."""
    phi = np.asarray(phi, dtype=float)
    _, b, c, _ = _coeffs(_norm(phi))
    K = skew(phi)
    return _I3 + b * K + c * (K @ K)


def right_jacobian(phi) -> np.ndarray:
    return left_jacobian(-np.asarray(phi, dtype=float))


def left_jacobian_inv(phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    theta = float(np.linalg.norm(phi))
    K = skew(phi)
    if theta < _SMALL:
        t2 = theta * theta
        e = 1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    else:
        e = 1.0 / theta**2 - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta))
    return np.eye(3) - 0.5 * K + e * (K @ K)


def second_integral_jacobian(phi) -> np.ndarray:
    """Gamma_2(phi) = sum_n [phi x]^n / (n+2)!  (integral of (1-s) Exp(s phi) over [0, 1])."""
    phi = np.asarray(phi, dtype=float)
    _, _, c, d = _coeffs(_norm(phi))
    K = skew(phi)
    return 0.5 * _I3 + c * K + d * (K @ K)


# --- quaternions ---------------------------------------------------------------------------


def quat_identity() -> np.ndarray:
    return np.array([1.0, 0.0, 0.0, 0.0])


def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    q = q / _norm(q)
    return -q if q[0] < 0 else q


def quat_mul(a, b) -> np.ndarray:
    """Hamilton product ``a (x) b``."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return quat_normalize(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_conj(q) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_rot(q) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def rot_to_quat(R: np.ndarray) -> np.ndarray:
    # Shepperd's method
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return quat_normalize(q)


def quat_from_small_angle(phi) -> np.ndarray:
    """Exact exponential ``[cos(|phi|/2), sin(|phi|/2) phi/|phi|]``; first order ``[1, phi/2]``."""
    phi = np.asarray(phi, dtype=float)
    half = 0.5 * float(np.linalg.norm(phi))
    if half < 1e-8:
        sinc = 1.0 - half * half / 6.0
    else:
        sinc = np.sin(half) / half
    return quat_normalize(np.concatenate([[np.cos(half)], 0.5 * sinc * phi]))


def apply_attitude_error(R_est: np.ndarray, phi) -> np.ndarray:
    """Corrected attitude ``Exp(phi) @ R_est`` for an estimate with error ``phi``."""
    return so3_exp(phi) @ R_est


def rot_z(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
