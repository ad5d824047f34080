"""Navigation state, clone window and error-state bookkeeping.

Error conventions (estimate ``~`` versus truth), for attitude ``R = Exp(phi) R~``:

* ``ekf`` - classical: ``dv = v~ - v``, ``dp = p~ - p``
* ``st``  - velocity transformed: ``dv = Exp(phi) v~ - v``, ``dp = p~ - p``
* ``dst`` - velocity and position transformed: ``dp = Exp(phi) p~ - p`` as well

Bias errors are ``db = b - b~`` (truth minus estimate), the sign under which the
continuous error dynamics in :mod:`dstvio.propagation` hold with ``-R`` on the gyro-bias
column of the attitude row. Clone errors use the same rule as the IMU pose, frozen at
clone time.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from . import geometry as geo

IMU_DIM = 15
CLONE_DIM = 6
ATT = slice(0, 3)
VEL = slice(3, 6)
POS = slice(6, 9)
BG = slice(9, 12)
BA = slice(12, 15)


class Variant(str, Enum):
    EKF = "ekf"
    ST = "st"
    DST = "dst"

    @property
    def transforms_velocity(self) -> bool:
        return self is not Variant.EKF

    @property
    def transforms_position(self) -> bool:
        return self is Variant.DST


@dataclass
class ImuState:
    q: np.ndarray = field(default_factory=geo.quat_identity)
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    p: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bg: np.ndarray = field(default_factory=lambda: np.zeros(3))
    ba: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @property
    def R(self) -> np.ndarray:
        """Body-to-global rotation."""
        return geo.quat_to_rot(self.q)

    def copy(self) -> "ImuState":
        return ImuState(self.q.copy(), self.v.copy(), self.p.copy(), self.bg.copy(), self.ba.copy())


@dataclass
class CloneState:
    clone_id: int
    timestamp: float
    q: np.ndarray
    p: np.ndarray

    @property
    def R(self) -> np.ndarray:
        return geo.quat_to_rot(self.q)


@dataclass
class NavState:
    imu: ImuState = field(default_factory=ImuState)
    clones: list = field(default_factory=list)
    max_clones: int = 11
    next_clone_id: int = 0

    @property
    def layout(self) -> "ErrorLayout":
        return ErrorLayout(len(self.clones))

    def clone_index(self, clone_id: int) -> int:
        for n, c in enumerate(self.clones):
            if c.clone_id == clone_id:
                return n
        raise KeyError(clone_id)

    def copy(self) -> "NavState":
        return NavState(self.imu.copy(), list(self.clones), self.max_clones, self.next_clone_id)


@dataclass(frozen=True)
class ErrorLayout:
    n_clones: int

    @property
    def dim(self) -> int:
        return IMU_DIM + CLONE_DIM * self.n_clones

    def clone(self, n: int) -> slice:
        start = IMU_DIM + CLONE_DIM * n
        return slice(start, start + CLONE_DIM)

    def clone_att(self, n: int) -> slice:
        start = IMU_DIM + CLONE_DIM * n
        return slice(start, start + 3)

    def clone_pos(self, n: int) -> slice:
        start = IMU_DIM + CLONE_DIM * n + 3
        return slice(start, start + 3)


def convention_transform(imu: ImuState, variant: Variant) -> np.ndarray:
    """15x15 ``T`` with ``dx_variant = T dx_ekf`` to first order at ``imu``."""
    variant = Variant(variant)
    T = np.eye(IMU_DIM)
    if variant.transforms_velocity:
        T[VEL, ATT] = -geo.skew(imu.v)
    if variant.transforms_position:
        T[POS, ATT] = -geo.skew(imu.p)
    return T


def convert_covariance(P: np.ndarray, imu: ImuState, source: Variant, target: Variant) -> np.ndarray:
    """Re-express an IMU-block covariance from one error convention in another."""
    T_src = convention_transform(imu, source)
    M = convention_transform(imu, target) @ np.linalg.solve(T_src.T, np.eye(IMU_DIM)).T
    return symmetrize(M @ P @ M.T)


def symmetrize(P: np.ndarray) -> np.ndarray:
    return 0.5 * (P + P.T)


def _correct_position(p, E, dp, transformed: bool):
    return (E @ p if transformed else p) - dp


def inject_correction(state: NavState, dx, variant: Variant = Variant.DST) -> NavState:
    """Remove an estimated error ``dx`` from ``state`` (``dx`` laid out per ``state.layout``)."""
    variant = Variant(variant)
    dx = np.asarray(dx, dtype=float)
    layout = state.layout
    if dx.shape != (layout.dim,):
        raise ValueError(f"correction has shape {dx.shape}, layout needs ({layout.dim},)")

    imu = state.imu
    phi = dx[ATT]
    E = geo.so3_exp(phi)
    v = E @ imu.v - dx[VEL] if variant.transforms_velocity else imu.v - dx[VEL]
    new_imu = ImuState(
        q=geo.quat_mul(geo.quat_from_small_angle(phi), imu.q),
        v=v,
        p=_correct_position(imu.p, E, dx[POS], variant.transforms_position),
        bg=imu.bg + dx[BG],
        ba=imu.ba + dx[BA],
    )
    clones = []
    for n, c in enumerate(state.clones):
        phi_c = dx[layout.clone_att(n)]
        Ec = geo.so3_exp(phi_c)
        clones.append(
            replace(
                c,
                q=geo.quat_mul(geo.quat_from_small_angle(phi_c), c.q),
                p=_correct_position(c.p, Ec, dx[layout.clone_pos(n)], variant.transforms_position),
            )
        )
    return NavState(new_imu, clones, state.max_clones, state.next_clone_id)


def _pose_error(R_est, p_est, R_true, p_true, transformed: bool):
    phi = geo.so3_log(R_true @ R_est.T)
    E = geo.so3_exp(phi)
    dp = (E @ p_est if transformed else p_est) - p_true
    return phi, dp, E


def error_between(estimate: NavState, truth: NavState, variant: Variant = Variant.DST) -> np.ndarray:
    """Exact error of ``estimate`` relative to ``truth``; inverse of :func:`inject_correction`.

    Clones are matched by window position.
    """
    variant = Variant(variant)
    if len(estimate.clones) != len(truth.clones):
        raise ValueError("clone windows differ in length")
    layout = estimate.layout
    dx = np.zeros(layout.dim)
    e, t = estimate.imu, truth.imu
    phi, dp, E = _pose_error(e.R, e.p, t.R, t.p, variant.transforms_position)
    dx[ATT] = phi
    dx[VEL] = (E @ e.v if variant.transforms_velocity else e.v) - t.v
    dx[POS] = dp
    dx[BG] = t.bg - e.bg
    dx[BA] = t.ba - e.ba
    for n, (ce, ct) in enumerate(zip(estimate.clones, truth.clones)):
        phi_c, dp_c, _ = _pose_error(ce.R, ce.p, ct.R, ct.p, variant.transforms_position)
        dx[layout.clone_att(n)] = phi_c
        dx[layout.clone_pos(n)] = dp_c
    return dx


def augment_clone(state: NavState, P: np.ndarray, timestamp: float):
    """Append a clone of the current IMU pose and grow the covariance by six rows/cols."""
    if len(state.clones) >= state.max_clones:
        raise ValueError("clone window full; marginalize first")
    clone = CloneState(state.next_clone_id, float(timestamp), state.imu.q.copy(), state.imu.p.copy())
    new_state = NavState(state.imu, state.clones + [clone], state.max_clones, state.next_clone_id + 1)

    n = P.shape[0]
    rows = np.r_[0:3, 6:9]
    P_new = np.empty((n + CLONE_DIM, n + CLONE_DIM))
    P_new[:n, :n] = P
    P_new[n:, :n] = P[rows, :]
    P_new[:n, n:] = P[:, rows]
    P_new[n:, n:] = P[np.ix_(rows, rows)]
    return new_state, symmetrize(P_new)


def marginalize_oldest(state: NavState, P: np.ndarray):
    if not state.clones:
        raise ValueError("no clone to marginalize")
    keep = np.r_[0:IMU_DIM, IMU_DIM + CLONE_DIM : P.shape[0]]
    new_state = NavState(state.imu, state.clones[1:], state.max_clones, state.next_clone_id)
    return new_state, P[np.ix_(keep, keep)]


def remove_clone(state: NavState, P: np.ndarray, clone_id: int):
    n = state.clone_index(clone_id)
    start = IMU_DIM + CLONE_DIM * n
    keep = np.r_[0:start, start + CLONE_DIM : P.shape[0]]
    clones = state.clones[:n] + state.clones[n + 1 :]
    return NavState(state.imu, clones, state.max_clones, state.next_clone_id), P[np.ix_(keep, keep)]
