"""Continuous error dynamics, discretization and IMU mechanization.

Error-state ordering is ``[phi, dv, dp, dbg, dba]``; the noise vector is
``[w_g, w_a, w_wg, w_wa]`` (gyro white, accel white, gyro-bias drive, accel-bias drive).
The global frame may rotate at ``omega`` (earth rate expressed in that frame).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import geometry as geo
from .state import CLONE_DIM, IMU_DIM, ImuState, Variant, symmetrize

EARTH_RATE = 7.292115e-5


@dataclass(frozen=True)
class ImuSample:
    timestamp: float
    gyro: np.ndarray
    accel: np.ndarray


@dataclass(frozen=True)
class NoiseParams:
    sigma_g: float = 1.7e-4
    sigma_a: float = 2.0e-3
    sigma_bg: float = 1.9e-5
    sigma_ba: float = 3.0e-3

    def __post_init__(self):
        if min(self.sigma_g, self.sigma_a, self.sigma_bg, self.sigma_ba) < 0:
            raise ValueError("noise densities must be non-negative")

    @property
    def Qc(self) -> np.ndarray:
        d = np.repeat([self.sigma_g, self.sigma_a, self.sigma_bg, self.sigma_ba], 3) ** 2
        return np.diag(d)


@dataclass(frozen=True)
class WorldParams:
    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -9.81]))
    omega: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @classmethod
    def with_earth_rotation(cls, latitude_deg: float = 45.0, g: float = 9.81) -> "WorldParams":
        lat = np.radians(latitude_deg)
        # local east-north-up axes
        return cls(np.array([0.0, 0.0, -g]), EARTH_RATE * np.array([0.0, np.cos(lat), np.sin(lat)]))


@dataclass
class TransitionBundle:
    """Discrete transition of the IMU block; clones carry identity and no noise."""

    phi_imu: np.ndarray
    qd_imu: np.ndarray
    n_clones: int = 0

    @property
    def dim(self) -> int:
        return IMU_DIM + CLONE_DIM * self.n_clones

    @property
    def Phi(self) -> np.ndarray:
        M = np.eye(self.dim)
        M[:IMU_DIM, :IMU_DIM] = self.phi_imu
        return M

    @property
    def Qd(self) -> np.ndarray:
        M = np.zeros((self.dim, self.dim))
        M[:IMU_DIM, :IMU_DIM] = self.qd_imu
        return M


def continuous_jacobians(state: ImuState, world: WorldParams, variant: Variant = Variant.DST, accel=None):
    """Return ``(F_b, G_b)`` of the error dynamics linearized at ``state``.

    ``accel`` (raw specific force) is needed only by the ``ekf`` variant, whose velocity
    row depends on the specific force; the transformed variants use gravity instead.
    """
    variant = Variant(variant)
    R = state.R
    W = geo.skew(world.omega)
    Vx = geo.skew(state.v)
    Px = geo.skew(state.p)
    I3 = np.eye(3)
    F = np.zeros((15, 15))
    G = np.zeros((15, 12))

    F[0:3, 0:3] = -W
    F[0:3, 9:12] = -R
    G[0:3, 0:3] = -R

    if variant.transforms_velocity:
        F[3:6, 0:3] = -geo.skew(world.gravity) - Vx @ W
        F[3:6, 9:12] = Vx @ R
        G[3:6, 0:3] = Vx @ R
    else:
        if accel is None:
            raise ValueError("the ekf variant needs the specific force")
        f_global = R @ (np.asarray(accel) - state.ba)
        F[3:6, 0:3] = geo.skew(f_global)
    F[3:6, 3:6] = -2.0 * W
    F[3:6, 12:15] = R
    G[3:6, 3:6] = R

    F[6:9, 3:6] = I3
    if variant.transforms_position:
        F[6:9, 0:3] = Px @ W
        F[6:9, 9:12] = Px @ R
        G[6:9, 0:3] = Px @ R
    elif variant.transforms_velocity:
        F[6:9, 0:3] = Vx

    G[9:12, 6:9] = I3
    G[12:15, 9:12] = I3
    return F, G


def discretize(F, G, noise: NoiseParams, dt: float, n_clones: int = 0, method: str = "series",
               noise_rule: str = "rectangular") -> TransitionBundle:
    """Discretize the IMU block.

    ``method="series"`` keeps ``I + F dt + (F dt)^2 / 2``; ``"expm"`` uses the exact
    exponential. ``noise_rule="trapezoidal"`` averages the noise mapped at both ends.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    Fdt = F * dt
    if method == "series":
        Phi = np.eye(F.shape[0]) + Fdt + 0.5 * Fdt @ Fdt
    elif method == "expm":
        Phi = scipy.linalg.expm(Fdt)
    else:
        raise ValueError(f"unknown discretization method {method!r}")
    GQG = G @ noise.Qc @ G.T
    if noise_rule == "trapezoidal":
        Qd = 0.5 * (Phi @ GQG @ Phi.T + GQG) * dt
    else:
        Qd = Phi @ GQG @ Phi.T * dt
    return TransitionBundle(Phi, symmetrize(Qd), n_clones)


def propagate_mean(state: ImuState, sample: ImuSample, world: WorldParams, dt: float) -> ImuState:
    """Advance the IMU state by ``dt`` holding ``sample`` constant over the interval.

    With zero earth rate the rotation, velocity and position increments are the exact
    closed-form integrals for constant body rate and specific force.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    R = state.R
    theta = (np.asarray(sample.gyro) - state.bg) * dt
    f = np.asarray(sample.accel) - state.ba
    g = world.gravity
    R_new = R @ geo.so3_exp(theta)
    v_new = state.v + R @ geo.left_jacobian(theta) @ f * dt + g * dt
    p_new = state.p + state.v * dt + R @ geo.second_integral_jacobian(theta) @ f * dt**2 + 0.5 * g * dt**2
    if np.any(world.omega):
        coriolis = np.cross(world.omega, state.v)
        R_new = geo.so3_exp(-world.omega * dt) @ R_new
        v_new = v_new - 2.0 * coriolis * dt
        p_new = p_new - coriolis * dt**2
    return ImuState(geo.rot_to_quat(R_new), v_new, p_new, state.bg.copy(), state.ba.copy())


def propagate_covariance(P: np.ndarray, bundle: TransitionBundle) -> np.ndarray:
    """``P <- Phi P Phi^T + Qd`` exploiting identity over the clone blocks."""
    if P.shape != (bundle.dim, bundle.dim):
        raise ValueError(f"covariance {P.shape} does not match transition dim {bundle.dim}")
    Phi = bundle.phi_imu
    out = P.copy()
    out[:IMU_DIM, :IMU_DIM] = Phi @ P[:IMU_DIM, :IMU_DIM] @ Phi.T + bundle.qd_imu
    if P.shape[0] > IMU_DIM:
        cross = Phi @ P[:IMU_DIM, IMU_DIM:]
        out[:IMU_DIM, IMU_DIM:] = cross
        out[IMU_DIM:, :IMU_DIM] = cross.T
    return symmetrize(out)
