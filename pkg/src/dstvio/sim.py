"""Synthetic IMU/camera data with exact ground truth.

Trajectories are defined by a desired pose/velocity curve. The generator picks, for
each IMU interval, the constant body rate and specific force that carry the true state
onto the curve's attitude and velocity at the end of the interval under the same
zero-order-hold mechanization the filter uses. The ground truth is that integrated
state, so noise-free mechanization of the emitted samples reproduces it to rounding.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from .po_update import Extrinsics
from .propagation import ImuSample, NoiseParams, WorldParams, propagate_mean
from .state import ImuState

TRAJECTORY_KINDS = ("circle", "line", "random", "static")


@dataclass
class SimConfig:
    trajectory_kind: str = "circle"
    duration_s: float = 60.0
    imu_rate_hz: float = 200.0
    cam_rate_hz: float = 20.0
    noise: NoiseParams = field(default_factory=NoiseParams)
    sigma_px: float = 1.0
    focal_px: float = 460.0
    max_clones: int = 11
    earth_rotation: bool = False
    deprivation: list = field(default_factory=list)  # [(start_s, end_s), ...]
    seed: int = 0
    radius_m: float = 6.0
    speed_m_s: float = 1.5
    n_landmarks: int = 300
    max_features: int = 60
    half_fov_rad: float = np.radians(45.0)
    init_bias_g: float = 5e-4
    init_bias_a: float = 2e-2
    excite: bool = False  # add vertical and heading oscillation to the circle and line

    def __post_init__(self):
        if self.trajectory_kind not in TRAJECTORY_KINDS:
            raise ValueError(f"unknown trajectory kind {self.trajectory_kind!r}")
        if self.imu_rate_hz < self.cam_rate_hz:
            raise ValueError("IMU rate must be at least the camera rate")
        ratio = self.imu_rate_hz / self.cam_rate_hz
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("IMU rate must be an integer multiple of the camera rate")
        if self.n_landmarks < 20:
            raise ValueError("need at least 20 landmarks")
        if self.duration_s <= 0:
            raise ValueError("duration must be positive")
        for a, b in self.deprivation:
            if not 0 <= a < b:
                raise ValueError(f"bad deprivation interval {a}:{b}")

    @property
    def world(self) -> WorldParams:
        return WorldParams.with_earth_rotation() if self.earth_rotation else WorldParams()

    @property
    def sigma_norm(self) -> float:
        """Pixel noise in normalized image-plane units."""
        return self.sigma_px / self.focal_px

    @property
    def cam_stride(self) -> int:
        return int(round(self.imu_rate_hz / self.cam_rate_hz))

    def deprived(self, t: float) -> bool:
        return any(a <= t < b for a, b in self.deprivation)


@dataclass
class Truth:
    t: np.ndarray
    q: np.ndarray  # (n, 4) [w, x, y, z]
    v: np.ndarray
    p: np.ndarray
    bg: np.ndarray
    ba: np.ndarray

    def state(self, n: int) -> ImuState:
        return ImuState(self.q[n].copy(), self.v[n].copy(), self.p[n].copy(), self.bg[n].copy(), self.ba[n].copy())

    def index(self, t: float) -> int:
        n = int(np.argmin(np.abs(self.t - t)))
        if abs(self.t[n] - t) > 1e-6:
            raise KeyError(f"no truth sample at t={t}")
        return n


@dataclass
class SimData:
    config: SimConfig
    imu_t: np.ndarray
    gyro: np.ndarray
    accel: np.ndarray
    feat_t: np.ndarray
    feat_id: np.ndarray
    feat_xy: np.ndarray  # (n, 2) normalized coordinates
    truth: Truth
    landmarks: np.ndarray
    ext: Extrinsics = field(default_factory=Extrinsics.forward_looking)

    def imu_samples(self):
        for t, g, a in zip(self.imu_t, self.gyro, self.accel):
            yield ImuSample(float(t), g, a)

    def cam_times(self) -> np.ndarray:
        return self.imu_t[:: self.config.cam_stride]

    def frames(self) -> dict:
        """Camera time -> list of (feature_id, [x, y, 1])."""
        out = {float(t): [] for t in self.cam_times()}
        for t, f, xy in zip(self.feat_t, self.feat_id, self.feat_xy):
            out.setdefault(float(t), []).append((int(f), np.array([xy[0], xy[1], 1.0])))
        return out


# --- desired curves ----------------------------------------------------------------------


def _heading_attitude(vel, roll=0.0, pitch=0.0):
    yaw = np.arctan2(vel[1], vel[0])
    return geo.rot_z(yaw) @ geo.so3_exp([0.0, pitch, 0.0]) @ geo.so3_exp([roll, 0.0, 0.0])


class _Curve:
    """Desired attitude (body->global) and velocity as functions of time."""

    def __init__(self, config: SimConfig, rng):
        self.kind = config.trajectory_kind
        self.r = config.radius_m
        self.s = config.speed_m_s
        self.excite = config.excite
        if self.kind == "random":
            # heading, speed and climb rate are each a sum of a few random sinusoids
            self.freqs = rng.uniform(0.02, 0.15, size=(3, 3))
            self.phases = rng.uniform(0, 2 * np.pi, size=(3, 3))
            self.amps = np.array([[0.8, 0.4, 0.2], [0.25, 0.1, 0.05], [0.3, 0.15, 0.1]])
            self.att_f = rng.uniform(0.1, 0.3, size=2)
            self.att_ph = rng.uniform(0, 2 * np.pi, size=2)

    def __call__(self, t):
        if self.kind == "static":
            return np.eye(3), np.zeros(3)
        if self.kind == "circle":
            w = self.s / self.r
            v = self.s * np.array([-np.sin(w * t), np.cos(w * t), 0.0])
            if not self.excite:
                return geo.rot_z(w * t + np.pi / 2), v
            v[2] = 0.5 * np.cos(1.3 * t)
            return _heading_attitude(v, 0.1 * np.sin(0.9 * t), 0.05 * np.cos(0.7 * t)), v
        if self.kind == "line":
            # forward motion with a gently varying speed
            v = np.array([self.s * (1.0 + 0.3 * np.sin(0.4 * t)), 0.0, 0.0])
            if not self.excite:
                return np.eye(3), v
            heading = 0.3 * np.sin(0.8 * t)
            v = np.array([v[0] * np.cos(heading), v[0] * np.sin(heading), 0.3 * np.sin(1.1 * t)])
            return _heading_attitude(v, 0.08 * np.sin(1.5 * t)), v
        heading, speed, climb = (self.amps * np.sin(2 * np.pi * self.freqs * t + self.phases)).sum(axis=1)
        speed = self.s * (1.0 + speed)
        v = np.array([speed * np.cos(heading), speed * np.sin(heading), climb])
        roll, pitch = 0.05 * np.sin(2 * np.pi * self.att_f * t + self.att_ph)
        return _heading_attitude(v, roll, pitch), v

    def start_position(self):
        if self.kind == "circle":
            return np.array([self.r, 0.0, 0.0])
        return np.zeros(3)


def _track_inputs(state: ImuState, R_next, v_next, world: WorldParams, dt):
    """Body rate and specific force that carry ``state`` onto ``(R_next, v_next)`` in one ZOH step."""
    R = state.R
    R_target = geo.so3_exp(world.omega * dt) @ R_next if np.any(world.omega) else R_next
    theta = geo.so3_log(R.T @ R_target)
    dv = v_next - state.v - world.gravity * dt + 2.0 * geo.cross(world.omega, state.v) * dt
    f = np.linalg.solve(R @ geo.left_jacobian(theta), dv / dt)
    return theta / dt + state.bg, f + state.ba


def _landmarks(config: SimConfig, positions, rng):
    lo, hi = positions.min(axis=0), positions.max(axis=0)
    margin = np.array([12.0, 12.0, 0.0])
    lo, hi = lo - margin, hi + margin
    lo[2], hi[2] = positions[:, 2].min() - 3.0, positions[:, 2].max() + 3.0
    out = []
    sub = positions[:: max(1, len(positions) // 400)]
    while len(out) < config.n_landmarks:
        cand = rng.uniform(lo, hi, size=(4 * config.n_landmarks, 3))
        d = np.min(np.linalg.norm(cand[:, None, :2] - sub[None, :, :2], axis=2), axis=1)
        out.extend(cand[d > 2.0])
    return np.array(out[: config.n_landmarks])


def generate(config: SimConfig, ext: Extrinsics | None = None) -> SimData:
    """Deterministic under ``config.seed`` (numpy PCG64 via ``default_rng``)."""
    ext = ext or Extrinsics.forward_looking()
    rng = np.random.default_rng(config.seed)
    world = config.world
    noise = config.noise
    dt = 1.0 / config.imu_rate_hz
    n = int(round(config.duration_s * config.imu_rate_hz)) + 1
    t = np.arange(n) * dt
    curve = _Curve(config, rng)

    R0, v0 = curve(0.0)
    bg = config.init_bias_g * rng.normal(size=3)
    ba = config.init_bias_a * rng.normal(size=3)
    if config.trajectory_kind == "static":
        bg, ba = np.zeros(3), np.zeros(3)
    state = ImuState(geo.rot_to_quat(R0), v0, curve.start_position(), bg, ba)

    q = np.zeros((n, 4))
    v = np.zeros((n, 3))
    p = np.zeros((n, 3))
    bgs = np.zeros((n, 3))
    bas = np.zeros((n, 3))
    gyro_true = np.zeros((n, 3))
    accel_true = np.zeros((n, 3))
    for k in range(n):
        q[k], v[k], p[k], bgs[k], bas[k] = state.q, state.v, state.p, state.bg, state.ba
        R_next, v_next = curve(t[k] + dt)
        # inputs are computed against the bias-free rates; biases are added to the measurements below
        clean = ImuState(state.q, state.v, state.p, np.zeros(3), np.zeros(3))
        g, a = _track_inputs(clean, R_next, v_next, world, dt)
        gyro_true[k], accel_true[k] = g, a
        state = propagate_mean(clean, ImuSample(t[k], g, a), world, dt)
        state.bg = bgs[k] + noise.sigma_bg * np.sqrt(dt) * rng.normal(size=3)
        state.ba = bas[k] + noise.sigma_ba * np.sqrt(dt) * rng.normal(size=3)

    gyro = gyro_true + bgs + noise.sigma_g / np.sqrt(dt) * rng.normal(size=(n, 3))
    accel = accel_true + bas + noise.sigma_a / np.sqrt(dt) * rng.normal(size=(n, 3))
    truth = Truth(t, q, v, p, bgs, bas)

    landmarks = _landmarks(config, p, rng)
    ft, fid, fxy = [], [], []
    tan_fov = np.tan(config.half_fov_rad)
    for k in range(0, n, config.cam_stride):
        if config.deprived(t[k]):
            continue
        R_b = geo.quat_to_rot(q[k])
        R_cam = ext.R_bC @ R_b.T
        X = (landmarks - (p[k] + R_b @ ext.p_bC)) @ R_cam.T
        with np.errstate(divide="ignore", invalid="ignore"):
            xy = X[:, :2] / X[:, 2:3]
        ok = (X[:, 2] > 0.5) & (np.abs(xy) < tan_fov).all(axis=1) & (X[:, 2] < 40.0)
        ids = np.flatnonzero(ok)
        if len(ids) > config.max_features:
            # prefer the lowest ids so tracks persist across frames
            ids = ids[: config.max_features]
        xy = xy[ids] + config.sigma_norm * rng.normal(size=(len(ids), 2))
        ft.extend([t[k]] * len(ids))
        fid.extend(ids.tolist())
        fxy.extend(xy.tolist())
    return SimData(config, t, gyro, accel, np.array(ft), np.array(fid, dtype=int),
                   np.array(fxy).reshape(-1, 2), truth, landmarks, ext)
