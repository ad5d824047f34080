"""Sliding-window visual-inertial filter in four configurations.

``full`` combines the double-transformed error with the pose-only update; ``no-st``
keeps the pose-only update with classical errors; ``no-po`` keeps the transformed
errors with the triangulate-and-project update; ``baseline`` uses neither.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .po_update import (
    DegenerateBaseline, Extrinsics, FeatureTrack, NegativeDepth, build_po_block, camera_poses, chi2_gate, compress,
    ekf_update, stack_blocks,
)
from .propagation import NoiseParams, WorldParams, continuous_jacobians, discretize, propagate_mean
from .state import (
    ATT, IMU_DIM, POS, ImuState, NavState, Variant, augment_clone, error_between, marginalize_oldest,
    symmetrize,
)
from .triangulation import TriangulationFailure, msckf_block

VARIANTS = {
    "full": (Variant.DST, "po"),
    "no-st": (Variant.EKF, "po"),
    "no-po": (Variant.DST, "msckf"),
    "baseline": (Variant.EKF, "msckf"),
}


PSD_TOL = 1e-10


class NumericalFailure(RuntimeError):
    """Covariance lost symmetry/positive semi-definiteness or the state went non-finite."""


@dataclass
class FilterConfig:
    variant: str = "full"
    noise: NoiseParams = field(default_factory=NoiseParams)
    world: WorldParams = field(default_factory=WorldParams)
    sigma_norm: float = 1.0 / 460.0
    max_clones: int = 11
    min_track: int = 3
    gate_prob: float = 0.95
    noise_model: str = "propagated"
    min_parallax_sigmas: float = 10.0  # pose-only base-pair parallax floor, in units of sigma_norm
    init_sd: tuple = (1e-3, 1e-2, 1e-3, 5e-4, 2e-2)  # attitude, velocity, position, gyro bias, accel bias
    check_health: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")

    @property
    def min_parallax(self) -> float:
        return max(self.min_parallax_sigmas * self.sigma_norm, 1e-6)

    @property
    def error_variant(self) -> Variant:
        return VARIANTS[self.variant][0]

    @property
    def measurement(self) -> str:
        return VARIANTS[self.variant][1]

    def initial_covariance(self) -> np.ndarray:
        return np.diag(np.repeat(np.asarray(self.init_sd, float) ** 2, 3))


@dataclass
class EpochRecord:
    t: float
    imu: ImuState
    P_imu: np.ndarray
    tried: int = 0  # tracks offered to the gate this frame
    accepted: int = 0


@dataclass
class UpdateStats:
    tried: int = 0
    accepted: int = 0
    skipped: int = 0


class VioFilter:
    def __init__(self, config: FilterConfig, ext: Extrinsics, state: ImuState, t0: float, P0=None):
        self.cfg = config
        self.ext = ext
        self.variant = config.error_variant
        self.state = NavState(state.copy(), [], config.max_clones)
        self.P = config.initial_covariance() if P0 is None else np.array(P0, dtype=float)
        self.t = float(t0)
        self.tracks: dict[int, list] = {}
        self.records: list[EpochRecord] = []
        self.stats = UpdateStats()
        self._phi = np.eye(IMU_DIM)
        self._qd = np.zeros((IMU_DIM, IMU_DIM))

    # --- propagation ---------------------------------------------------------------------

    def propagate(self, sample, dt: float) -> None:
        F, G = continuous_jacobians(self.state.imu, self.cfg.world, self.variant, accel=sample.accel)
        b = discretize(F, G, self.cfg.noise, dt)
        self._phi = b.phi_imu @ self._phi
        self._qd = b.phi_imu @ self._qd @ b.phi_imu.T + b.qd_imu
        self.state.imu = propagate_mean(self.state.imu, sample, self.cfg.world, dt)
        self.t += dt

    def _flush_covariance(self) -> None:
        """Apply the transition accumulated since the last flush to the full covariance."""
        Phi, P = self._phi, self.P
        P[:IMU_DIM, :IMU_DIM] = Phi @ P[:IMU_DIM, :IMU_DIM] @ Phi.T + self._qd
        if P.shape[0] > IMU_DIM:
            cross = Phi @ P[:IMU_DIM, IMU_DIM:]
            P[:IMU_DIM, IMU_DIM:] = cross
            P[IMU_DIM:, :IMU_DIM] = cross.T
        self.P = symmetrize(P)
        self._phi = np.eye(IMU_DIM)
        self._qd = np.zeros((IMU_DIM, IMU_DIM))

    # --- measurements --------------------------------------------------------------------

    def _block(self, track: FeatureTrack, poses):
        if self.cfg.measurement == "po":
            return build_po_block(track, self.state, self.ext, self.cfg.sigma_norm, self.variant,
                                  self.cfg.noise_model, self.cfg.min_parallax, poses)
        return msckf_block(track, self.state, self.ext, self.cfg.sigma_norm, self.variant, poses)

    def _update(self, tracks) -> None:
        blocks = []
        poses = camera_poses(self.state, self.ext)
        for track in tracks:
            if len(track.observations) < self.cfg.min_track:
                continue
            self.stats.tried += 1
            try:
                block = self._block(track, poses)
            except (DegenerateBaseline, NegativeDepth, TriangulationFailure, np.linalg.LinAlgError):
                self.stats.skipped += 1
                continue
            if block.r.size == 0 or not chi2_gate(block.r, block.H, self.P, block.R_meas, self.cfg.gate_prob):
                continue
            self.stats.accepted += 1
            blocks.append(block)
        if not blocks:
            return
        self.state, self.P = ekf_update(self.state, self.P, compress(stack_blocks(blocks)), self.variant)

    def camera_frame(self, t: float, observations) -> None:
        """Handle one frame: ``observations`` is a list of ``(feature_id, [x, y, 1])``."""
        self._flush_covariance()
        tried, accepted = self.stats.tried, self.stats.accepted
        if len(self.state.clones) >= self.cfg.max_clones:
            oldest = self.state.clones[0].clone_id
            using = [fid for fid, obs in self.tracks.items() if obs[0][0] == oldest]
            self._update([FeatureTrack(fid, self.tracks.pop(fid)) for fid in using])
            self.state, self.P = marginalize_oldest(self.state, self.P)
            for fid in list(self.tracks):
                self.tracks[fid] = [o for o in self.tracks[fid] if o[0] != oldest]
                if not self.tracks[fid]:
                    del self.tracks[fid]

        self.state, self.P = augment_clone(self.state, self.P, t)
        cid = self.state.clones[-1].clone_id
        seen = set()
        for fid, obs in observations:
            self.tracks.setdefault(fid, []).append((cid, obs))
            seen.add(fid)
        done = [fid for fid in self.tracks if fid not in seen or len(self.tracks[fid]) >= self.cfg.max_clones]
        self._update([FeatureTrack(fid, self.tracks.pop(fid)) for fid in done])
        self._check()
        self.records.append(EpochRecord(t, self.state.imu.copy(), self.P[:IMU_DIM, :IMU_DIM].copy(),
                                        self.stats.tried - tried, self.stats.accepted - accepted))

    def _check(self) -> None:
        if not self.cfg.check_health:
            return
        P = self.P
        if not np.isfinite(P).all() or not np.isfinite(self.state.imu.p).all():
            raise NumericalFailure("non-finite state or covariance")
        if np.abs(P - P.T).max() > 1e-9 * max(1.0, np.abs(P).max()):
            raise NumericalFailure("covariance lost symmetry")
        w = np.linalg.eigvalsh(P)
        # absolute floor at unit scale, relative once dead-reckoning inflates P
        if w[0] < -PSD_TOL * max(1.0, w[-1]):
            raise NumericalFailure("covariance not positive semi-definite")


@dataclass
class RunResult:
    variant: str
    t: np.ndarray
    p: np.ndarray
    q: np.ndarray
    nees: np.ndarray
    stats: UpdateStats
    ate: float = float("nan")
    records: list = field(default_factory=list, repr=False)


def initial_estimate(truth_state: ImuState, config: FilterConfig, rng) -> ImuState:
    """Draw the starting estimate from the prior: pose/velocity perturbed, biases at zero."""
    from .state import inject_correction

    sd = np.repeat(np.asarray(config.init_sd, float), 3)
    dx = sd * rng.normal(size=15)
    dx[9:] = 0.0
    est = inject_correction(NavState(truth_state), -dx, config.error_variant).imu
    est.bg = np.zeros(3)
    est.ba = np.zeros(3)
    return est


def run_filter(data, config: FilterConfig, seed: int = 0) -> RunResult:
    """Run one configuration over a :class:`~dstvio.sim.SimData` stream."""
    from .metrics import ate_rmse, nees

    rng = np.random.default_rng(seed)
    truth = data.truth
    x0 = initial_estimate(truth.state(0), config, rng)
    filt = VioFilter(config, data.ext, x0, data.imu_t[0])
    frames = data.frames()
    stride = data.config.cam_stride
    n = len(data.imu_t)
    filt.camera_frame(float(data.imu_t[0]), frames.get(float(data.imu_t[0]), []))
    for k in range(n - 1):
        dt = float(data.imu_t[k + 1] - data.imu_t[k])
        filt.propagate(_sample(data, k), dt)
        if (k + 1) % stride == 0:
            t = float(data.imu_t[k + 1])
            filt.camera_frame(t, frames.get(t, []))

    t = np.array([r.t for r in filt.records])
    p = np.array([r.imu.p for r in filt.records])
    q = np.array([r.imu.q for r in filt.records])
    errs, covs = [], []
    pose = np.r_[0:3, 6:9]
    for r in filt.records:
        tr = truth.state(truth.index(r.t))
        e = error_between(NavState(r.imu), NavState(tr), config.error_variant)
        errs.append(e[pose])
        covs.append(r.P_imu[np.ix_(pose, pose)])
    res = RunResult(config.variant, t, p, q, nees(errs, covs), filt.stats, records=filt.records)
    res.ate = ate_rmse(t, p, truth.t, truth.p)
    return res


def _sample(data, k):
    from .propagation import ImuSample

    return ImuSample(float(data.imu_t[k]), data.gyro[k], data.accel[k])
