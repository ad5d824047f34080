"""Observability lab on a SLAM-form state ``[imu (15), landmarks (3 each)]``.

Landmark errors are classical (``dp_f = p_f~ - p_f``) in every variant, so the variants
differ only in the velocity and position rows of the IMU block. The lab linearizes
along a noise-free trajectory, stacks ``H_k Phi_(k,0)`` and compares the numeric null
space with the closed-form four-dimensional basis (global translation plus yaw).

The closed-form yaw columns of the transformed variants place ``[(p_f - p_b0) x] g`` on
the landmark rows; that vector is a null vector of ``O`` when the global origin sits at
the first body position, which is how :func:`run_lab` anchors every trajectory.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from .po_update import Extrinsics, NegativeDepth, projection_jacobian
from .propagation import (ImuSample, NoiseParams, WorldParams, continuous_jacobians, discretize,
                          propagate_mean)
from .sim import SimConfig, generate
from .state import ATT, BA, BG, IMU_DIM, POS, VEL, ImuState, Variant, convention_transform

MIN_DEPTH = 0.3
# Gauss-Legendre nodes on [0, 1] for the bias-coupling integrals
_GL_X, _GL_W = np.polynomial.legendre.leggauss(8)
_GL_X, _GL_W = 0.5 * (_GL_X + 1.0), 0.5 * _GL_W


@dataclass
class SlamState:
    imu: ImuState
    landmarks: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    @property
    def dim(self) -> int:
        return IMU_DIM + 3 * len(self.landmarks)

    def landmark(self, i: int) -> slice:
        return slice(IMU_DIM + 3 * i, IMU_DIM + 3 * i + 3)


def transform_matrix(imu: ImuState, variant: Variant, n_landmarks: int = 0) -> np.ndarray:
    """``T`` with ``dx_variant = T dx_ekf``; landmark rows are identity."""
    T = np.eye(IMU_DIM + 3 * n_landmarks)
    T[:IMU_DIM, :IMU_DIM] = convention_transform(imu, variant)
    return T


def transform_inverse(imu: ImuState, variant: Variant, n_landmarks: int = 0) -> np.ndarray:
    # T differs from I only in the off-diagonal att columns, so the inverse negates them
    return 2.0 * np.eye(IMU_DIM + 3 * n_landmarks) - transform_matrix(imu, variant, n_landmarks)


def ekf_transition_exact(imu: ImuState, sample: ImuSample, dt: float) -> np.ndarray:
    """Exact first-order map of classical errors through one zero-order-hold step."""
    R = imu.R
    theta = (np.asarray(sample.gyro) - imu.bg) * dt
    f = np.asarray(sample.accel) - imu.ba
    Jl = geo.left_jacobian(theta)
    G2 = geo.second_integral_jacobian(theta)
    # d(J_l(theta) f)/dtheta and d(Gamma_2(theta) f)/dtheta
    D1 = np.zeros((3, 3))
    D2 = np.zeros((3, 3))
    for s, w in zip(_GL_X, _GL_W):
        d = -geo.skew(geo.so3_exp(s * theta) @ f) @ geo.left_jacobian(s * theta) * s
        D1 += w * d
        D2 += w * (1.0 - s) * d
    dv = R @ Jl @ f * dt
    dp = R @ G2 @ f * dt**2
    I3 = np.eye(3)
    Phi = np.eye(IMU_DIM)
    Phi[ATT, BG] = -R @ Jl * dt
    Phi[VEL, ATT] = geo.skew(dv)
    Phi[VEL, BG] = R @ D1 * dt**2
    Phi[VEL, BA] = R @ Jl * dt
    Phi[POS, ATT] = geo.skew(dp)
    Phi[POS, VEL] = I3 * dt
    Phi[POS, BG] = R @ D2 * dt**3
    Phi[POS, BA] = R @ G2 * dt**2
    return Phi


def ekf_measurement(state: SlamState, ext: Extrinsics, which=None) -> np.ndarray:
    """Jacobian of the normalized projections of landmarks ``which`` w.r.t. classical errors."""
    imu = state.imu
    R = imu.R
    R_cam = ext.R_bC @ R.T
    t = imu.p + R @ ext.p_bC
    which = range(len(state.landmarks)) if which is None else which
    rows = []
    for i in which:
        d = state.landmarks[i] - t
        X = R_cam @ d
        if X[2] <= MIN_DEPTH:
            raise NegativeDepth(f"landmark {i} at depth {X[2]:.3f}")
        Pi = projection_jacobian(X)
        Hi = np.zeros((2, state.dim))
        Hi[:, ATT] = Pi @ R_cam @ geo.skew(state.landmarks[i] - imu.p)
        Hi[:, POS] = Pi @ R_cam
        Hi[:, state.landmark(i)] = -Pi @ R_cam
        rows.append(Hi)
    return np.vstack(rows) if rows else np.zeros((0, state.dim))


def visible(state: SlamState, ext: Extrinsics, min_depth: float = 1.0) -> list:
    R_cam = ext.R_bC @ state.imu.R.T
    t = state.imu.p + state.imu.R @ ext.p_bC
    depth = (state.landmarks - t) @ R_cam[2]
    return [int(i) for i in np.flatnonzero(depth > min_depth)]


def measurement_jacobian(state: SlamState, variant: Variant, ext: Extrinsics, which=None) -> np.ndarray:
    Ti = transform_inverse(state.imu, variant, len(state.landmarks))
    return ekf_measurement(state, ext, which) @ Ti


def transition(state: SlamState, variant: Variant, world: WorldParams, sample: ImuSample, dt: float,
               mode: str = "exact") -> np.ndarray:
    """One-step transition of the SLAM error state (landmarks are static).

    ``mode="exact"`` maps the closed-form classical transition through the variant
    transform at both ends; ``"series"`` discretizes the variant's continuous dynamics.
    """
    variant = Variant(variant)
    Phi = np.eye(state.dim)
    if mode == "exact":
        if np.any(world.omega):
            raise ValueError("the exact transition assumes a non-rotating frame")
        nxt = propagate_mean(state.imu, sample, world, dt)
        Phi[:IMU_DIM, :IMU_DIM] = (transform_matrix(nxt, variant)
                                   @ ekf_transition_exact(state.imu, sample, dt)
                                   @ transform_inverse(state.imu, variant))
    elif mode == "series":
        F, G = continuous_jacobians(state.imu, world, variant, sample.accel)
        Phi[:IMU_DIM, :IMU_DIM] = discretize(F, G, NoiseParams(), dt).phi_imu
    else:
        raise ValueError(f"unknown transition mode {mode!r}")
    return Phi


def slam_jacobians(state: SlamState, variant: Variant, world: WorldParams, sample: ImuSample, dt: float,
                   ext: Extrinsics, mode: str = "exact", which=None):
    """Return ``(Phi, H)``: the one-step transition from ``state`` and the measurement at it."""
    return (transition(state, variant, world, sample, dt, mode),
            measurement_jacobian(state, variant, ext, which))


def build_O(Hs, Phis) -> np.ndarray:
    """Stack ``H_k Phi_(k,0)``; ``Phis[k]`` maps epoch ``k`` to ``k + 1``."""
    if len(Phis) != len(Hs) - 1:
        raise ValueError("need one transition between each pair of measurement epochs")
    blocks = []
    M = np.eye(Hs[0].shape[1])
    for k, H in enumerate(Hs):
        if k:
            M = Phis[k - 1] @ M
        blocks.append(H @ M)
    return np.vstack(blocks)


def analytic_nullspace(variant: Variant, state0: SlamState, world: WorldParams) -> np.ndarray:
    """Closed-form basis ``[translation (3) | yaw (1)]`` at the first epoch."""
    variant = Variant(variant)
    g = world.gravity
    n = len(state0.landmarks)
    N = np.zeros((state0.dim, 4))
    N[POS, :3] = np.eye(3)
    N[ATT, 3] = g
    p0 = state0.imu.p
    if variant is Variant.EKF:
        N[VEL, 3] = geo.skew(state0.imu.v) @ g
        N[POS, 3] = geo.skew(p0) @ g
    elif variant is Variant.ST:
        N[POS, 3] = geo.skew(p0) @ g
    for i in range(n):
        sl = state0.landmark(i)
        N[sl, :3] = np.eye(3)
        rel = state0.landmarks[i] if variant is Variant.EKF else state0.landmarks[i] - p0
        N[sl, 3] = geo.skew(rel) @ g
    return N


def nullspace_residual(O: np.ndarray, N: np.ndarray) -> np.ndarray:
    """Per-column ``max |O n| / (||O||_inf ||n||_inf)``."""
    scale = np.abs(O).sum(axis=1).max() * np.abs(N).max(axis=0)
    return np.abs(O @ N).max(axis=0) / scale


def numeric_rank(O: np.ndarray, rtol: float = 1e-8) -> int:
    s = np.linalg.svd(O, compute_uv=False)
    return int(np.sum(s > rtol * s[0]))


@dataclass
class LabReport:
    variant: Variant
    trajectory: str
    mode: str
    epochs: int
    dim: int
    rank: int
    residual: np.ndarray  # translation x, y, z and yaw
    rows: int

    @property
    def deficiency(self) -> int:
        return self.dim - self.rank

    def text(self) -> str:
        cols = ", ".join(f"{r:.2e}" for r in self.residual)
        return (f"{self.variant.value:>3} {self.trajectory:<7} {self.mode:<6} epochs={self.epochs} dim={self.dim} "
                f"rank={self.rank} deficiency={self.deficiency} rows={self.rows} "
                f"null residual [tx, ty, tz, yaw] = [{cols}]")


@dataclass
class LabScene:
    """Noise-free trajectory anchored at the first body position, plus landmarks."""

    states: list  # ImuState per IMU step
    samples: list  # ImuSample per IMU step
    dt: float
    epochs: list  # IMU indices of camera epochs
    landmarks: np.ndarray
    ext: Extrinsics
    world: WorldParams
    kind: str = "random"

    def slam(self, k: int) -> SlamState:
        return SlamState(self.states[k], self.landmarks)


def lab_scene(kind: str = "random", duration: float = 4.0, n_landmarks: int = 8, seed: int = 0,
              imu_rate: float = 100.0, cam_rate: float = 10.0, ext: Extrinsics | None = None,
              origin=None) -> LabScene:
    """Excited noise-free trajectory whose first body position sits at ``origin`` (default 0)."""
    cfg = SimConfig(trajectory_kind=kind, duration_s=duration, imu_rate_hz=imu_rate, cam_rate_hz=cam_rate,
                    seed=seed, excite=True, n_landmarks=20, init_bias_g=0.0, init_bias_a=0.0,
                    noise=NoiseParams(0.0, 0.0, 0.0, 0.0))
    ext = ext or Extrinsics.forward_looking()
    data = generate(cfg, ext)
    tr = data.truth
    p0 = tr.p[0] - (np.zeros(3) if origin is None else np.asarray(origin, dtype=float))
    states = [ImuState(tr.q[n], tr.v[n], tr.p[n] - p0, tr.bg[n], tr.ba[n]) for n in range(len(tr.t))]
    samples = list(data.imu_samples())
    dt = 1.0 / imu_rate
    stride = cfg.cam_stride
    epochs = list(range(0, len(states) - 1, stride))
    rng = np.random.default_rng(seed + 7919)
    # landmarks seeded in front of the camera at a few epochs so each is seen repeatedly
    marks = []
    picks = np.linspace(0, len(epochs) // 2, n_landmarks).astype(int)
    for e in picks:
        s = states[epochs[e]]
        R_cam_T = (ext.R_bC @ s.R.T).T
        ray = np.array([rng.uniform(-0.4, 0.4), rng.uniform(-0.3, 0.3), 1.0])
        centre = s.p + s.R @ ext.p_bC
        marks.append(centre + R_cam_T @ ray * rng.uniform(6.0, 12.0))
    return LabScene(states, samples, dt, epochs, np.array(marks), ext, cfg.world, kind)


def linearize(scene: LabScene, variant: Variant, mode: str = "exact", perturb=None):
    """``(Hs, Phis, N)`` along ``scene``.

    ``perturb`` maps an epoch index to ``(dv, dp)`` offsets added to the linearization
    point of that epoch and of the IMU steps that follow it.
    """
    variant = Variant(variant)
    Hs, Phis = [], []
    offsets = {}

    def point(n, e):
        s = scene.states[n]
        if perturb is None:
            return s
        if e not in offsets:
            offsets[e] = perturb(e)
        dv, dp = offsets[e]
        return ImuState(s.q, s.v + dv, s.p + dp, s.bg, s.ba)

    N = None
    for e, k in enumerate(scene.epochs):
        lin = SlamState(point(k, e), scene.landmarks)
        if e == 0:
            N = analytic_nullspace(variant, lin, scene.world)
        which = visible(SlamState(scene.states[k], scene.landmarks), scene.ext)
        Hs.append(measurement_jacobian(lin, variant, scene.ext, which))
        if e + 1 == len(scene.epochs):
            break
        Phi = np.eye(lin.dim)
        for n in range(k, scene.epochs[e + 1]):
            step = transition(SlamState(point(n, e), scene.landmarks), variant, scene.world,
                              scene.samples[n], scene.dt, mode)
            Phi = step @ Phi
        Phis.append(Phi)
    return Hs, Phis, N


def run_lab(variant: Variant, kind: str = "random", mode: str = "exact", perturb=None, seed: int = 0,
            scene: LabScene | None = None) -> LabReport:
    variant = Variant(variant)
    scene = scene or lab_scene(kind, seed=seed)
    Hs, Phis, N = linearize(scene, variant, mode, perturb)
    O = build_O(Hs, Phis)
    return LabReport(variant, scene.kind, mode, len(Hs), O.shape[1], numeric_rank(O), nullspace_residual(O, N),
                     O.shape[0])


def perturbation_study(n_seeds: int = 50, kind: str = "random", sd_p: float = 0.05, sd_v: float = 0.05,
                       scene: LabScene | None = None):
    """Yaw-column null residual of ``ekf`` and ``dst`` with per-epoch linearization offsets.

    The first epoch's position is left unperturbed so the origin stays at the
    linearization point of the first body position.
    """
    scene = scene or lab_scene(kind)
    out = {Variant.EKF: [], Variant.DST: []}
    for seed in range(n_seeds):
        for variant in out:
            rng = np.random.default_rng(seed)

            def perturb(e, rng=rng):
                dv = rng.normal(0.0, sd_v, 3)
                dp = rng.normal(0.0, sd_p, 3) if e else np.zeros(3)
                return dv, dp

            Hs, Phis, N = linearize(scene, variant, "series", perturb)
            out[variant].append(nullspace_residual(build_O(Hs, Phis), N)[3])
    return {v: np.array(r) for v, r in out.items()}
