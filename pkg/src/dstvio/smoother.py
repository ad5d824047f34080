"""Velocity-aided forward filter over a visual blackout and the RTS backward pass.

The forward filter runs in feed-forward error form around a dead-reckoned nominal
trajectory that starts at the blackout onset: the 16-dim error ``[dx_imu (DST), ds]`` is
predicted with ``Phi`` and never folded back into the nominal, so the whole window is a
linear-Gaussian problem the RTS recursion can smooth. Corrected poses are the nominal
with the smoothed error removed.

With the DST velocity error ``dv = Exp(phi) v~ - v`` the body-frame velocity of the
nominal differs from the true one by ``R~^T dv`` alone, which is why the attitude block of
the velocity Jacobian is zero.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.stats import chi2

from .propagation import ImuSample, NoiseParams, WorldParams, continuous_jacobians, discretize, propagate_mean
from .state import IMU_DIM, VEL, ImuState, NavState, Variant, convert_covariance, inject_correction, symmetrize

DIM = IMU_DIM + 1
SCALE = IMU_DIM
SCALE_PRIOR_VAR = 1e-2


class SingularCovariance(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class VelMeasurement:
    t: float
    v_body_ins: np.ndarray
    v_body_vio: np.ndarray
    R_v: np.ndarray
    R_gb: np.ndarray  # global-to-body rotation of the nominal

    def __post_init__(self):
        for a in (self.v_body_ins, self.v_body_vio, self.R_v, self.R_gb):
            if not np.isfinite(a).all():
                raise ValueError("velocity measurement is not finite")
        if np.linalg.eigvalsh(symmetrize(np.asarray(self.R_v))).min() < 0:
            raise ValueError("velocity noise covariance is not PSD")


def vel_innovation(m: VelMeasurement):
    """``z = v_ins - v_vio`` (body frame) and ``H = [0, R_gb, 0 (3x9), -v_vio]``."""
    z = np.asarray(m.v_body_ins) - np.asarray(m.v_body_vio)
    H = np.zeros((3, DIM))
    H[:, VEL] = m.R_gb
    H[:, SCALE] = -np.asarray(m.v_body_vio)
    return z, H


@dataclass(frozen=True)
class ForwardRecord:
    t: float
    x_f: np.ndarray
    x_pred: np.ndarray
    P_f: np.ndarray
    P_pred: np.ndarray
    Phi: np.ndarray  # transition into this epoch from the previous one
    nominal: ImuState | None = None
    nis: float | None = None


@dataclass(frozen=True)
class DeprivationSchedule:
    intervals: tuple = ()

    def __post_init__(self):
        iv = tuple((float(a), float(b)) for a, b in self.intervals)
        for a, b in iv:
            if not b > a:
                raise ValueError(f"empty deprivation interval {a}:{b}")
        for (_, b0), (a1, _) in zip(iv, iv[1:]):
            if a1 < b0:
                raise ValueError("deprivation intervals must be sorted and non-overlapping")
        object.__setattr__(self, "intervals", iv)

    def deprived(self, t: float) -> bool:
        return any(a <= t < b for a, b in self.intervals)


def kalman_update(x, P, z, H, R, joseph: bool = True):
    """Measurement update; returns ``(x, P, nis)``."""
    S = symmetrize(H @ P @ H.T + R)
    try:
        c = scipy.linalg.cho_factor(S)
    except np.linalg.LinAlgError as e:
        raise SingularCovariance("innovation covariance is singular") from e
    K = scipy.linalg.cho_solve(c, H @ P).T
    nu = z - H @ x
    x = x + K @ nu
    A = np.eye(len(x)) - K @ H
    P = A @ P @ A.T + K @ R @ K.T if joseph else A @ P
    return x, symmetrize(P), float(nu @ scipy.linalg.cho_solve(c, nu))


def kalman_forward(x0, P0, steps, joseph: bool = True) -> list:
    """Linear Kalman filter; ``steps`` yields ``(t, Phi, Qd, meas)`` with ``meas`` either
    ``None`` or ``(z, H, R)``. The first step's ``Phi`` is ignored (prior epoch)."""
    records = []
    x, P = np.asarray(x0, float), np.asarray(P0, float)
    for n, (t, Phi, Qd, meas) in enumerate(steps):
        if n == 0:
            Phi = np.eye(len(x))
            x_pred, P_pred = x, P
        else:
            x_pred = Phi @ x
            P_pred = symmetrize(Phi @ P @ Phi.T + Qd)
        nis = None
        x, P = x_pred, P_pred
        if meas is not None:
            x, P, nis = kalman_update(x_pred, P_pred, *meas, joseph=joseph)
        records.append(ForwardRecord(float(t), x, x_pred, P, P_pred, Phi, None, nis))
    return records


def rts_backward(records):
    """Smoothed ``(xs, Ps)`` for every record; the last epoch is copied unchanged."""
    if len(records) < 2:
        raise ValueError("the smoother needs at least two epochs")
    n = len(records)
    xs = [None] * n
    Ps = [None] * n
    xs[-1], Ps[-1] = records[-1].x_f.copy(), records[-1].P_f.copy()
    for k in range(n - 2, -1, -1):
        cur, nxt = records[k], records[k + 1]
        try:
            c = scipy.linalg.cho_factor(nxt.P_pred)
        except np.linalg.LinAlgError as e:
            raise SingularCovariance(f"predicted covariance at epoch {k + 1} is singular") from e
        # K = P_f Phi^T P_pred^-1
        K = scipy.linalg.cho_solve(c, nxt.Phi @ cur.P_f).T
        xs[k] = cur.x_f + K @ (xs[k + 1] - nxt.x_pred)
        Ps[k] = symmetrize(cur.P_f + K @ (Ps[k + 1] - nxt.P_pred) @ K.T)
    return xs, Ps


@dataclass(frozen=True)
class VioVelocity:
    """Body-frame velocity reported by the recovered VIO."""

    v_body: np.ndarray
    R_v: np.ndarray


def _augment(Phi15, Qd15):
    Phi = np.eye(DIM)
    Phi[:IMU_DIM, :IMU_DIM] = Phi15
    Qd = np.zeros((DIM, DIM))
    Qd[:IMU_DIM, :IMU_DIM] = Qd15
    return Phi, Qd


def forward_pass(x0: ImuState, P0, samples, epochs, velocities: dict, schedule: DeprivationSchedule,
                 noise: NoiseParams, world: WorldParams, literal_branch: bool = False, stop=None,
                 feedback: bool = True) -> list:
    """Velocity-aided forward filter from ``epochs[0]`` (the blackout onset).

    ``samples`` are time-sorted IMU samples covering the epochs; ``velocities`` maps
    epoch times to :class:`VioVelocity`. Updates happen only outside deprivation, unless
    ``literal_branch`` flips the test. ``stop(records)`` may end the pass early.

    With ``feedback`` each posterior error is folded into the nominal before the next
    prediction. Records then hold the pre-update nominal, the update as ``x_f`` and a
    zero ``x_pred``; the affine reset cancels in the RTS recursion, so
    :func:`rts_backward` applies unchanged and ``corrected_pose(nominal, x)`` holds for
    both the filtered and the smoothed errors.
    """
    epochs = np.asarray(epochs, float)
    if np.any(np.diff(epochs) <= 0):
        raise ValueError("epoch times must increase")
    ts = np.array([s.timestamp for s in samples])
    if np.any(np.diff(ts) <= 0):
        raise ValueError("IMU timestamps must increase")
    P0 = np.asarray(P0, float)
    if P0.shape == (IMU_DIM, IMU_DIM):
        P = np.zeros((DIM, DIM))
        P[:IMU_DIM, :IMU_DIM] = P0
        P[SCALE, SCALE] = SCALE_PRIOR_VAR
        P0 = P

    nominal = x0.copy()
    scale = 0.0
    x, P = np.zeros(DIM), P0
    records = []
    k = int(np.searchsorted(ts, epochs[0] - 1e-9))
    for e, t_e in enumerate(epochs):
        Phi15, Qd15 = np.eye(IMU_DIM), np.zeros((IMU_DIM, IMU_DIM))
        if e:
            while k < len(ts) - 1 and ts[k] < t_e - 1e-9:
                dt = ts[k + 1] - ts[k]
                F, G = continuous_jacobians(nominal, world, Variant.DST)
                b = discretize(F, G, noise, dt)
                Phi15 = b.phi_imu @ Phi15
                Qd15 = b.phi_imu @ Qd15 @ b.phi_imu.T + b.qd_imu
                nominal = propagate_mean(nominal, samples[k], world, dt)
                k += 1
        Phi, Qd = _augment(Phi15, Qd15)
        if e:
            x_pred, P_pred = Phi @ x, symmetrize(Phi @ P @ Phi.T + Qd)
        else:
            x_pred, P_pred = x, P
        x, P, nis = x_pred, P_pred, None
        update = not schedule.deprived(t_e)
        if literal_branch:
            update = not update
        vel = velocities.get(float(t_e))
        if update and vel is not None:
            R_gb = nominal.R.T
            v_vio = (1.0 - scale) * np.asarray(vel.v_body)
            m = VelMeasurement(float(t_e), R_gb @ nominal.v, v_vio, np.asarray(vel.R_v), R_gb)
            z, H = vel_innovation(m)
            x, P, nis = kalman_update(x_pred, P_pred, z, H, m.R_v)
        records.append(ForwardRecord(float(t_e), x, x_pred, P, P_pred, Phi, nominal.copy(), nis))
        if feedback and nis is not None:
            nominal = corrected_pose(nominal, x)
            scale += x[SCALE]
            x = np.zeros(DIM)
        if stop is not None and stop(records):
            break
    return records


def corrected_pose(nominal: ImuState, dx) -> ImuState:
    return inject_correction(NavState(nominal), np.asarray(dx)[:IMU_DIM], Variant.DST).imu


class NisConvergence:
    """Converged once the last ``window`` NIS values sum below the chi-square bound and
    at least ``min_updates`` updates have been made since recovery."""

    def __init__(self, window: int = 10, prob: float = 0.95, min_updates: int = 10):
        self.window = window
        self.bound = chi2.ppf(prob, 3 * window)
        self.min_updates = max(min_updates, window)

    def __call__(self, records) -> bool:
        nis = [r.nis for r in records if r.nis is not None]
        return len(nis) >= self.min_updates and sum(nis[-self.window :]) < self.bound


@dataclass
class SegmentReport:
    start: float
    end: float
    converged: bool
    converged_at: float | None = None
    t: np.ndarray = field(default_factory=lambda: np.zeros(0))  # deprived epochs
    p_forward: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    p_smoothed: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    q_smoothed: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    p_sd_forward: np.ndarray = field(default_factory=lambda: np.zeros(0))
    p_sd_smoothed: np.ndarray = field(default_factory=lambda: np.zeros(0))


@dataclass
class SupervisorResult:
    t: np.ndarray
    p: np.ndarray
    q: np.ndarray
    segments: list


def vio_velocity(imu: ImuState, P_imu, variant: Variant, floor: float = 0.02) -> VioVelocity:
    """Body-frame velocity and its covariance from a VIO epoch record."""
    P = convert_covariance(P_imu, imu, variant, Variant.DST)
    R = imu.R
    R_v = R.T @ P[VEL, VEL] @ R + floor**2 * np.eye(3)
    return VioVelocity(R.T @ imu.v, symmetrize(R_v))


def deprivation_supervisor(vio_records, samples, schedule: DeprivationSchedule, noise: NoiseParams,
                           world: WorldParams, variant: Variant = Variant.DST, convergence=None,
                           max_vel_sd: float = 0.2, settle_s: float = 3.0, min_accept: float = 0.25,
                           accept_window: int = 20, vel_floor: float = 0.05) -> SupervisorResult:
    """Replace each deprived segment of a VIO trajectory with its RTS-smoothed version.

    ``vio_records`` carry ``t``, ``imu`` and ``P_imu`` per camera epoch (see
    :class:`dstvio.vio.EpochRecord`); ``variant`` is the error convention of ``P_imu``.
    VIO velocities are used from ``settle_s`` after recovery, once their standard
    deviation is below ``max_vel_sd``: right after recovery the VIO still carries the
    dead-reckoned error while its covariance is already shrinking. A VIO that diverged
    after recovery rejects most tracks at its gate, so velocities are also dropped while
    the accepted fraction over the last ``accept_window`` epochs is below ``min_accept``.
    ``vel_floor`` (m/s) is a per-axis noise floor added to the VIO velocity covariance.
    """
    t = np.array([r.t for r in vio_records])
    p = np.array([r.imu.p for r in vio_records])
    q = np.array([r.imu.q for r in vio_records])
    segments = []
    convergence = convergence or NisConvergence()
    for a, b in schedule.intervals:
        i0 = int(np.searchsorted(t, a - 1e-9))
        if i0 >= len(t):
            continue
        nxt = [c for c, _ in schedule.intervals if c > a]
        horizon = nxt[0] if nxt else np.inf
        idx = [i for i in range(i0, len(t)) if t[i] < horizon]
        start = vio_records[i0]
        P0 = convert_covariance(start.P_imu, start.imu, variant, Variant.DST)
        vels = {}
        for i in idx:
            r = vio_records[i]
            recent = vio_records[max(0, i - accept_window + 1) : i + 1]
            tried = sum(getattr(x, "tried", 0) for x in recent)
            healthy = tried == 0 or sum(getattr(x, "accepted", 0) for x in recent) >= min_accept * tried
            if r.t >= b + settle_s and healthy:
                v = vio_velocity(r.imu, r.P_imu, variant, vel_floor)
                if np.sqrt(np.linalg.eigvalsh(v.R_v)[-1]) <= max_vel_sd:
                    vels[float(r.t)] = v
        records = forward_pass(start.imu, P0, samples, t[idx], vels, schedule, noise, world,
                               stop=convergence)
        seg = SegmentReport(a, b, converged=convergence(records))
        dep = [n for n, r in enumerate(records) if r.t < b]
        seg.t = np.array([records[n].t for n in dep])
        seg.p_forward = np.array([corrected_pose(records[n].nominal, records[n].x_f).p for n in dep])
        seg.p_sd_forward = np.array([np.sqrt(np.trace(records[n].P_f[6:9, 6:9])) for n in dep])
        if seg.converged:
            seg.converged_at = records[-1].t
            xs, Ps = rts_backward(records)
            poses = [corrected_pose(records[n].nominal, xs[n]) for n in dep]
            seg.p_smoothed = np.array([s.p for s in poses])
            seg.q_smoothed = np.array([s.q for s in poses])
            seg.p_sd_smoothed = np.array([np.sqrt(np.trace(Ps[n][6:9, 6:9])) for n in dep])
            p[i0 : i0 + len(dep)] = seg.p_smoothed
            q[i0 : i0 + len(dep)] = seg.q_smoothed
        segments.append(seg)
    return SupervisorResult(t, p, q, segments)
