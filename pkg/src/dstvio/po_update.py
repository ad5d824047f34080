"""Pose-only multi-view measurement model and the EKF update built on it.

A feature seen from camera centres ``t_m`` along world bearings ``u_m`` satisfies, for
a base pair ``(j, k)``::

    f - t_i  ∝  a u_j + b (t_j - t_i),   a = |u_k x (t_j - t_k)|,  b = |u_k x u_j|

so its position in any camera ``i`` follows from relative poses and the two base
observations alone, with no 3D point in the state and no nullspace projection.

Camera rotations ``R_cam`` map global vectors into the camera frame. The filter error
``dx`` is defined so that ``truth = inject_correction(estimate, dx)``; ``H`` is the
derivative of the predicted normalized coordinates along that map, giving
``r = z - h(x~) ~= H dx + n``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.stats import chi2

from . import geometry as geo
from .state import NavState, Variant, inject_correction, symmetrize

EPS_BASE = 1e-4
MIN_PARALLAX = 1e-6


class DegenerateBaseline(ValueError):
    pass


class NegativeDepth(ValueError):
    pass


@dataclass(frozen=True)
class Extrinsics:
    """``R_bC`` maps body vectors into the camera frame; ``p_bC`` is the camera origin in the body frame."""

    R_bC: np.ndarray = field(default_factory=lambda: np.eye(3))
    p_bC: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not np.allclose(self.R_bC @ self.R_bC.T, np.eye(3), atol=1e-9):
            raise ValueError("R_bC is not orthonormal")

    @classmethod
    def forward_looking(cls, p_bC=(0.05, 0.0, 0.0)) -> "Extrinsics":
        """Camera z along body x, camera x along body -y, camera y along body -z."""
        return cls(np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]]), np.asarray(p_bC, float))


@dataclass
class FeatureTrack:
    feature_id: int
    observations: list  # (clone_id, [x, y, 1]) in ascending clone order

    @property
    def clone_ids(self) -> list:
        return [cid for cid, _ in self.observations]


@dataclass(frozen=True)
class BasePair:
    j: int
    k: int
    theta: float
    degenerate: bool = False


@dataclass
class ResidualBlock:
    r: np.ndarray
    H: np.ndarray
    R_meas: np.ndarray


@dataclass(frozen=True)
class CameraPose:
    R_cam: np.ndarray  # global -> camera
    t: np.ndarray  # camera centre, global frame


def camera_pose(clone, ext: Extrinsics) -> CameraPose:
    R_b = clone.R
    return CameraPose(ext.R_bC @ R_b.T, clone.p + R_b @ ext.p_bC)


def camera_poses(state: NavState, ext: Extrinsics) -> dict:
    return {c.clone_id: camera_pose(c, ext) for c in state.clones}


def _bearing(track: FeatureTrack, n: int, poses: dict) -> np.ndarray:
    cid, obs = track.observations[n]
    return poses[cid].R_cam.T @ np.asarray(obs, dtype=float)


def select_base_views(track: FeatureTrack, poses: dict) -> BasePair:
    """Pick the observation pair with the largest rotation-compensated parallax.

    Ties go to the lexicographically smallest ``(j, k)``.
    """
    m = len(track.observations)
    if m < 2:
        raise ValueError("need at least two observations")
    B = np.array([_bearing(track, n, poses) for n in range(m)])
    B /= np.linalg.norm(B, axis=1, keepdims=True)
    sin = np.linalg.norm(np.cross(B[:, None, :], B[None, :, :]), axis=2)
    theta = np.arctan2(sin, B @ B.T)
    theta[np.tril_indices(m)] = -np.inf
    flat = int(np.argmax(theta))  # first maximum in row-major order
    j, k = divmod(flat, m)
    th = float(theta[j, k])
    return BasePair(j, k, th, degenerate=th < MIN_PARALLAX)


@dataclass
class _Terms:
    u_j: np.ndarray
    u_k: np.ndarray
    t_j: np.ndarray
    t_k: np.ndarray
    w: np.ndarray  # u_k x (t_j - t_k)
    s: np.ndarray  # u_k x u_j
    a: float
    b: float


def _base_terms(track, base: BasePair, poses) -> _Terms:
    cj, ck = track.observations[base.j][0], track.observations[base.k][0]
    t_j, t_k = poses[cj].t, poses[ck].t
    if np.linalg.norm(t_j - t_k) <= EPS_BASE:
        raise DegenerateBaseline(f"feature {track.feature_id}: base baseline below {EPS_BASE} m")
    u_j, u_k = _bearing(track, base.j, poses), _bearing(track, base.k, poses)
    w = geo.cross(u_k, t_j - t_k)
    s = geo.cross(u_k, u_j)
    return _Terms(u_j, u_k, t_j, t_k, w, s, float(np.linalg.norm(w)), float(np.linalg.norm(s)))


def _point(terms: _Terms, pose_i: CameraPose) -> np.ndarray:
    Y = terms.a * terms.u_j + terms.b * (terms.t_j - pose_i.t)
    return pose_i.R_cam @ Y


def po_point(track: FeatureTrack, base: BasePair, i: int, poses: dict) -> np.ndarray:
    """Feature in camera ``i`` (observation index), up to a common positive scale."""
    terms = _base_terms(track, base, poses)
    X = _point(terms, poses[track.observations[i][0]])
    if X[2] <= 0:
        raise NegativeDepth(f"feature {track.feature_id} behind camera {track.observations[i][0]}")
    return X


def _residual_views(track, base) -> list:
    order = np.argsort(track.clone_ids, kind="stable")
    return [int(n) for n in order if n != base.j]


def _residual_from_poses(track, base, poses) -> np.ndarray:
    out = []
    for n in _residual_views(track, base):
        X = po_point(track, base, n, poses)
        out.append(np.asarray(track.observations[n][1][:2], float) - X[:2] / X[2])
    return np.concatenate(out)


def po_residual(track: FeatureTrack, base: BasePair, state: NavState, ext: Extrinsics) -> np.ndarray:
    """Stacked ``observed - predicted`` normalized coordinates over every view except ``j``."""
    return _residual_from_poses(track, base, camera_poses(state, ext))


def projection_jacobian(X) -> np.ndarray:
    x, y, z = X
    return np.array([[1.0 / z, 0.0, -x / z**2], [0.0, 1.0 / z, -y / z**2]])


def po_jacobian(track: FeatureTrack, base: BasePair, state: NavState, ext: Extrinsics,
                variant: Variant = Variant.DST) -> np.ndarray:
    """Jacobian of the predicted coordinates w.r.t. the full error state (rows as in :func:`po_residual`)."""
    return _linearize(track, base, state, ext, variant)[0]


def po_noise_jacobian(track: FeatureTrack, base: BasePair, state: NavState, ext: Extrinsics) -> np.ndarray:
    """Jacobian of the residual w.r.t. the first two coordinates of every observation (columns in track order)."""
    return _linearize(track, base, state, ext, Variant.DST)[1]


def _linearize(track, base, state, ext, variant, poses=None):
    """Return ``(H, J_noise, r)`` in one pass, vectorized over the residual views."""
    variant = Variant(variant)
    poses = camera_poses(state, ext) if poses is None else poses
    layout = state.layout
    T = _base_terms(track, base, poses)
    wa = T.w / T.a if T.a > 0 else np.zeros(3)
    sb = T.s / T.b if T.b > 0 else np.zeros(3)
    cids = track.clone_ids
    views = _residual_views(track, base)
    nv = len(views)
    view_ids = [cids[n] for n in views]

    R = np.array([poses[c].R_cam for c in view_ids])  # (nv, 3, 3)
    e = T.t_j - np.array([poses[c].t for c in view_ids])  # (nv, 3)
    Y = T.a * T.u_j + T.b * e
    X = np.einsum("nij,nj->ni", R, Y)
    if np.any(X[:, 2] <= 0):
        bad = view_ids[int(np.argmin(X[:, 2]))]
        raise NegativeDepth(f"feature {track.feature_id} behind camera {bad}")
    obs = np.array([track.observations[n][1][:2] for n in views], dtype=float)
    r = (obs - X[:, :2] / X[:, 2:3]).ravel()

    z = X[:, 2]
    proj = np.zeros((nv, 2, 3))
    proj[:, 0, 0] = proj[:, 1, 1] = 1.0 / z
    proj[:, :, 2] = -X[:, :2] / z[:, None] ** 2
    Pi = proj @ R  # (nv, 2, 3)

    # sensitivities of a clone's camera centre to its own (phi, dp)
    def centre_phi(cid):
        c = poses[cid].t if variant.transforms_position else state.clones[state.clone_index(cid)].R @ ext.p_bC
        return -geo.skew(c)

    I3 = np.eye(3)
    db_duj = sb @ geo.skew(T.u_k)
    db_duk = -(sb @ geo.skew(T.u_j))
    da_duk = -(wa @ geo.skew(T.t_j - T.t_k))
    da_dtj = wa @ geo.skew(T.u_k)
    dY_duj = T.a * I3 + e[:, :, None] * db_duj  # (nv, 3, 3)
    dY_duk = np.outer(T.u_j, da_duk) + e[:, :, None] * db_duk
    dY_dtj = np.outer(T.u_j, da_dtj) + T.b * I3
    dY_dtk = -np.outer(T.u_j, da_dtj)

    cj, ck = cids[base.j], cids[base.k]
    du_dphi_j, du_dphi_k = -geo.skew(T.u_j), -geo.skew(T.u_k)
    J_j = np.concatenate([dY_duj @ du_dphi_j + dY_dtj @ centre_phi(cj), np.broadcast_to(-dY_dtj, (nv, 3, 3))], axis=2)
    J_k = np.concatenate([dY_duk @ du_dphi_k + dY_dtk @ centre_phi(ck), np.broadcast_to(-dY_dtk, (nv, 3, 3))], axis=2)
    PJ_j = Pi @ J_j  # (nv, 2, 6)
    PJ_k = Pi @ J_k
    # camera i: its centre enters through -b (t_i) and its rotation through R_cam [Y x]
    Yx = np.zeros((nv, 3, 3))
    Yx[:, 0, 1], Yx[:, 0, 2], Yx[:, 1, 2] = -Y[:, 2], Y[:, 1], -Y[:, 0]
    Yx[:, 1, 0], Yx[:, 2, 0], Yx[:, 2, 1] = Y[:, 2], -Y[:, 1], Y[:, 0]

    # noise: observation -> world bearing is R_cam^T restricted to the first two columns
    Nj = Pi @ dY_duj @ poses[cj].R_cam.T[:, :2]
    Nk = Pi @ dY_duk @ poses[ck].R_cam.T[:, :2]

    H = np.zeros((2 * nv, layout.dim))
    Jn = np.zeros((2 * nv, 2 * len(cids)))
    sl_j = layout.clone(state.clone_index(cj))
    sl_k = layout.clone(state.clone_index(ck))
    for row, (n, ci) in enumerate(zip(views, view_ids)):
        rows = slice(2 * row, 2 * row + 2)
        H[rows, sl_j] += PJ_j[row]
        H[rows, sl_k] += PJ_k[row]
        idx = state.clone_index(ci)
        Ji = -T.b * np.hstack([centre_phi(ci), -I3])
        Ji[:, :3] += Yx[row]
        H[rows, layout.clone(idx)] += Pi[row] @ Ji
        Jn[rows, 2 * n : 2 * n + 2] += np.eye(2)
        Jn[rows, 2 * base.j : 2 * base.j + 2] -= Nj[row]
        Jn[rows, 2 * base.k : 2 * base.k + 2] -= Nk[row]
    return H, Jn, r


def build_po_block(track: FeatureTrack, state: NavState, ext: Extrinsics, sigma: float,
                   variant: Variant = Variant.DST, noise_model: str = "diagonal",
                   min_parallax: float = MIN_PARALLAX, poses: dict | None = None) -> ResidualBlock:
    """Residual, Jacobian and noise for one track. ``sigma`` is in normalized-plane units.

    ``noise_model="propagated"`` maps the pixel noise of all observations, base views
    included, through the residual; ``"diagonal"`` uses ``sigma^2 I``. The right base
    view contributes one residual direction that is flat in both noise and state; the
    propagated model drops it, returning a block with one row fewer. ``poses`` may be
    passed in when many tracks share one state.
    """
    poses = camera_poses(state, ext) if poses is None else poses
    base = select_base_views(track, poses)
    if base.degenerate or base.theta < min_parallax:
        raise DegenerateBaseline(f"feature {track.feature_id}: parallax {base.theta:.2e} rad too small")
    H, J, r = _linearize(track, base, state, ext, variant, poses)
    if noise_model == "propagated":
        lam, U = np.linalg.eigh(J @ J.T)
        # the flat direction is first-order insensitive to noise but not second-order, so
        # whitening it would amplify the second-order term; it is always the smallest
        keep = lam > 1e-6 * lam.max()
        keep[0] = False
        U = U[:, keep]
        r, H = U.T @ r, U.T @ H
        R_meas = sigma**2 * np.diag(lam[keep])
    elif noise_model == "diagonal":
        R_meas = sigma**2 * np.eye(r.size)
    else:
        raise ValueError(f"unknown noise model {noise_model!r}")
    return ResidualBlock(r, H, R_meas)


@lru_cache(maxsize=None)
def chi2_threshold(prob: float, dof: int) -> float:
    return float(chi2.ppf(prob, dof))


def chi2_gate(r, H, P, R_meas, prob: float = 0.95) -> bool:
    S = H @ P @ H.T + R_meas
    L = np.linalg.cholesky(symmetrize(S))  # raises LinAlgError when singular
    y = np.linalg.solve(L, r)
    return bool(y @ y < chi2_threshold(prob, r.size))


def whiten(block: ResidualBlock) -> ResidualBlock:
    """Transform to unit noise: ``L^-1 r``, ``L^-1 H`` with ``R = L L^T``."""
    L = np.linalg.cholesky(symmetrize(block.R_meas))
    return ResidualBlock(np.linalg.solve(L, block.r), np.linalg.solve(L, block.H), np.eye(block.r.size))


def stack_blocks(blocks) -> ResidualBlock:
    blocks = [whiten(b) for b in blocks]
    r = np.concatenate([b.r for b in blocks])
    H = np.vstack([b.H for b in blocks])
    return ResidualBlock(r, H, np.eye(r.size))


def compress(block: ResidualBlock) -> ResidualBlock:
    """QR-compress a whitened block whose rows exceed the state dimension."""
    n = block.H.shape[1]
    if block.H.shape[0] <= n:
        return block
    Q, Rq = np.linalg.qr(block.H, mode="reduced")
    return ResidualBlock(Q.T @ block.r, Rq, np.eye(n))


def ekf_update(state: NavState, P: np.ndarray, block: ResidualBlock, variant: Variant = Variant.DST):
    """Kalman update with Joseph-form covariance; the estimated error is injected into the state."""
    H, r, R = block.H, block.r, block.R_meas
    if H.shape[1] != P.shape[0]:
        raise ValueError("Jacobian columns do not match the covariance")
    PHt = P @ H.T
    S = symmetrize(H @ PHt + R)
    K = np.linalg.solve(S, PHt.T).T
    dx = K @ r
    A = np.eye(P.shape[0]) - K @ H
    P_new = symmetrize(A @ P @ A.T + K @ R @ K.T)
    return inject_correction(state, dx, variant), P_new
