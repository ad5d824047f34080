"""Feature triangulation and the nullspace-projected measurement of the classical sliding-window filter.

This is the reference path the pose-only model replaces: the feature is triangulated
from the window, residuals are linearized in both pose and feature, and the feature
Jacobian is removed by projecting onto its left nullspace.
"""
from __future__ import annotations

import numpy as np
import scipy.linalg

from . import geometry as geo
from .po_update import FeatureTrack, NegativeDepth, ResidualBlock, camera_poses, projection_jacobian
from .state import NavState, Variant


class TriangulationFailure(ValueError):
    pass


def triangulate_linear(track: FeatureTrack, poses: dict) -> np.ndarray:
    """Point minimizing the summed squared distance to every observation ray."""
    A = np.zeros((3, 3))
    b = np.zeros(3)
    for cid, obs in track.observations:
        pose = poses[cid]
        u = pose.R_cam.T @ np.asarray(obs, float)
        u /= np.linalg.norm(u)
        M = np.eye(3) - np.outer(u, u)
        A += M
        b += M @ pose.t
    if np.linalg.cond(A) > 1e8:
        raise TriangulationFailure(f"feature {track.feature_id}: rays nearly parallel")
    return np.linalg.solve(A, b)


def _reprojection(track, poses, p_f):
    r, J = [], []
    for cid, obs in track.observations:
        pose = poses[cid]
        X = pose.R_cam @ (p_f - pose.t)
        if X[2] <= 1e-3:
            raise NegativeDepth(f"feature {track.feature_id} behind camera {cid}")
        r.append(np.asarray(obs[:2], float) - X[:2] / X[2])
        J.append(projection_jacobian(X) @ pose.R_cam)
    return np.concatenate(r), np.vstack(J)


def triangulate(track: FeatureTrack, poses: dict, iterations: int = 10, costs: list | None = None) -> np.ndarray:
    """Linear initialization refined by Gauss-Newton on the reprojection error.

    If ``costs`` is given, the squared reprojection error before each step is appended.
    """
    p_f = triangulate_linear(track, poses)
    for _ in range(iterations):
        r, J = _reprojection(track, poses, p_f)
        if costs is not None:
            costs.append(float(r @ r))
        step = np.linalg.lstsq(J, r, rcond=None)[0]
        p_f = p_f + step
        if np.linalg.norm(step) < 1e-10 * (1.0 + np.linalg.norm(p_f)):
            break
    _reprojection(track, poses, p_f)
    return p_f


def feature_jacobians(track: FeatureTrack, state: NavState, ext, p_f, variant: Variant = Variant.DST,
                      poses: dict | None = None):
    """Residual and Jacobians of the predicted coordinates w.r.t. the error state and the feature."""
    variant = Variant(variant)
    poses = camera_poses(state, ext) if poses is None else poses
    layout = state.layout
    m = len(track.observations)
    r = np.zeros(2 * m)
    Hx = np.zeros((2 * m, layout.dim))
    Hf = np.zeros((2 * m, 3))
    for n, (cid, obs) in enumerate(track.observations):
        pose = poses[cid]
        idx = state.clone_index(cid)
        d = p_f - pose.t
        X = pose.R_cam @ d
        if X[2] <= 0:
            raise NegativeDepth(f"feature {track.feature_id} behind camera {cid}")
        rows = slice(2 * n, 2 * n + 2)
        r[rows] = np.asarray(obs[:2], float) - X[:2] / X[2]
        Pi = projection_jacobian(X) @ pose.R_cam
        c = pose.t if variant.transforms_position else state.clones[idx].R @ ext.p_bC
        Hx[rows, layout.clone_att(idx)] = Pi @ (geo.skew(d) + geo.skew(c))
        Hx[rows, layout.clone_pos(idx)] = Pi
        Hf[rows] = Pi
    return r, Hx, Hf


def msckf_block(track: FeatureTrack, state: NavState, ext, sigma: float,
                variant: Variant = Variant.DST, poses: dict | None = None) -> ResidualBlock:
    """Triangulate, linearize and project out the feature; ``sigma`` in normalized units."""
    poses = camera_poses(state, ext) if poses is None else poses
    p_f = triangulate(track, poses)
    r, Hx, Hf = feature_jacobians(track, state, ext, p_f, variant, poses)
    N = scipy.linalg.null_space(Hf.T)
    return ResidualBlock(N.T @ r, N.T @ Hx, sigma**2 * np.eye(N.shape[1]))
