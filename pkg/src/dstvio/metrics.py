"""Trajectory error metrics and filter consistency statistics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry as geo


@dataclass
class MetricReport:
    ate_rmse: float
    nees: np.ndarray | None = None
    endpoint_error: float | None = None
    percent_per_distance: float | None = None


def associate(t_est, t_ref, max_dt: float = 5e-3):
    """Index pairs ``(i_est, i_ref)`` matched by nearest timestamp within ``max_dt``."""
    t_ref = np.asarray(t_ref)
    order = np.argsort(t_ref)
    ts = t_ref[order]
    idx = np.clip(np.searchsorted(ts, t_est), 1, max(len(ts) - 1, 1))
    left = ts[idx - 1]
    right = ts[np.minimum(idx, len(ts) - 1)]
    pick = np.where(np.abs(t_est - left) <= np.abs(right - t_est), idx - 1, np.minimum(idx, len(ts) - 1))
    ok = np.abs(ts[pick] - t_est) <= max_dt
    return np.flatnonzero(ok), order[pick[ok]]


def umeyama(src: np.ndarray, dst: np.ndarray, with_scale: bool = False):
    """``(R, t, s)`` minimizing ``sum |dst - (s R src + t)|^2``."""
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    xs, xd = src - mu_s, dst - mu_d
    C = xd.T @ xs / len(src)
    U, D, Vt = np.linalg.svd(C)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    s = float(np.trace(np.diag(D) @ S) / (xs**2).sum() * len(src)) if with_scale else 1.0
    return R, mu_d - s * R @ mu_s, s


def ate_rmse(t_est, p_est, t_ref, p_ref, align: str = "se3", max_dt: float = 5e-3) -> float:
    """RMSE of translation residuals after ``se3``, ``sim3`` or no (``none``) alignment."""
    i, j = associate(np.asarray(t_est), np.asarray(t_ref), max_dt)
    if len(i) == 0:
        raise ValueError("no associable pose pairs")
    a, b = np.asarray(p_est)[i], np.asarray(p_ref)[j]
    if align != "none" and len(i) >= 3:
        R, t, s = umeyama(a, b, with_scale=(align == "sim3"))
        a = s * a @ R.T + t
    return float(np.sqrt(np.mean(np.sum((a - b) ** 2, axis=1))))


def pose_error(R_est, p_est, R_true, p_true) -> np.ndarray:
    """Six-vector ``[phi, dp]`` with ``R_true = Exp(phi) R_est`` and ``dp = Exp(phi) p_est - p_true``."""
    phi = geo.so3_log(R_true @ R_est.T)
    return np.concatenate([phi, geo.so3_exp(phi) @ p_est - p_true])


def nees(errors, covariances) -> np.ndarray:
    """Per-epoch ``e^T P^-1 e``; raises ``LinAlgError`` on a singular block."""
    out = np.empty(len(errors))
    for n, (e, P) in enumerate(zip(errors, covariances)):
        L = np.linalg.cholesky(0.5 * (P + P.T))
        y = np.linalg.solve(L, e)
        out[n] = y @ y
    return out


def path_length(p) -> float:
    return float(np.sum(np.linalg.norm(np.diff(p, axis=0), axis=1)))
