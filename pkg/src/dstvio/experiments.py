"""Monte Carlo drivers: ablation, consistency, noise-only gating and blackout recovery."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.stats import chi2

from .metrics import ate_rmse
from .po_update import (DegenerateBaseline, FeatureTrack, NegativeDepth, build_po_block, camera_poses,
                        chi2_gate)
from .sim import SimConfig, SimData, generate
from .smoother import DeprivationSchedule, deprivation_supervisor
from .state import CloneState, NavState
from .triangulation import TriangulationFailure, msckf_block
from .vio import VARIANTS, FilterConfig, RunResult, run_filter

NEES_DOF = 6


def filter_config(sim: SimConfig, variant: str = "full", **kw) -> FilterConfig:
    return FilterConfig(variant=variant, noise=sim.noise, world=sim.world, sigma_norm=sim.sigma_norm,
                        max_clones=sim.max_clones, **kw)


def run_variants(data: SimData, variants=tuple(VARIANTS), seed: int = 0, **kw) -> dict:
    return {v: run_filter(data, filter_config(data.config, v, **kw), seed) for v in variants}


@dataclass
class AblationResult:
    seeds: list
    ate: dict  # variant -> array over seeds

    def mean(self) -> dict:
        return {v: float(np.mean(a)) for v, a in self.ate.items()}

    def full_best_fraction(self) -> float:
        others = np.vstack([a for v, a in self.ate.items() if v != "full"])
        return float(np.mean(self.ate["full"] < others.min(axis=0)))

    def ordering_holds(self) -> bool:
        m = self.mean()
        return m["full"] <= min(m["no-st"], m["no-po"]) and max(m["no-st"], m["no-po"]) <= m["baseline"]


def ablation(base: SimConfig, seeds, variants=tuple(VARIANTS), **kw) -> AblationResult:
    ate = {v: [] for v in variants}
    for s in seeds:
        data = generate(replace(base, seed=int(s)))
        for v, res in run_variants(data, variants, seed=int(s), **kw).items():
            ate[v].append(res.ate)
    return AblationResult(list(seeds), {v: np.array(a) for v, a in ate.items()})


def nees_band(prob: float = 0.99, dof: int = NEES_DOF):
    lo = (1.0 - prob) / 2.0
    return chi2.ppf(lo, dof), chi2.ppf(1.0 - lo, dof)


def nees_in_band(results, prob: float = 0.99) -> float:
    lo, hi = nees_band(prob)
    vals = np.concatenate([r.nees for r in results])
    return float(np.mean((vals >= lo) & (vals <= hi)))


def consistency_runs(base: SimConfig, seeds, variant: str = "full", **kw) -> list:
    out = []
    for s in seeds:
        data = generate(replace(base, seed=int(s)))
        out.append(run_filter(data, filter_config(base, variant, **kw), int(s)))
    return out


def truth_window(data: SimData, epoch: int, length: int) -> NavState:
    """Clone window holding the true poses of ``length`` camera epochs ending at ``epoch``."""
    cams = data.cam_times()
    clones = []
    for n, t in enumerate(cams[epoch - length + 1 : epoch + 1]):
        i = data.truth.index(t)
        clones.append(CloneState(n, float(t), data.truth.q[i].copy(), data.truth.p[i].copy()))
    return NavState(data.truth.state(data.truth.index(cams[epoch])), clones, max(length, 1), length)


def noise_only_gate(data: SimData, measurement: str = "po", variant="dst", window: int = 8, stride: int = 4,
                    prob: float = 0.95, noise_model: str = "propagated", min_track: int = 3) -> float:
    """Acceptance rate of the chi-square gate on residuals linearized at the true state.

    The state covariance is zero, so only pixel noise remains in the residual.
    """
    cams = data.cam_times()
    frames = data.frames()
    tried = accepted = 0
    for epoch in range(window - 1, len(cams), stride):
        state = truth_window(data, epoch, window)
        poses = camera_poses(state, data.ext)
        tracks = {}
        for c in state.clones:
            for fid, obs in frames.get(c.timestamp, []):
                tracks.setdefault(fid, []).append((c.clone_id, obs))
        P = np.zeros((state.layout.dim, state.layout.dim))
        for fid, obs in tracks.items():
            if len(obs) < min_track:
                continue
            track = FeatureTrack(fid, obs)
            try:
                if measurement == "po":
                    blk = build_po_block(track, state, data.ext, data.config.sigma_norm, variant, noise_model,
                                         poses=poses)
                else:
                    blk = msckf_block(track, state, data.ext, data.config.sigma_norm, variant, poses)
            except (DegenerateBaseline, NegativeDepth, TriangulationFailure, np.linalg.LinAlgError):
                continue
            if blk.r.size == 0:
                continue
            tried += 1
            accepted += bool(chi2_gate(blk.r, blk.H, P, blk.R_meas, prob))
    if not tried:
        raise ValueError("no usable tracks")
    return accepted / tried


# --- blackout recovery -------------------------------------------------------------------


def deprivation_config(seed: int, blackout: float = 60.0, before: float = 10.0, after: float = 12.0,
                       **kw) -> SimConfig:
    """Excited circle (bounded landmark field) with one blackout of ``blackout`` seconds."""
    return SimConfig(trajectory_kind="circle", excite=True, duration_s=before + blackout + after, seed=seed,
                     deprivation=[(before, before + blackout)], **kw)


@dataclass
class DeprivationOutcome:
    seed: int
    converged: bool
    endpoint_forward: float
    endpoint_smoothed: float
    ate_forward: float
    ate_smoothed: float
    frac_epochs_better: float

    @property
    def endpoint_improved(self) -> bool:
        return self.converged and self.endpoint_smoothed < self.endpoint_forward

    @property
    def ate_improved(self) -> bool:
        return self.converged and self.ate_smoothed < self.ate_forward


def deprivation_run(config: SimConfig, variant: str = "full", seed: int | None = None):
    """Run VIO through the blackout, then the supervisor; returns ``(vio, supervised, outcome)``."""
    data = generate(config)
    seed = config.seed if seed is None else seed
    fc = filter_config(config, variant)
    vio: RunResult = run_filter(data, fc, seed)
    schedule = DeprivationSchedule(tuple(config.deprivation))
    out = deprivation_supervisor(vio.records, list(data.imu_samples()), schedule, config.noise, config.world,
                                 fc.error_variant)
    seg = out.segments[0]
    idx = [data.truth.index(t) for t in seg.t]
    truth = data.truth.p[idx]
    ef = np.linalg.norm(seg.p_forward - truth, axis=1)
    if seg.converged:
        es = np.linalg.norm(seg.p_smoothed - truth, axis=1)
        outcome = DeprivationOutcome(seed, True, ef[-1], es[-1], ate_rmse(seg.t, seg.p_forward, seg.t, truth, "none"),
                                     ate_rmse(seg.t, seg.p_smoothed, seg.t, truth, "none"), float(np.mean(es <= ef)))
    else:
        rms = float(np.sqrt(np.mean(ef**2)))
        outcome = DeprivationOutcome(seed, False, ef[-1], ef[-1], rms, rms, 0.0)
    return vio, out, outcome


def deprivation_study(seeds, variant: str = "full", **kw) -> list:
    return [deprivation_run(deprivation_config(int(s), **kw), variant)[2] for s in seeds]
