"""The eight primary acceptance criteria, each at its stated tolerance and runtime budget.

Every test prints one ``[criterion N] PASS/FAIL`` line to the terminal, even under
captured output.
"""
import time

import numpy as np
import pytest

from dstvio.experiments import (
    ablation, consistency_runs, deprivation_study, nees_in_band, noise_only_gate, truth_window,
)
from dstvio.observability import perturbation_study, run_lab
from dstvio.po_update import (
    DegenerateBaseline, FeatureTrack, NegativeDepth, camera_poses, po_jacobian, po_point, po_residual,
    select_base_views,
)
from dstvio.propagation import NoiseParams
from dstvio.sim import SimConfig, generate
from dstvio.smoother import kalman_forward, rts_backward
from dstvio.state import Variant, inject_correction
from oracles import batch_smoother, linear_toy, random_scene, rel_err

pytestmark = pytest.mark.acceptance


@pytest.fixture
def report(capsys):
    def _report(n, title, passed, detail, elapsed, budget):
        in_time = budget is None or elapsed < budget
        limit = "no budget" if budget is None else f"budget {budget:.0f} s"
        with capsys.disabled():
            print(f"\n[criterion {n}] {'PASS' if passed and in_time else 'FAIL'} {title}: {detail} "
                  f"({elapsed:.1f} s, {limit})")
        assert passed, detail
        assert in_time, f"runtime {elapsed:.1f} s over budget {budget} s"

    return _report


def _fd_prediction_jacobian(track, base, state, ext, variant, eps=1e-6):
    dim = state.layout.dim
    J = np.zeros((2 * (len(track.observations) - 1), dim))
    for c in range(dim):
        d = np.zeros(dim)
        d[c] = eps
        rp = po_residual(track, base, inject_correction(state, d, variant), ext)
        rm = po_residual(track, base, inject_correction(state, -d, variant), ext)
        J[:, c] = -(rp - rm) / (2 * eps)
    return J


def test_jacobian_gate(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(100):
        state, ext, _, track = random_scene(rng, n_views=int(rng.integers(2, 7)), extra_clones=2)
        b = select_base_views(track, camera_poses(state, ext))
        H = po_jacobian(track, b, state, ext, Variant.DST)
        worst = max(worst, rel_err(H, _fd_prediction_jacobian(track, b, state, ext, Variant.DST)))
    report(1, "PO Jacobian vs central differences", worst < 1e-4,
           f"worst relative error {worst:.2e} over 100 geometries (< 1e-4)", time.perf_counter() - t0, 10)


def test_po_exactness(report):
    t0 = time.perf_counter()
    cfg = SimConfig(duration_s=3.0, noise=NoiseParams(0.0, 0.0, 0.0, 0.0), sigma_px=0.0, seed=3)
    data = generate(cfg)
    frames = data.frames()
    cams = data.cam_times()
    worst_r = worst_d = 0.0
    n_tracks = 0
    for epoch in range(10, len(cams), 5):
        state = truth_window(data, epoch, 8)
        poses = camera_poses(state, data.ext)
        tracks = {}
        for c in state.clones:
            for fid, obs in frames.get(c.timestamp, []):
                tracks.setdefault(fid, []).append((c.clone_id, obs))
        for fid, obs in tracks.items():
            if len(obs) < 3:
                continue
            track = FeatureTrack(fid, obs)
            try:
                base = select_base_views(track, poses)
                r = po_residual(track, base, state, data.ext)
                dirs = [po_point(track, base, i, poses) for i in range(len(obs))]
            except (DegenerateBaseline, NegativeDepth):
                continue
            n_tracks += 1
            worst_r = max(worst_r, np.abs(r).max())
            for (cid, _), X in zip(obs, dirs):
                ref = poses[cid].R_cam @ (data.landmarks[fid] - poses[cid].t)
                worst_d = max(worst_d, np.abs(X / np.linalg.norm(X) - ref / np.linalg.norm(ref)).max())
    passed = n_tracks > 100 and worst_r < 1e-9 and worst_d < 1e-10
    report(2, "PO exactness on noise-free data", passed,
           f"{n_tracks} tracks, max residual {worst_r:.1e} (< 1e-9), max direction error {worst_d:.1e} (< 1e-10)",
           time.perf_counter() - t0, 5)


def test_null_space_verification(report):
    t0 = time.perf_counter()
    rows, passed = [], True
    for kind in ("line", "circle", "random"):
        for v in Variant:
            rep = run_lab(v, kind)
            ok = rep.rank == rep.dim - 4 and rep.residual.max() < 1e-8
            passed &= ok
            rows.append(f"{v.value}/{kind} rank {rep.rank}/{rep.dim} res {rep.residual.max():.0e}")
    report(3, "true-state null space and rank", passed, "; ".join(rows), time.perf_counter() - t0, 30)


def test_consistency_ordering(report):
    t0 = time.perf_counter()
    res = perturbation_study(50)
    ekf, dst = np.median(res[Variant.EKF]), np.median(res[Variant.DST])
    ratio = ekf / max(dst, 1e-300)
    report(4, "perturbed yaw null residual, EKF vs DST", ratio >= 10,
           f"median over 50 seeds ekf {ekf:.2e} dst {dst:.2e}, ratio {ratio:.1e} (>= 10)",
           time.perf_counter() - t0, 60)


ABLATION = SimConfig(duration_s=12.0)


def test_ablation_ordering(report):
    t0 = time.perf_counter()
    res = ablation(ABLATION, range(20))
    m = res.mean()
    frac = res.full_best_fraction()
    passed = res.ordering_holds() and frac >= 0.7
    means = ", ".join(f"{k} {v:.4f}" for k, v in m.items())
    report(5, "ablation ordering over 20 seeds", passed,
           f"mean ATE {means}; ordering {'holds' if res.ordering_holds() else 'violated'}; "
           f"full strictly best in {frac:.0%} (>= 70%)", time.perf_counter() - t0, 300)


def test_smoother_correctness(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(6)
    x0, P0, Phis, Q, Hs, R, zs, obs, steps = linear_toy(rng)
    recs = kalman_forward(x0, P0, steps)
    xs, Ps = rts_backward(recs)
    xb, Pb = batch_smoother(x0, P0, Phis, Q, Hs, R, zs, obs)
    err = max(max(np.abs(a - b).max() for a, b in zip(xs, xb)), max(np.abs(a - b).max() for a, b in zip(Ps, Pb)))
    loewner = min(np.linalg.eigvalsh(r.P_f - P).min() for r, P in zip(recs, Ps))
    final = np.array_equal(xs[-1], recs[-1].x_f) and np.array_equal(Ps[-1], recs[-1].P_f)
    passed = err < 1e-8 and loewner >= -1e-12 and final
    report(6, "RTS vs batch least squares", passed,
           f"max deviation {err:.1e} (< 1e-8), min eig(P_f - P_RTS) {loewner:.1e}, final epoch identical {final}",
           time.perf_counter() - t0, 5)


def test_deprivation_recovery(report):
    t0 = time.perf_counter()
    out = deprivation_study(range(20))
    better = sum(o.endpoint_improved for o in out)
    conv = [o for o in out if o.converged]
    ate_ok = sum(o.ate_improved for o in conv)
    passed = better >= 18 and ate_ok == len(conv)
    worse = [o.seed for o in conv if not o.ate_improved]
    report(7, "60 s blackout recovery", passed,
           f"endpoint improved in {better}/20 (>= 18); segment ATE improved in {ate_ok}/{len(conv)} converged runs"
           + (f", worse on seeds {worse}" if worse else ""), time.perf_counter() - t0, 300)


HEALTH = SimConfig(duration_s=20.0)


def test_filter_health(report):
    t0 = time.perf_counter()
    # run_filter checks symmetry and PSD at every epoch and raises on violation
    runs = consistency_runs(HEALTH, range(50))
    worst = np.inf
    for r in runs:
        for rec in r.records:
            w = np.linalg.eigvalsh(rec.P_imu)
            worst = min(worst, w[0] / max(1.0, w[-1]))
    inband = nees_in_band(runs)
    gate = noise_only_gate(generate(SimConfig(duration_s=10.0, seed=100)), "po", stride=2)
    passed = worst >= -1e-10 and abs(gate - 0.95) <= 0.02 and inband >= 0.8
    report(8, "filter health", passed,
           f"min scaled eigenvalue {worst:.1e} (>= -1e-10); noise-only gate acceptance {gate:.1%} (95 +/- 2%); "
           f"NEES in 99% band at {inband:.1%} of epochs over 50 runs (>= 80%)", time.perf_counter() - t0, None)
