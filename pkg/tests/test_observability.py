import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dstvio import geometry as geo
from dstvio.observability import (
    LabScene, SlamState, analytic_nullspace, build_O, ekf_measurement, lab_scene, linearize,
    measurement_jacobian, nullspace_residual, numeric_rank, perturbation_study, run_lab, slam_jacobians,
    transition,
)
from dstvio.po_update import Extrinsics, NegativeDepth
from dstvio.propagation import ImuSample, WorldParams, continuous_jacobians
from dstvio.state import ATT, BA, POS, VEL, NavState, Variant, inject_correction
from oracles import random_imu_state

VARIANTS = list(Variant)
WORLD = WorldParams()


@pytest.fixture(scope="module")
def scenes():
    return {kind: lab_scene(kind, duration=3.0) for kind in ("line", "circle", "random")}


def _slam_in_view(rng, n=4):
    ext = Extrinsics.forward_looking()
    imu = random_imu_state(rng)
    R_cam = ext.R_bC @ imu.R.T
    centre = imu.p + imu.R @ ext.p_bC
    rays = np.column_stack([rng.uniform(-0.5, 0.5, (n, 2)), np.ones(n)])
    marks = centre + (rays * rng.uniform(3, 9, (n, 1))) @ R_cam
    return SlamState(imu, marks), ext


def _project(state, ext):
    R_cam = ext.R_bC @ state.imu.R.T
    X = (state.landmarks - state.imu.p - state.imu.R @ ext.p_bC) @ R_cam.T
    return (X[:, :2] / X[:, 2:]).ravel()


def _inject(state, dx, variant):
    imu = inject_correction(NavState(state.imu), dx[:15], variant).imu
    return SlamState(imu, state.landmarks - dx[15:].reshape(-1, 3))


@pytest.mark.parametrize("variant", VARIANTS)
def test_measurement_jacobian_matches_finite_differences(rng, variant):
    for _ in range(5):
        state, ext = _slam_in_view(rng)
        H = measurement_jacobian(state, variant, ext)
        J = np.zeros_like(H)
        h = 1e-6
        for i in range(state.dim):
            d = np.zeros(state.dim)
            d[i] = h
            J[:, i] = (_project(_inject(state, d, variant), ext) - _project(_inject(state, -d, variant), ext)) / (2 * h)
        assert np.abs(H - J).max() < 1e-5 * max(1.0, np.abs(J).max())


def test_measurement_ignores_accel_bias(rng):
    state, ext = _slam_in_view(rng)
    for v in VARIANTS:
        assert not measurement_jacobian(state, v, ext)[:, BA].any()


def test_landmark_behind_camera_raises(rng):
    state, ext = _slam_in_view(rng, n=1)
    centre = state.imu.p + state.imu.R @ ext.p_bC
    state.landmarks[0] = 2 * centre - state.landmarks[0]
    with pytest.raises(NegativeDepth):
        ekf_measurement(state, ext)


@pytest.mark.parametrize("variant", VARIANTS)
def test_exact_transition_matches_mechanization(rng, variant):
    from dstvio.propagation import propagate_mean
    from dstvio.state import error_between

    imu = random_imu_state(rng)
    sample = ImuSample(0.0, rng.normal(size=3), 3 * rng.normal(size=3))
    dt = 0.05
    Phi = transition(SlamState(imu), variant, WORLD, sample, dt, "exact")
    nxt = NavState(propagate_mean(imu, sample, WORLD, dt))
    h = 1e-6
    J = np.zeros((15, 15))
    for i in range(15):
        cols = []
        for s in (h, -h):
            d = np.zeros(15)
            d[i] = s
            truth = propagate_mean(inject_correction(NavState(imu), d, variant).imu, sample, WORLD, dt)
            cols.append(error_between(nxt, NavState(truth), variant))
        J[:, i] = (cols[0] - cols[1]) / (2 * h)
    assert np.abs(Phi - J).max() < 1e-8


def test_st_and_dst_share_velocity_row_but_not_position_row(rng):
    imu = random_imu_state(rng)
    world = WorldParams.with_earth_rotation()
    F_st, _ = continuous_jacobians(imu, world, Variant.ST)
    F_dst, _ = continuous_jacobians(imu, world, Variant.DST)
    assert np.array_equal(F_st[VEL], F_dst[VEL])
    W = geo.skew(world.omega)
    assert np.allclose(F_dst[POS, 0:3], geo.skew(imu.p) @ W)
    assert np.allclose(F_dst[POS, 9:12], geo.skew(imu.p) @ imu.R)
    assert not np.allclose(F_st[POS], F_dst[POS])


def test_slam_jacobians_landmark_block_is_static(rng):
    state, ext = _slam_in_view(rng)
    sample = ImuSample(0.0, rng.normal(size=3), rng.normal(size=3))
    Phi, H = slam_jacobians(state, Variant.DST, WORLD, sample, 0.01, ext, mode="series")
    assert np.array_equal(Phi[15:, 15:], np.eye(3 * len(state.landmarks)))
    assert not Phi[15:, :15].any() and not Phi[:15, 15:].any()
    assert H.shape == (2 * len(state.landmarks), state.dim)


def test_build_O_single_epoch_is_H(rng):
    H = rng.normal(size=(6, 18))
    assert np.array_equal(build_O([H], []), H)


def test_build_O_identity_transitions_stack(rng):
    Hs = [rng.normal(size=(4, 18)) for _ in range(3)]
    assert np.array_equal(build_O(Hs, [np.eye(18)] * 2), np.vstack(Hs))


def test_build_O_matches_reference_product(rng):
    Hs = [rng.normal(size=(2, 5)) for _ in range(5)]
    Phis = [np.eye(5) + 0.1 * rng.normal(size=(5, 5)) for _ in range(4)]
    O = build_O(Hs, Phis)
    for k in range(5):
        M = np.eye(5)
        for j in range(k):
            M = Phis[j] @ M
        assert np.abs(O[2 * k : 2 * k + 2] - Hs[k] @ M).max() < 1e-12


def test_build_O_needs_matching_transitions(rng):
    with pytest.raises(ValueError):
        build_O([np.eye(3)] * 3, [np.eye(3)])


def test_dst_translation_columns_only_touch_position_and_landmarks(rng):
    state, _ = _slam_in_view(rng, n=3)
    N = analytic_nullspace(Variant.DST, state, WORLD)
    T = N[:, :3]
    assert np.array_equal(T[POS], np.eye(3))
    for i in range(3):
        assert np.array_equal(T[state.landmark(i)], np.eye(3))
    mask = np.ones(state.dim, bool)
    mask[POS] = False
    mask[15:] = False
    assert not T[mask].any()
    # yaw column: gravity at attitude, zero velocity and position
    assert np.array_equal(N[ATT, 3], WORLD.gravity)
    assert not N[VEL, 3].any() and not N[POS, 3].any()


def test_ekf_yaw_column_carries_velocity(rng):
    state, _ = _slam_in_view(rng)
    N = analytic_nullspace(Variant.EKF, state, WORLD)
    g = WORLD.gravity
    assert np.allclose(N[VEL, 3], np.cross(state.imu.v, g))
    assert np.allclose(N[POS, 3], np.cross(state.imu.p, g))
    assert np.allclose(N[state.landmark(1), 3], np.cross(state.landmarks[1], g))


def test_st_yaw_column_position_but_not_velocity(rng):
    state, _ = _slam_in_view(rng)
    N = analytic_nullspace(Variant.ST, state, WORLD)
    g = WORLD.gravity
    assert np.allclose(N[POS, 3], np.cross(state.imu.p, g))
    assert not N[VEL, 3].any()
    assert np.allclose(N[state.landmark(0), 3], np.cross(state.landmarks[0] - state.imu.p, g))


@given(st.integers(0, 10_000))
@settings(max_examples=20, deadline=None)
def test_null_basis_has_full_column_rank(seed):
    state, _ = _slam_in_view(np.random.default_rng(seed))
    for v in VARIANTS:
        assert np.linalg.matrix_rank(analytic_nullspace(v, state, WORLD)) == 4


def test_nullspace_residual_is_scaled_max_entry():
    O = np.array([[1.0, -3.0], [0.5, 0.5]])
    N = np.array([[3.0], [1.0]])
    assert nullspace_residual(O, N)[0] == pytest.approx(2.0 / (4.0 * 3.0))


@pytest.mark.parametrize("kind", ["line", "circle", "random"])
@pytest.mark.parametrize("variant", VARIANTS)
def test_true_state_null_space_and_rank(scenes, kind, variant):
    rep = run_lab(variant, kind, "exact", scene=scenes[kind])
    assert rep.residual.max() < 1e-8
    assert rep.rank == rep.dim - 4


@pytest.mark.parametrize("kind", ["line", "circle", "random"])
def test_dst_null_space_survives_series_discretization(scenes, kind):
    rep = run_lab(Variant.DST, kind, "series", scene=scenes[kind])
    assert rep.residual.max() < 1e-12
    assert rep.rank == rep.dim - 4


def test_perturbed_linearization_breaks_ekf_yaw_but_not_dst(scenes):
    scene = scenes["random"]
    true_ekf = run_lab(Variant.EKF, scene=scene).residual[3]
    res = perturbation_study(5, scene=scene)
    assert np.all(res[Variant.EKF] >= 10 * max(true_ekf, 1e-16))
    assert np.all(res[Variant.DST] < 10 * np.finfo(float).eps)


def test_dst_yaw_basis_depends_only_on_relative_geometry():
    a = lab_scene("random", duration=2.0)
    b = lab_scene("random", duration=2.0, origin=[40.0, -25.0, 3.0])
    Na = analytic_nullspace(Variant.DST, a.slam(0), a.world)
    Nb = analytic_nullspace(Variant.DST, b.slam(0), b.world)
    assert np.allclose(Na, Nb, atol=1e-9)


def test_printed_transformed_yaw_column_needs_origin_at_first_body_position():
    # with classical landmark errors the relative-vector yaw column is a null vector
    # only when the first body position is the global origin
    shifted = lab_scene("random", duration=2.0, origin=[40.0, -25.0, 3.0])
    assert run_lab(Variant.DST, scene=shifted).residual[3] > 1e-6
    anchored = lab_scene("random", duration=2.0)
    assert run_lab(Variant.DST, scene=anchored).residual[3] < 1e-12


def test_numeric_rank_tolerance():
    O = np.diag([1.0, 1e-3, 1e-9, 0.0])
    assert numeric_rank(O) == 2
    assert numeric_rank(O, rtol=1e-10) == 3


def test_report_text_lists_rank_and_residuals(scenes):
    rep = run_lab(Variant.ST, scene=scenes["line"])
    txt = rep.text()
    assert f"rank={rep.rank}" in txt and "yaw" in txt and f"epochs={rep.epochs}" in txt


def test_linearize_perturbation_offsets_are_per_epoch(scenes):
    scene = scenes["line"]
    calls = []

    def perturb(e):
        calls.append(e)
        return np.zeros(3), np.zeros(3)

    Hs, Phis, _ = linearize(scene, Variant.EKF, "series", perturb)
    assert calls == list(range(len(scene.epochs)))
    Hs0, Phis0, _ = linearize(scene, Variant.EKF, "series")
    assert all(np.array_equal(a, b) for a, b in zip(Phis, Phis0))
