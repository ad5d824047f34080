import numpy as np
import pytest
from scipy.spatial.transform import Rotation
from scipy.stats import chi2

from dstvio.metrics import ate_rmse, associate, nees, pose_error, umeyama


def test_identical_trajectories(rng):
    t = np.arange(100) * 0.05
    p = rng.normal(size=(100, 3))
    assert ate_rmse(t, p, t, p) == pytest.approx(0.0, abs=1e-12)


def test_rigid_offset_removed(rng):
    t = np.arange(100) * 0.05
    p = rng.normal(size=(100, 3)) * 5
    R = Rotation.from_rotvec([0.1, -0.3, 0.7]).as_matrix()
    assert ate_rmse(t, p @ R.T + [1, 2, 3], t, p) < 1e-10
    assert ate_rmse(t, p + [1, 2, 3], t, p, align="none") == pytest.approx(np.sqrt(14))


def test_sim3_removes_scale(rng):
    t = np.arange(50.0)
    p = rng.normal(size=(50, 3))
    assert ate_rmse(t, 2.5 * p + 1, t, p, align="sim3") < 1e-10
    assert ate_rmse(t, 2.5 * p + 1, t, p, align="se3") > 0.1


def test_iid_noise_rmse(rng):
    t = np.arange(1000) * 0.1
    p = np.cumsum(rng.normal(size=(1000, 3)), axis=0)
    sigma = 0.05
    est = p + sigma * rng.normal(size=p.shape)
    assert ate_rmse(t, est, t, p) == pytest.approx(sigma * np.sqrt(3), rel=0.05)


def test_association_window():
    i, j = associate(np.array([0.0, 1.0, 2.0]), np.array([0.004, 1.01, 1.998]))
    assert i.tolist() == [0, 2] and j.tolist() == [0, 2]
    with pytest.raises(ValueError):
        ate_rmse(np.array([0.0]), np.zeros((1, 3)), np.array([5.0]), np.zeros((1, 3)))


def test_umeyama_recovers_transform(rng):
    src = rng.normal(size=(30, 3))
    R = Rotation.random(random_state=1).as_matrix()
    dst = 0.7 * src @ R.T + [4, 5, 6]
    R_, t_, s_ = umeyama(src, dst, with_scale=True)
    assert np.allclose(R_, R) and np.allclose(t_, [4, 5, 6]) and s_ == pytest.approx(0.7)


def test_nees_basics(rng):
    P = np.diag([1.0, 2.0, 3.0])
    assert nees([np.zeros(3)], [P])[0] == 0.0
    e = rng.normal(size=3)
    assert nees([e], [10 * P])[0] == pytest.approx(nees([e], [P])[0] / 10)
    with pytest.raises(np.linalg.LinAlgError):
        nees([e], [np.zeros((3, 3))])


def test_consistent_toy_filter_nees(rng):
    # scalar random walk with noisy position measurements, 50 runs of a 2-state Kalman filter
    F = np.array([[1.0, 0.1], [0.0, 1.0]])
    Q = np.diag([1e-4, 1e-3])
    H = np.array([[1.0, 0.0]])
    R = np.array([[0.01]])
    means = []
    for _ in range(50):
        x = rng.multivariate_normal([0, 0], np.eye(2))
        xh, P = np.zeros(2), np.eye(2)
        errs, covs = [], []
        for _ in range(40):
            x = F @ x + rng.multivariate_normal([0, 0], Q)
            xh, P = F @ xh, F @ P @ F.T + Q
            z = H @ x + rng.normal(0, 0.1, size=1)
            S = H @ P @ H.T + R
            K = P @ H.T @ np.linalg.inv(S)
            xh, P = xh + K @ (z - H @ xh), (np.eye(2) - K @ H) @ P
            errs.append(xh - x)
            covs.append(P)
        means.append(nees(errs, covs).mean())
    # 2000 chi2(2) samples: mean 2, std of the mean 2/sqrt(2000)
    assert abs(np.mean(means) - 2.0) < 3 * 2 / np.sqrt(2000) * 1.5


def test_pose_error_zero(rng):
    R = Rotation.random(random_state=3).as_matrix()
    assert np.allclose(pose_error(R, np.ones(3), R, np.ones(3)), 0)
