import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal
from scipy.spatial import cKDTree

from conftest import random_rotation
from liogvm.errors import TimestampOutOfCache, TooFewPoints
from liogvm.imu import ImuSample, NoiseParams, propagate
from liogvm.lidar import (
    Extrinsic,
    RawPoint,
    as_distributions,
    deskew,
    fit_distributions,
    fit_raw,
    points_to_arrays,
    range_filter,
    regularize_covariance,
    voxel_downsample,
)
from liogvm.manifold import STATE_DIM, FilterState, exp_so3
from liogvm.sim import (
    TrajectoryModel,
    constant_velocity_trajectory,
    default_world,
    synthesize,
    scan_points_world,
)

NOISE = NoiseParams(0.01, 0.1, 1e-4, 1e-3)


def yaw_cache(rate=1.0, t0=0.0, t1=0.1, hz=200):
    n = int(round((t1 - t0) * hz))
    imu = [ImuSample(t0 + i / hz, np.array([0, 0, rate]), np.array([0, 0, 9.81])) for i in range(n)]
    return propagate(FilterState(), np.eye(STATE_DIM), imu, t1, NOISE, t_start=t0).pose_cache


def test_deskew_stationary(rng):
    cache = yaw_cache(rate=0.0)
    xyz = rng.normal(size=(100, 3))
    t = rng.uniform(0.0, 0.1, 100)
    ext = Extrinsic(exp_so3([0.1, 0.2, 0.3]), np.array([0.1, 0.0, -0.2]))
    assert_allclose(deskew(xyz, t, cache, ext), xyz, atol=1e-14)


def test_deskew_point_at_scan_end(rng):
    cache = yaw_cache()
    xyz = rng.normal(size=(5, 3))
    ext = Extrinsic(exp_so3([0.1, 0.2, 0.3]), np.array([0.1, 0.0, -0.2]))
    assert_allclose(deskew(xyz, np.full(5, 0.1), cache, ext), xyz, atol=1e-14)


def test_deskew_constant_yaw_rate():
    cache = yaw_cache(rate=1.0)
    out = deskew(np.array([[1.0, 0.0, 0.0]]), np.array([0.05]), cache, Extrinsic())
    assert_allclose(out[0], exp_so3([0, 0, -0.05]) @ [1, 0, 0], atol=1e-12)


def test_deskew_out_of_cache():
    cache = yaw_cache()
    with pytest.raises(TimestampOutOfCache):
        deskew(np.zeros((1, 3)), np.array([0.2]), cache, Extrinsic())
    assert deskew(np.zeros((0, 3)), np.zeros(0), cache, Extrinsic()).shape == (0, 3)


def test_deskew_exact_on_piecewise_constant_motion():
    traj = constant_velocity_trajectory(duration=1.0, points_per_scan=500)
    data = synthesize(default_world(), traj)
    model = TrajectoryModel(traj)
    worst = 0.0
    for k in range(1, len(data.scans)):
        scan = data.scans[k]
        t0 = data.scans[k - 1].t_end
        R0, p0, v0 = model.state(t0)
        start = FilterState(rot=R0, pos=p0, vel=v0)
        res = propagate(start, np.eye(STATE_DIM), data.imu, scan.t_end, NOISE, t_start=t0)
        q = deskew(scan.xyz, scan.t, res.pose_cache, data.extrinsic)
        Rk, pk, _ = model.state(scan.t_end)
        world = data.extrinsic.apply(q) @ Rk.T + pk
        truth = scan_points_world(scan, model, data.extrinsic)
        worst = max(worst, np.abs(world - truth).max())
    assert worst < 1e-9


def test_fit_mean_example():
    pts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [10, 10, 10.0]])
    mean, _ = fit_raw(pts, neighbors=3)
    assert_allclose(mean[0], [1 / 3, 1 / 3, 0], atol=1e-15)


def test_fit_plane_is_flat(rng):
    pts = np.c_[rng.uniform(-1, 1, (500, 2)), np.zeros(500)]
    _, covs = fit_raw(pts, 10)
    lam, vec = np.linalg.eigh(covs)
    assert np.all(lam[:, 0] < 1e-6 * lam[:, 2])
    assert_allclose(np.abs(vec[:, :, 0] @ [0, 0, 1]), 1.0, atol=1e-9)


def test_fit_covariance_matches_textbook(rng):
    pts = rng.normal(size=(200, 3))
    mean, cov = fit_raw(pts, 10)
    _, nn = cKDTree(pts).query(pts, k=10)
    for i in range(0, 200, 17):
        nb = pts[nn[i]]
        assert_allclose(mean[i], nb.mean(axis=0), atol=1e-15)
        assert_allclose(cov[i], np.cov(nb.T), atol=1e-12)


def test_fit_requires_enough_points(rng):
    with pytest.raises(TooFewPoints):
        fit_distributions(rng.normal(size=(10, 3)), 10)


def test_fit_is_rotation_equivariant(rng):
    pts = rng.normal(size=(300, 3))
    R = random_rotation(rng)
    m1, c1 = fit_distributions(pts, 10)
    m2, c2 = fit_distributions(pts @ R.T, 10)
    assert_allclose(m2, m1 @ R.T, atol=1e-12)
    assert_allclose(c2, R @ c1 @ R.T, atol=1e-10)


def test_fit_outputs_are_regularized(rng):
    pts = np.c_[rng.uniform(-1, 1, (400, 2)), np.zeros(400)]
    _, covs = fit_distributions(pts, 10, kappa=1e-3)
    lam = np.linalg.eigvalsh(covs)
    assert np.all(lam[:, 0] >= 1e-3 * lam[:, 2] * (1 - 1e-9))
    dists = as_distributions(*fit_distributions(pts, 10))
    assert len(dists) == 400


def test_regularize_examples():
    assert_allclose(regularize_covariance(np.eye(3)), np.eye(3), atol=1e-15)
    assert_allclose(regularize_covariance(np.diag([1.0, 1.0, 0.0]), 1e-3), np.diag([1, 1, 1e-3]), atol=1e-15)
    assert_allclose(regularize_covariance(np.zeros((3, 3)), 1e-3, 1e-6), 1e-6 * np.eye(3))


@given(st.integers(0, 2**32 - 1), st.integers(1, 2))
def test_regularize_rank_deficient_is_positive_definite(seed, rank):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(3, rank))
    C = regularize_covariance(A @ A.T)
    assert np.linalg.det(C) > 0
    lam = np.linalg.eigvalsh(C)
    assert lam[0] >= 1e-3 * lam[-1] * (1 - 1e-9)


def test_range_filter_and_conversions():
    pts = [RawPoint(np.array([0.1, 0, 0]), 0.0), RawPoint(np.array([5.0, 0, 0]), 0.1),
           RawPoint(np.array([200.0, 0, 0]), 0.2), RawPoint(np.array([np.nan, 0, 0]), 0.3)]
    xyz, t = points_to_arrays(pts)
    xyz, t = range_filter(xyz, t, 0.5, 150.0)
    assert_array_equal(t, [0.1])
    assert points_to_arrays([])[0].shape == (0, 3)


def test_voxel_downsample_keeps_first_point_per_leaf():
    xyz = np.array([[0.1, 0.1, 0.1], [0.2, 0.2, 0.2], [1.5, 0, 0], [0.3, 0.1, 0.1]])
    t = np.arange(4.0)
    out, tt = voxel_downsample(xyz, t, 1.0)
    assert_array_equal(tt, [0.0, 2.0])
    same, _ = voxel_downsample(xyz, t, 0.0)
    assert same is xyz


def test_extrinsic_round_trip(rng):
    ext = Extrinsic(random_rotation(rng), rng.normal(size=3))
    pts = rng.normal(size=(20, 3))
    assert_allclose(ext.apply_inverse(ext.apply(pts)), pts, atol=1e-14)
