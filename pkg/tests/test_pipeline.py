import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from liogvm.config import make_config
from liogvm.errors import ImuCoverageError, InputError
from liogvm.manifold import log_so3
from liogvm.pipeline import Odometry, ScanError, run_sequence
from liogvm.sim import default_trajectory, default_world, synthesize


@pytest.fixture(scope="module")
def short_run():
    data = synthesize(default_world(), default_trajectory(duration=4.0, noisy=True, points_per_scan=2000))
    ext = data.extrinsic
    cfg = make_config({"extrinsic_rotvec_rad": [float(v) for v in log_so3(ext.rot)],
                       "extrinsic_trans_m": [float(v) for v in ext.trans],
                       "downsample_leaf_m": 0.0}, env={})
    return cfg, data


def _scans(data):
    return [(s.t_end, s.xyz, s.t) for s in data.scans]


def test_first_scan_defines_the_frame(short_run):
    cfg, data = short_run
    odo = run_sequence(cfg, data.imu, _scans(data)[:1])
    T = odo.poses()[0]
    ext = cfg.extrinsic()
    assert_allclose(T[:3, :3] @ ext.rot, np.eye(3), atol=1e-14)
    assert_allclose(T[:3, :3] @ ext.trans + T[:3, 3], 0.0, atol=1e-14)
    assert odo.metrics[0].distributions > 0
    assert len(odo.map) > 0


def test_short_run_deterministic_and_tracks(short_run):
    cfg, data = short_run
    a = run_sequence(cfg, data.imu, _scans(data))
    b = run_sequence(cfg, data.imu, _scans(data))
    assert_array_equal(a.poses(), b.poses())
    est, gt = a.poses(), data.gt.scan_poses()
    aligned = est[0] @ np.linalg.inv(gt[0]) @ gt
    assert np.linalg.norm(est[:, :3, 3] - aligned[:, :3, 3], axis=1).max() < 0.05
    assert all(m.correspondences >= cfg.min_correspondences for m in a.metrics[1:])


def test_covariance_stays_symmetric_psd(short_run):
    cfg, data = short_run
    odo = Odometry(cfg)
    times = np.array([s.t for s in data.imu])
    for k, (t_end, xyz, t_pts) in enumerate(_scans(data)[:20]):
        hi = int(np.searchsorted(times, t_end, side="right"))
        lo = 0 if odo.t is None else max(int(np.searchsorted(times, odo.t, side="right")) - 1, 0)
        odo.process(k, t_end, xyz, t_pts, data.imu[lo:hi])
        P = odo.cov
        assert_allclose(P, P.T, atol=1e-15)
        assert np.linalg.eigvalsh(P).min() > 0


def test_missing_imu_names_the_scan(short_run):
    cfg, data = short_run
    imu = [s for s in data.imu if not 1.0 < s.t < 1.3]
    with pytest.raises(ScanError) as exc:
        run_sequence(cfg, imu, _scans(data))
    assert isinstance(exc.value.cause, InputError)
    assert exc.value.index == 10
    assert "scan 10" in str(exc.value)


def test_no_imu_before_first_scan(short_run):
    cfg, data = short_run
    with pytest.raises(ScanError) as exc:
        run_sequence(cfg, [], _scans(data)[:1])
    assert isinstance(exc.value.cause, ImuCoverageError)
