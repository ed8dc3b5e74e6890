import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal
from scipy.spatial.transform import Rotation

from conftest import random_rotation, random_state
from liogvm.manifold import (
    POS,
    ROT,
    STATE_DIM,
    FilterState,
    boxminus,
    boxplus,
    exp_so3,
    exp_so3_batch,
    left_jacobian,
    log_so3,
    orthonormalize,
    skew,
)

vec3 = st.lists(st.floats(-10, 10, allow_nan=False), min_size=3, max_size=3).map(np.array)


def test_skew_examples():
    assert_array_equal(skew([0, 0, 0]), np.zeros((3, 3)))
    assert_array_equal(skew([0, 0, 1]), [[0, -1, 0], [1, 0, 0], [0, 0, 0]])


@given(vec3, vec3)
def test_skew_is_cross_product(v, u):
    S = skew(v)
    assert_array_equal(S, -S.T)
    assert_allclose(S @ u, np.cross(v, u), atol=1e-14 * max(1.0, np.abs(v).max() * np.abs(u).max()))
    assert_allclose(S @ v, 0.0, atol=1e-12)


def test_exp_examples():
    assert_array_equal(exp_so3([0, 0, 0]), np.eye(3))
    assert_allclose(exp_so3([0, 0, np.pi / 2]) @ [1, 0, 0], [0, 1, 0], atol=1e-15)


@given(vec3)
def test_exp_matches_independent_rotvec(u):
    assert_allclose(exp_so3(u), Rotation.from_rotvec(u).as_matrix(), atol=1e-12)
    assert_allclose(exp_so3(u) @ exp_so3(-u), np.eye(3), atol=1e-12)


def test_exp_batch_matches_single(rng):
    u = rng.normal(size=(50, 3))
    u[0] = 0.0
    u[1] = 1e-10
    for i, R in enumerate(exp_so3_batch(u)):
        assert_allclose(R, exp_so3(u[i]), atol=1e-15)


def test_log_examples():
    assert_array_equal(log_so3(np.eye(3)), np.zeros(3))
    assert_allclose(log_so3(exp_so3([0.1, -0.2, 0.3])), [0.1, -0.2, 0.3], atol=1e-10)
    Rx = np.diag([1.0, -1.0, -1.0])
    assert_allclose(log_so3(Rx), [np.pi, 0, 0], atol=1e-12)


@pytest.mark.parametrize("eps", [0.0, 1e-9, 1e-6, 1e-5, 1e-3])
def test_log_near_pi(rng, eps):
    for _ in range(50):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        u = (np.pi - eps) * axis
        R = exp_so3(u)
        assert_allclose(exp_so3(log_so3(R)), R, atol=1e-9)
        if eps > 0:
            assert_allclose(log_so3(R), u, atol=1e-9 / max(eps, 1e-3))


@given(vec3)
def test_exp_log_round_trip(u):
    R = exp_so3(u)
    assert_allclose(exp_so3(log_so3(R)), R, atol=1e-9)
    assert np.linalg.norm(log_so3(R)) <= np.pi + 1e-12


def test_left_jacobian_identity_and_series():
    assert_array_equal(left_jacobian(np.zeros(3)), np.eye(3))
    u = np.array([np.pi / 2, 0.0, 0.0])
    K = skew(u)
    series = np.eye(3)
    term = np.eye(3)
    for n in range(1, 40):
        term = term @ K / (n + 1)
        series = series + term
    assert_allclose(left_jacobian(u), series, atol=1e-9)


def test_left_jacobian_finite_difference(rng):
    h = 1e-6
    for _ in range(200):
        u = rng.normal(size=3)
        u *= rng.uniform(0, 3.0) / np.linalg.norm(u)
        R0 = exp_so3(u)
        fd = np.empty((3, 3))
        for k in range(3):
            e = np.zeros(3)
            e[k] = h
            fd[:, k] = (log_so3(exp_so3(u + e) @ R0.T) - log_so3(exp_so3(u - e) @ R0.T)) / (2 * h)
        A = left_jacobian(u)
        assert np.linalg.norm(fd - A) / np.linalg.norm(A) < 1e-5


def test_left_jacobian_small_angle_continuity():
    u = np.array([3e-7, -2e-7, 1e-7])
    closed = np.eye(3) + 0.5 * skew(u)
    assert_allclose(left_jacobian(u), closed, atol=1e-13)


def test_boxplus_examples():
    x = FilterState()
    assert_array_equal(boxplus(x, np.zeros(STATE_DIM)).rot, x.rot)
    d = np.zeros(STATE_DIM)
    d[POS] = [1, 2, 3]
    assert_array_equal(boxplus(x, d).pos, [1, 2, 3])


def test_boxplus_composes_on_the_left(rng):
    x = random_state(rng)
    d = np.zeros(STATE_DIM)
    d[ROT] = [0.1, 0.2, -0.3]
    assert_allclose(boxplus(x, d).rot, exp_so3(d[ROT]) @ x.rot, atol=1e-15)


def test_boxminus_examples(rng):
    x = random_state(rng)
    assert_allclose(boxminus(x, x), 0.0, atol=1e-15)
    y = x.copy()
    y.rot = exp_so3([0.2, 0, 0]) @ x.rot
    assert_allclose(boxminus(y, x)[ROT], [0.2, 0, 0], atol=1e-12)


def test_chart_round_trips(rng):
    for _ in range(1000):
        x = random_state(rng)
        y = random_state(rng)
        d = rng.normal(size=STATE_DIM)
        d[ROT] *= rng.uniform(0, 3.0) / np.linalg.norm(d[ROT])
        assert_allclose(boxminus(boxplus(x, d), x), d, atol=1e-10)
        z = boxplus(y, boxminus(x, y))
        assert_allclose(z.rot, x.rot, atol=1e-10)
        assert_allclose(z.vector(), x.vector(), atol=1e-10)


def test_orthogonality_preserved(rng):
    x = random_state(rng)
    for _ in range(500):
        x = boxplus(x, 0.3 * rng.normal(size=STATE_DIM))
        assert np.linalg.norm(x.rot.T @ x.rot - np.eye(3)) < 1e-9
        assert abs(np.linalg.det(x.rot) - 1.0) < 1e-9


def test_orthonormalize_projects_to_nearest_rotation(rng):
    R = random_rotation(rng)
    noisy = R + 1e-6 * rng.normal(size=(3, 3))
    Q = orthonormalize(noisy)
    assert_allclose(Q.T @ Q, np.eye(3), atol=1e-14)
    assert np.linalg.det(Q) > 0
    assert np.linalg.norm(Q - R) < 1e-5


def test_state_helpers(rng):
    x = random_state(rng)
    y = x.copy()
    y.pos[0] += 1.0
    assert x.pos[0] != y.pos[0]
    assert x.vector().shape == (15,)
    T = x.transform()
    assert_array_equal(T[:3, :3], x.rot)
    assert_array_equal(T[:3, 3], x.pos)
