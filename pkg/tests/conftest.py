import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from liogvm.manifold import FilterState, exp_so3

settings.register_profile(
    "default", max_examples=100, deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")


def random_rotation(rng, max_angle=np.pi):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return exp_so3(axis * rng.uniform(0.0, max_angle))


def random_state(rng) -> FilterState:
    return FilterState(
        rot=random_rotation(rng),
        pos=rng.normal(size=3),
        vel=rng.normal(size=3),
        bias_gyro=0.01 * rng.normal(size=3),
        bias_acc=0.1 * rng.normal(size=3),
        gravity=np.array([0.0, 0.0, -9.81]) + 0.1 * rng.normal(size=3),
    )


def random_spd(rng, scale=1.0, cond=10.0):
    Q = random_rotation(rng)
    lam = scale * np.exp(rng.uniform(0.0, np.log(cond), 3))
    return Q @ np.diag(lam) @ Q.T


def random_cov(rng, n, lo=1e-6, hi=1.0):
    """SPD matrix with eigenvalues log-uniform in [lo, hi], like a filter covariance."""
    Q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    return (Q * np.exp(rng.uniform(np.log(lo), np.log(hi), n))) @ Q.T


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def fd_jacobian(fun, n, h=1e-6):
    """Central finite-difference Jacobian of ``fun`` at 0 in R^n."""
    cols = []
    for k in range(n):
        e = np.zeros(n)
        e[k] = h
        cols.append((np.asarray(fun(e)) - np.asarray(fun(-e))) / (2 * h))
    return np.stack(cols, axis=-1)


def rel_err(A, B):
    return np.linalg.norm(A - B) / max(np.linalg.norm(B), 1e-12)


def brute_force_voxelize(means, covs, r):
    """Hash-free grouping oracle: plain Python dict of running sums."""
    import math

    groups = {}
    order = []
    for m, c in zip(means, covs):
        key = tuple(math.floor(float(v) / r) for v in m)
        if key not in groups:
            groups[key] = [0, [0.0] * 3, [[0.0] * 3 for _ in range(3)]]
            order.append(key)
        g = groups[key]
        g[0] += 1
        for a in range(3):
            g[1][a] += float(m[a])
            for b in range(3):
                g[2][a][b] += float(c[a][b])
    out = {}
    for key in order:
        n, s, S = groups[key]
        out[key] = (n, np.array(s) / n, np.array(S) / n)
    return order, out


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
