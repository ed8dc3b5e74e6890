"""SO(3) helpers and the boxplus/boxminus operators on SO(3) x R^15.

Rotation errors compose on the left (global frame): ``R = Exp(dr) @ R_hat``.
The error-state vector is ordered as
``[dr(0:3), dp(3:6), dv(6:9), dbg(9:12), dba(12:15), dg(15:18)]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ROT = slice(0, 3)
POS = slice(3, 6)
VEL = slice(6, 9)
BG = slice(9, 12)
BA = slice(12, 15)
GRAV = slice(15, 18)

STATE_DIM = 18

_EXP_EPS = 1e-8
_JAC_EPS = 1e-6
_ORTHO_TOL = 1e-9


def skew(v):
    """Cross-product matrix: ``skew(v) @ u == np.cross(v, u)``."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def exp_so3(u):
    u = np.asarray(u, dtype=float)
    theta = np.linalg.norm(u)
    K = skew(u)
    if theta < _EXP_EPS:
        return np.eye(3) + K + 0.5 * K @ K
    return (
        np.eye(3)
        + (np.sin(theta) / theta) * K
        + ((1.0 - np.cos(theta)) / theta**2) * K @ K
    )


def exp_so3_batch(u):
    """Vectorised Rodrigues formula for an (N, 3) array of rotation vectors."""
    u = np.asarray(u, dtype=float)
    theta = np.linalg.norm(u, axis=1)
    small = theta < _EXP_EPS
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0, np.sin(safe) / safe)
    b = np.where(small, 0.5, (1.0 - np.cos(safe)) / safe**2)
    K = np.zeros((len(u), 3, 3))
    K[:, 0, 1] = -u[:, 2]
    K[:, 0, 2] = u[:, 1]
    K[:, 1, 0] = u[:, 2]
    K[:, 1, 2] = -u[:, 0]
    K[:, 2, 0] = -u[:, 1]
    K[:, 2, 1] = u[:, 0]
    return np.eye(3) + a[:, None, None] * K + b[:, None, None] * (K @ K)


def log_so3(R):
    """Rotation vector of ``R`` with norm in [0, pi]."""
    R = np.asarray(R, dtype=float)
    cos_theta = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    sin_theta = 0.5 * np.linalg.norm(w)
    theta = np.arctan2(sin_theta, cos_theta)
    if theta < 1e-7:
        # first-order: R ~ I + [u]x
        return 0.5 * w
    if np.pi - theta > 1e-4:
        return theta / (2.0 * sin_theta) * w
    # near pi the antisymmetric part vanishes; use sym(R) = cos I + (1 - cos) a a^T
    B = (0.5 * (R + R.T) - cos_theta * np.eye(3)) / (1.0 - cos_theta)
    i = int(np.argmax(np.diag(B)))
    axis = B[:, i] / np.sqrt(max(B[i, i], 1e-300))
    axis /= np.linalg.norm(axis)
    if np.dot(axis, w) < 0.0:
        axis = -axis
    return theta * axis


def left_jacobian(u):
    """Left Jacobian of SO(3): ``Exp(u + d) ~ Exp(A(u) d) Exp(u)``."""
    u = np.asarray(u, dtype=float)
    theta = np.linalg.norm(u)
    K = skew(u)
    if theta < _JAC_EPS:
        return np.eye(3) + 0.5 * K + K @ K / 6.0
    return (
        np.eye(3)
        + ((1.0 - np.cos(theta)) / theta**2) * K
        + ((1.0 - np.sin(theta) / theta) / theta**2) * K @ K
    )


def orthonormalize(R):
    """Closest rotation in Frobenius norm (polar projection via SVD)."""
    U, _, Vt = np.linalg.svd(R)
    Q = U @ Vt
    if np.linalg.det(Q) < 0:
        U[:, -1] = -U[:, -1]
        Q = U @ Vt
    return Q


def _maybe_reorthonormalize(R):
    if np.linalg.norm(R.T @ R - np.eye(3)) > _ORTHO_TOL:
        return orthonormalize(R)
    return R


def _zeros3():
    return np.zeros(3)


@dataclass
class FilterState:
    """Nominal state: attitude, position, velocity, gyro/accel biases, gravity."""

    rot: np.ndarray = field(default_factory=lambda: np.eye(3))
    pos: np.ndarray = field(default_factory=_zeros3)
    vel: np.ndarray = field(default_factory=_zeros3)
    bias_gyro: np.ndarray = field(default_factory=_zeros3)
    bias_acc: np.ndarray = field(default_factory=_zeros3)
    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -9.81]))

    def copy(self) -> "FilterState":
        return FilterState(
            self.rot.copy(),
            self.pos.copy(),
            self.vel.copy(),
            self.bias_gyro.copy(),
            self.bias_acc.copy(),
            self.gravity.copy(),
        )

    def vector(self) -> np.ndarray:
        """The R^15 part, in error-state block order."""
        return np.concatenate(
            [self.pos, self.vel, self.bias_gyro, self.bias_acc, self.gravity]
        )

    def transform(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rot
        T[:3, 3] = self.pos
        return T


def boxplus(x: FilterState, d) -> FilterState:
    d = np.asarray(d, dtype=float)
    rot = _maybe_reorthonormalize(exp_so3(d[ROT]) @ x.rot)
    return FilterState(
        rot,
        x.pos + d[POS],
        x.vel + d[VEL],
        x.bias_gyro + d[BG],
        x.bias_acc + d[BA],
        x.gravity + d[GRAV],
    )


def boxminus(x: FilterState, y: FilterState) -> np.ndarray:
    d = np.empty(STATE_DIM)
    d[ROT] = log_so3(x.rot @ y.rot.T)
    d[3:] = x.vector() - y.vector()
    return d
