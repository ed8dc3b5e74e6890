"""Iterated error-state Kalman update against the Gaussian voxel map."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .errors import NumericalFailure
from .gvm import FACE7, GaussianVoxelMap
from .imu import PropagationResult
from .lidar import Extrinsic
from .manifold import ROT, STATE_DIM, FilterState, boxminus, boxplus, left_jacobian, log_so3, skew
from .matching import (
    CorrespondenceSet,
    MeasurementNoise,
    jacobian_rows,
    match,
    project_distributions,
    residuals,
)

log = logging.getLogger(__name__)

_JITTER = 1e-12


@dataclass
class IeskfConfig:
    max_iterations: int = 5
    epsilon: float = 1e-3
    meas_variance: float = 1e-3
    apply_reset_jacobian: bool = True
    min_correspondences: int = 10
    s_t: float = 0.6
    neighbor_mode: str = FACE7
    keep_all: bool = False

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not self.meas_variance > 0:
            raise ValueError("meas_variance must be positive")


@dataclass
class UpdateResult:
    state: FilterState
    cov: np.ndarray
    iterations_used: int
    final_residual_norm: float
    correspondence_count: int
    degenerate: bool = False
    objective_increased: bool = False
    objective: list = field(default_factory=list)
    correspondences: CorrespondenceSet | None = None


def projection_J(x_n: FilterState, x_hat: FilterState) -> np.ndarray:
    """Inverse Jacobian of ``d -> (x_n [+] d) [-] x_hat`` at ``d = 0``."""
    J = np.eye(STATE_DIM)
    J[ROT, ROT] = left_jacobian(log_so3(x_n.rot @ x_hat.rot.T))
    return J


def _chol(M):
    M = 0.5 * (M + M.T)
    try:
        return cho_factor(M)
    except LinAlgError:
        pass
    scale = max(np.abs(np.diag(M)).max(), 1.0)
    try:
        return cho_factor(M + _JITTER * scale * np.eye(len(M)))
    except LinAlgError as exc:
        raise NumericalFailure("symmetric factorisation failed") from exc


def kalman_step(P_hat, J, H, h, b, v: float):
    """One information-form iterated Kalman step.

    ``H`` (3m x 18) and ``h`` (3m) are the stacked Jacobian and residual at
    the current iterate, ``b`` the current iterate minus the prior.  The
    innovation is ``-h`` because every residual is observed as zero.
    Returns ``(dx, KH, P_n)``.
    """
    P_n = J @ P_hat @ J.T
    P_n = 0.5 * (P_n + P_n.T)
    info = cho_solve(_chol(P_n), np.eye(STATE_DIM))
    HtH = H.T @ H / v
    Hth = H.T @ h / v
    S = _chol(HtH + info)
    KH = cho_solve(S, HtH)
    Kh = cho_solve(S, Hth)
    dx = -Kh + (KH - np.eye(STATE_DIM)) @ (J @ b)
    return dx, KH, P_n


def reset_covariance(P_n, KH, dx_final, apply_reset_jacobian: bool = True) -> np.ndarray:
    """Posterior covariance moved into the tangent space of the injected state."""
    P_kappa = (np.eye(STATE_DIM) - KH) @ P_n
    if apply_reset_jacobian:
        G = np.eye(STATE_DIM)
        G[ROT, ROT] = np.eye(3) + 0.5 * skew(np.asarray(dx_final)[ROT])
        P_kappa = G @ P_kappa @ G.T
    return 0.5 * (P_kappa + P_kappa.T)


def iterated_update(
    pred: PropagationResult,
    means_L,
    covs_L,
    gmap: GaussianVoxelMap,
    ext: Extrinsic,
    cfg: IeskfConfig,
) -> UpdateResult:
    """Fuse one scan's distributions (LiDAR frame at scan end) into the prior."""
    x_hat = pred.state
    P_hat = pred.cov
    means_L = np.asarray(means_L, dtype=float)
    covs_L = np.asarray(covs_L, dtype=float)
    noise = MeasurementNoise(cfg.meas_variance)
    v = cfg.meas_variance

    x_n = x_hat.copy()
    costs = []
    increased = False
    for n in range(cfg.max_iterations):
        mu, C = project_distributions(x_n, ext, means_L, covs_L)
        cs = match(mu, C, gmap, cfg.s_t, cfg.neighbor_mode, noise, cfg.keep_all)
        m = len(cs)
        if m < cfg.min_correspondences:
            log.warning("only %d correspondences (< %d); keeping the prior", m,
                        cfg.min_correspondences)
            return UpdateResult(x_hat.copy(), P_hat.copy(), n, 0.0, m, degenerate=True,
                                objective=costs, correspondences=cs)
        h = residuals(cs).reshape(-1)
        H = jacobian_rows(cs, x_n, ext, means_L[cs.src_index]).reshape(-1, STATE_DIM)
        b = boxminus(x_n, x_hat)
        J = projection_J(x_n, x_hat)
        cost = float(b @ np.linalg.solve(P_hat, b) + h @ h / v)
        if costs and cost > costs[-1] * (1.0 + 1e-9):
            increased = True
        costs.append(cost)
        dx, KH, P_n = kalman_step(P_hat, J, H, h, b, v)
        if not np.all(np.isfinite(dx)):
            raise NumericalFailure("non-finite state correction")
        x_n = boxplus(x_n, dx)
        if np.linalg.norm(dx) < cfg.epsilon or increased:
            break
    P = reset_covariance(P_n, KH, dx, cfg.apply_reset_jacobian)
    return UpdateResult(
        state=x_n,
        cov=P,
        iterations_used=n + 1,
        final_residual_norm=float(np.linalg.norm(h)),
        correspondence_count=m,
        objective_increased=increased,
        objective=costs,
        correspondences=cs,
    )
