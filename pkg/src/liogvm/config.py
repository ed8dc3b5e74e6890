"""Pipeline configuration: flat key/value YAML with units in the key names."""
from __future__ import annotations

import os
from importlib import resources
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import yaml

from .errors import ConfigError
from .gvm import FACE7, FULL27
from .ieskf import IeskfConfig
from .imu import NoiseParams
from .lidar import Extrinsic
from .manifold import exp_so3

ENV_PREFIX = "LIOGVM_"
DEFAULTS_FILE = "defaults.yaml"


@dataclass
class PipelineConfig:
    voxel_size_m: float = 1.0
    neighbor_mode: str = FACE7
    similarity_threshold: float = 0.6
    keep_all_survivors: bool = False
    fit_neighbors: int = 10
    cov_floor_rel: float = 1e-3
    cov_floor_abs_m2: float = 1e-6
    meas_variance: float = 1e-3
    max_iterations: int = 5
    stop_epsilon: float = 1e-3
    min_correspondences: int = 10
    apply_reset_jacobian: bool = True
    gyro_noise_rad_s_rthz: float = 0.01
    acc_noise_m_s2_rthz: float = 0.1
    gyro_bias_walk_rad_s2_rthz: float = 1e-4
    acc_bias_walk_m_s3_rthz: float = 1e-3
    init_rot_std_rad: float = 1e-3
    init_pos_std_m: float = 1e-3
    init_vel_std_m_s: float = 0.05
    init_gyro_bias_std_rad_s: float = 0.01
    init_acc_bias_std_m_s2: float = 0.1
    init_gravity_std_m_s2: float = 0.05
    gravity_init_window_s: float = 0.5
    gravity_m_s2: float = 9.81
    extrinsic_rotvec_rad: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    extrinsic_trans_m: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    min_range_m: float = 0.5
    max_range_m: float = 150.0
    downsample_leaf_m: float = 0.5
    max_imu_gap_s: float = 0.1
    export_map: bool = True
    data_dir: str = ""
    out_dir: str = ""

    def __post_init__(self):
        self.validate()

    def validate(self):
        positive = [
            "voxel_size_m", "cov_floor_rel", "cov_floor_abs_m2", "meas_variance",
            "stop_epsilon", "gyro_noise_rad_s_rthz", "acc_noise_m_s2_rthz",
            "gyro_bias_walk_rad_s2_rthz", "acc_bias_walk_m_s3_rthz", "init_rot_std_rad",
            "init_pos_std_m", "init_vel_std_m_s", "init_gyro_bias_std_rad_s",
            "init_acc_bias_std_m_s2", "init_gravity_std_m_s2", "gravity_init_window_s",
            "gravity_m_s2", "max_range_m", "max_imu_gap_s",
        ]
        for key in positive:
            val = getattr(self, key)
            if not isinstance(val, (int, float)) or isinstance(val, bool) or not val > 0:
                raise ConfigError(key, f"must be a positive number, got {val!r}")
        if self.neighbor_mode not in (FACE7, FULL27):
            raise ConfigError("neighbor_mode", f"must be {FACE7!r} or {FULL27!r}")
        if not 0.0 <= self.similarity_threshold <= 1.0:
            raise ConfigError("similarity_threshold", "must lie in [0, 1]")
        if not self.cov_floor_rel < 1.0:
            raise ConfigError("cov_floor_rel", "must be below 1")
        for key in ("fit_neighbors", "max_iterations", "min_correspondences"):
            val = getattr(self, key)
            if not isinstance(val, int) or isinstance(val, bool):
                raise ConfigError(key, f"must be an integer, got {val!r}")
        if self.fit_neighbors < 3:
            raise ConfigError("fit_neighbors", "must be at least 3")
        if self.max_iterations < 1:
            raise ConfigError("max_iterations", "must be at least 1")
        if self.min_correspondences < 0:
            raise ConfigError("min_correspondences", "must be non-negative")
        if not 0.0 <= self.min_range_m < self.max_range_m:
            raise ConfigError("min_range_m", "must be non-negative and below max_range_m")
        if self.downsample_leaf_m < 0:
            raise ConfigError("downsample_leaf_m", "must be non-negative")
        for key in ("extrinsic_rotvec_rad", "extrinsic_trans_m"):
            val = getattr(self, key)
            if len(val) != 3 or not np.all(np.isfinite(np.asarray(val, dtype=float))):
                raise ConfigError(key, "must be a list of three finite numbers")
        for key in ("keep_all_survivors", "apply_reset_jacobian", "export_map"):
            if not isinstance(getattr(self, key), bool):
                raise ConfigError(key, "must be true or false")

    # -- derived objects --------------------------------------------------

    def extrinsic(self) -> Extrinsic:
        return Extrinsic(exp_so3(np.asarray(self.extrinsic_rotvec_rad, float)),
                         np.asarray(self.extrinsic_trans_m, float))

    def noise(self) -> NoiseParams:
        return NoiseParams(
            self.gyro_noise_rad_s_rthz,
            self.acc_noise_m_s2_rthz,
            self.gyro_bias_walk_rad_s2_rthz,
            self.acc_bias_walk_m_s3_rthz,
        )

    def ieskf(self) -> IeskfConfig:
        return IeskfConfig(
            max_iterations=self.max_iterations,
            epsilon=self.stop_epsilon,
            meas_variance=self.meas_variance,
            apply_reset_jacobian=self.apply_reset_jacobian,
            min_correspondences=self.min_correspondences,
            s_t=self.similarity_threshold,
            neighbor_mode=self.neighbor_mode,
            keep_all=self.keep_all_survivors,
        )

    def initial_cov(self) -> np.ndarray:
        std = np.repeat(
            [self.init_rot_std_rad, self.init_pos_std_m, self.init_vel_std_m_s,
             self.init_gyro_bias_std_rad_s, self.init_acc_bias_std_m_s2,
             self.init_gravity_std_m_s2],
            3,
        )
        return np.diag(std**2)

    def to_dict(self) -> dict:
        return asdict(self)


def _coerce(key, default, value):
    if isinstance(default, bool):
        if isinstance(value, str):
            low = value.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ConfigError(key, f"not a boolean: {value!r}")
        return value
    if isinstance(default, float) and isinstance(value, (int, str)) and not isinstance(value, bool):
        try:
            return float(value)
        except ValueError as exc:
            raise ConfigError(key, f"not a number: {value!r}") from exc
    if isinstance(default, int) and isinstance(value, str):
        try:
            return int(value)
        except ValueError as exc:
            raise ConfigError(key, f"not an integer: {value!r}") from exc
    if isinstance(default, list) and isinstance(value, str):
        parsed = yaml.safe_load(value)
        if not isinstance(parsed, list):
            raise ConfigError(key, f"not a list: {value!r}")
        return parsed
    return value


def make_config(values: dict | None = None, env: dict | None = None) -> PipelineConfig:
    """Build a validated config from ``values`` plus ``LIOGVM_*`` overrides.

    Unknown keys are rejected; the config object only exists once every
    value has passed validation.
    """
    values = dict(values or {})
    env = os.environ if env is None else env
    defaults = PipelineConfig()
    known = {f.name for f in fields(PipelineConfig)}
    for key in values:
        if key not in known:
            raise ConfigError(key, "unknown key")
    for name, raw in env.items():
        if name.startswith(ENV_PREFIX):
            key = name[len(ENV_PREFIX):].lower()
            if key not in known:
                raise ConfigError(key, f"unknown key (from environment variable {name})")
            values[key] = raw
    merged = {}
    for key, val in values.items():
        merged[key] = _coerce(key, getattr(defaults, key), val)
    return PipelineConfig(**merged)


def load_config(path, env: dict | None = None) -> PipelineConfig:
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ConfigError("<root>", "config file must be a flat mapping")
    return make_config(data, env)


def dump_config(cfg: PipelineConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False, default_flow_style=None)


def defaults_text() -> str:
    """Contents of the shipped defaults file."""
    return resources.files(__package__).joinpath(DEFAULTS_FILE).read_text()
