"""IMU samples, static initialization and median-integral state propagation."""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.spatial.transform import Rotation

import config
from core.errors import EstimationError, InitializationError, InputFormatError, MotionDetectedError
from core.events import header_line_index
from core.geometry import quat_multiply, quat_to_rotation, rotation_to_quat

logger = logging.getLogger(__name__)

IMU_COLUMNS = ['t', 'ax', 'ay', 'az', 'wx', 'wy', 'wz']


@dataclass(frozen=True, eq=False)
class ImuSample:
    t: float
    a: np.ndarray  # specific force, body frame, m/s^2
    w: np.ndarray  # angular velocity, body frame, rad/s

    def __post_init__(self):
        object.__setattr__(self, 'a', np.asarray(self.a, dtype=np.float64).reshape(3))
        object.__setattr__(self, 'w', np.asarray(self.w, dtype=np.float64).reshape(3))


@dataclass(frozen=True, eq=False)
class ImuData:
    """A whole IMU recording, stored column-wise."""

    t: np.ndarray
    a: np.ndarray
    w: np.ndarray

    def __len__(self) -> int:
        return len(self.t)

    def __getitem__(self, index: int) -> ImuSample:
        return ImuSample(float(self.t[index]), self.a[index], self.w[index])

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    @classmethod
    def from_samples(cls, samples: Sequence[ImuSample]) -> 'ImuData':
        return cls(np.array([s.t for s in samples], dtype=np.float64),
                   np.array([s.a for s in samples], dtype=np.float64).reshape(-1, 3),
                   np.array([s.w for s in samples], dtype=np.float64).reshape(-1, 3))

    def window(self, t0: float, t1: float) -> 'ImuData':
        i0 = int(np.searchsorted(self.t, t0, side='left'))
        i1 = int(np.searchsorted(self.t, t1, side='right'))
        return ImuData(self.t[i0:i1], self.a[i0:i1], self.w[i0:i1])


@dataclass(frozen=True, eq=False)
class KinematicState:
    p: np.ndarray = field(default_factory=lambda: np.zeros(3))
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))  # world-from-body

    def __post_init__(self):
        q = np.asarray(self.q, dtype=np.float64).reshape(4)
        object.__setattr__(self, 'p', np.asarray(self.p, dtype=np.float64).reshape(3))
        object.__setattr__(self, 'v', np.asarray(self.v, dtype=np.float64).reshape(3))
        object.__setattr__(self, 'q', q / np.linalg.norm(q))

    @property
    def R(self) -> np.ndarray:
        return quat_to_rotation(self.q).as_matrix()


@dataclass(frozen=True, eq=False)
class ImuBiases:
    b_a: np.ndarray = field(default_factory=lambda: np.zeros(3))
    b_w: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, 'b_a', np.asarray(self.b_a, dtype=np.float64).reshape(3))
        object.__setattr__(self, 'b_w', np.asarray(self.b_w, dtype=np.float64).reshape(3))
        if not (np.all(np.isfinite(self.b_a)) and np.all(np.isfinite(self.b_w))):
            raise ValueError("IMU biases must be finite")


@dataclass(frozen=True, eq=False)
class GravityModel:
    """Gravity acceleration in the world frame (points down, e.g. (0, 0, -9.81))."""

    g: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -config.GRAVITY_MAGNITUDE]))

    def __post_init__(self):
        g = np.asarray(self.g, dtype=np.float64).reshape(3)
        if not 9.0 <= np.linalg.norm(g) <= 10.5:
            raise ValueError(f"Implausible gravity magnitude {np.linalg.norm(g):.3f}")
        object.__setattr__(self, 'g', g)


@dataclass(frozen=True)
class ImuConfig:
    init_duration: float = config.IMU_INIT_DURATION
    init_min_samples: int = config.IMU_INIT_MIN_SAMPLES
    init_max_acc_std: float = config.IMU_INIT_MAX_ACC_STD
    init_max_gyro_std: float = config.IMU_INIT_MAX_GYRO_STD
    max_gap: float = config.IMU_MAX_GAP
    max_acc_bias: float = config.IMU_MAX_ACC_BIAS
    max_gyro_bias: float = config.IMU_MAX_GYRO_BIAS
    gravity_magnitude: float = config.GRAVITY_MAGNITUDE

    def __post_init__(self):
        if self.init_duration <= 0 or self.max_gap <= 0:
            raise ValueError("IMU durations must be positive")
        if self.init_min_samples < 2:
            raise ValueError("Static initialization needs at least two samples")


def static_initialize(samples: Union[ImuData, Sequence[ImuSample]],
                      duration: float = config.IMU_INIT_DURATION,
                      cfg: ImuConfig = ImuConfig()) -> Tuple[np.ndarray, ImuBiases, GravityModel]:
    """Estimate the initial attitude, IMU biases and gravity from a motionless window.

    Args:
        samples: IMU samples starting at the beginning of the recording.
        duration: length of the static window in seconds.
        cfg: sample-count and motion thresholds.

    Returns:
        (q, biases, gravity) where q is the world-from-body quaternion with zero yaw.

    Raises:
        InitializationError: too few samples in the window or implausible biases.
        MotionDetectedError: sample spread above the configured thresholds.
    """
    data = samples if isinstance(samples, ImuData) else ImuData.from_samples(list(samples))
    if len(data) == 0:
        raise InitializationError("No IMU samples for static initialization")
    data = data.window(data.t[0], data.t[0] + duration)
    if len(data) < cfg.init_min_samples:
        raise InitializationError(
            f"Static initialization needs {cfg.init_min_samples} samples, got {len(data)} in {duration:.2f}s")

    acc_std = data.a.std(axis=0).max()
    gyro_std = data.w.std(axis=0).max()
    if acc_std > cfg.init_max_acc_std or gyro_std > cfg.init_max_gyro_std:
        raise MotionDetectedError(
            f"IMU not static: accelerometer std {acc_std:.3f} m/s^2, gyroscope std {gyro_std:.4f} rad/s")

    mean_a = data.a.mean(axis=0)
    mean_w = data.w.mean(axis=0)
    roll = np.arctan2(mean_a[1], mean_a[2])
    pitch = np.arctan2(-mean_a[0], np.hypot(mean_a[1], mean_a[2]))
    rot = Rotation.from_euler('ZYX', [0.0, pitch, roll])

    gravity = GravityModel(np.array([0.0, 0.0, -cfg.gravity_magnitude]))
    b_a = mean_a + rot.inv().apply(gravity.g)
    biases = ImuBiases(b_a, mean_w)
    if np.linalg.norm(b_a) > cfg.max_acc_bias or np.linalg.norm(mean_w) > cfg.max_gyro_bias:
        raise InitializationError(
            f"Implausible IMU biases: |b_a|={np.linalg.norm(b_a):.3f}, |b_w|={np.linalg.norm(mean_w):.4f}")

    logger.info(f"Static initialization from {len(data)} samples: roll={np.degrees(roll):.2f} deg, "
                f"pitch={np.degrees(pitch):.2f} deg, b_a={np.round(b_a, 4)}, b_w={np.round(mean_w, 5)}")
    return rotation_to_quat(rot), biases, gravity


def _delta_quaternion(phi: np.ndarray) -> np.ndarray:
    angle = np.linalg.norm(phi)
    if angle < 1e-8:
        # sin(a/2)/a ~ 1/2 - a^2/48
        return np.concatenate([[np.cos(0.5 * angle)], phi * (0.5 - angle * angle / 48.0)])
    return np.concatenate([[np.cos(0.5 * angle)], phi * (np.sin(0.5 * angle) / angle)])


def median_integrate(state: KinematicState, s_prev: ImuSample, s_cur: ImuSample,
                     biases: ImuBiases, gravity: GravityModel,
                     max_gap: float = config.IMU_MAX_GAP) -> KinematicState:
    """Propagate position, velocity and attitude over one IMU interval with the midpoint rule.

    Raises:
        EstimationError: if timestamps do not increase or the gap exceeds ``max_gap``.
    """
    dt = s_cur.t - s_prev.t
    if dt <= 0:
        raise EstimationError(f"IMU timestamps not increasing: {s_prev.t} -> {s_cur.t}")
    if dt > max_gap:
        raise EstimationError(f"IMU gap of {dt:.4f}s exceeds {max_gap:.4f}s at t={s_prev.t}")

    w_mid = 0.5 * (s_prev.w + s_cur.w) - biases.b_w
    q = quat_multiply(state.q, _delta_quaternion(w_mid * dt))
    q = q / np.linalg.norm(q)

    R_prev = state.R
    R_cur = quat_to_rotation(q).as_matrix()
    a_mid = 0.5 * (R_cur @ (s_cur.a - biases.b_a) + R_prev @ (s_prev.a - biases.b_a)) + gravity.g
    v = state.v + a_mid * dt
    p = state.p + 0.5 * (v + state.v) * dt
    return KinematicState(p, v, q)


def integrate(state: KinematicState, samples: Union[ImuData, Sequence[ImuSample]],
              biases: ImuBiases, gravity: GravityModel,
              max_gap: float = config.IMU_MAX_GAP) -> KinematicState:
    """Chain :func:`median_integrate` over consecutive samples."""
    samples = list(samples)
    for s_prev, s_cur in zip(samples[:-1], samples[1:]):
        state = median_integrate(state, s_prev, s_cur, biases, gravity, max_gap)
    return state


def interpolate_sample(s0: ImuSample, s1: ImuSample, t: float) -> ImuSample:
    """Linearly interpolated sample at ``s0.t <= t <= s1.t``."""
    if s1.t == s0.t:
        return ImuSample(t, s1.a, s1.w)
    s = (t - s0.t) / (s1.t - s0.t)
    return ImuSample(t, (1.0 - s) * s0.a + s * s1.a, (1.0 - s) * s0.w + s * s1.w)


def read_imu(path) -> ImuData:
    """Read an IMU CSV file ``t,ax,ay,az,wx,wy,wz`` (header optional)."""
    path = Path(path)
    if not path.exists():
        raise InputFormatError("IMU file not found", path=str(path))
    header = header_line_index(path)
    try:
        df = pd.read_csv(path, header=None, names=IMU_COLUMNS, dtype=str,
                         skiprows=None if header is None else [header], skip_blank_lines=False, comment='#')
    except pd.errors.ParserError as e:
        raise InputFormatError(f"malformed IMU file ({e})", path=str(path))
    except pd.errors.EmptyDataError:
        return ImuData(np.zeros(0), np.zeros((0, 3)), np.zeros((0, 3)))
    df = df.dropna(how='all')
    numeric = df.apply(pd.to_numeric, errors='coerce')
    offset = 1 if header is None else 2
    bad = (numeric.isna().any(axis=1) | ~np.isfinite(numeric.fillna(0.0)).all(axis=1)).to_numpy()
    if bad.any():
        i = int(np.argmax(bad))
        raise InputFormatError(f"malformed IMU record {df.iloc[i].tolist()}", line=int(df.index[i]) + offset,
                               path=str(path))
    values = numeric.to_numpy(dtype=np.float64)
    t = values[:, 0]
    backwards = np.diff(t) <= 0
    if backwards.any():
        i = int(np.argmax(backwards)) + 1
        raise InputFormatError(f"IMU timestamp {t[i]} not after {t[i - 1]}", line=int(df.index[i]) + offset,
                               path=str(path))
    logger.info(f"Loaded {len(t)} IMU samples from {path}")
    return ImuData(t, values[:, 1:4].copy(), values[:, 4:7].copy())


def write_imu(path, data: ImuData):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df = pd.DataFrame(np.column_stack([data.t, data.a, data.w]), columns=IMU_COLUMNS)
    df.to_csv(path, index=False, float_format='%.9f')
    logger.info(f"Wrote {len(data)} IMU samples to {path}")
