"""15-state error-state Kalman filter over position, velocity, attitude and IMU biases.

Error-state layout (15,): ``dp, dv, dtheta, db_a, db_w``. The nominal state is
the true state plus the error, so injection subtracts the estimated error.
Noise vector layout (12,): ``n_a, n_w, n_ba, n_bw``.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

import config
from core.errors import EstimationError
from core.geometry import Pose, StereoRig, quat_to_rotation, rotation_to_quat, skew
from core.imu_integrator import (GravityModel, ImuBiases, ImuConfig, ImuData, ImuSample, KinematicState,
                                 interpolate_sample, median_integrate)

logger = logging.getLogger(__name__)

P_IDX = slice(0, 3)
V_IDX = slice(3, 6)
TH_IDX = slice(6, 9)
BA_IDX = slice(9, 12)
BW_IDX = slice(12, 15)

STATE_DIM = 15
NOISE_DIM = 12

# cycle times may overshoot the last IMU sample by rounding
_END_TOLERANCE = 1e-9


@dataclass(frozen=True, eq=False)
class NominalState:
    p: np.ndarray = field(default_factory=lambda: np.zeros(3))
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    b_a: np.ndarray = field(default_factory=lambda: np.zeros(3))
    b_w: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        for name in ('p', 'v', 'b_a', 'b_w'):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64).reshape(3))
        q = np.asarray(self.q, dtype=np.float64).reshape(4)
        object.__setattr__(self, 'q', q / np.linalg.norm(q))

    @classmethod
    def from_parts(cls, kinematics: KinematicState, biases: ImuBiases) -> 'NominalState':
        return cls(kinematics.p, kinematics.v, kinematics.q, biases.b_a, biases.b_w)

    @property
    def kinematics(self) -> KinematicState:
        return KinematicState(self.p, self.v, self.q)

    @property
    def biases(self) -> ImuBiases:
        return ImuBiases(self.b_a, self.b_w)

    @property
    def R(self) -> np.ndarray:
        return quat_to_rotation(self.q).as_matrix()

    @property
    def pose(self) -> Pose:
        """World-from-body pose."""
        return Pose(self.q, self.p)


@dataclass(frozen=True, eq=False)
class ErrorState:
    dp: np.ndarray
    dv: np.ndarray
    dtheta: np.ndarray
    db_a: np.ndarray
    db_w: np.ndarray

    @classmethod
    def from_vector(cls, dx) -> 'ErrorState':
        dx = np.asarray(dx, dtype=np.float64).reshape(STATE_DIM)
        return cls(dx[P_IDX].copy(), dx[V_IDX].copy(), dx[TH_IDX].copy(), dx[BA_IDX].copy(), dx[BW_IDX].copy())

    @classmethod
    def zero(cls) -> 'ErrorState':
        return cls.from_vector(np.zeros(STATE_DIM))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.dp, self.dv, self.dtheta, self.db_a, self.db_w])


@dataclass(frozen=True)
class NoiseConfig:
    acc_density: float = config.NOISE_ACC_DENSITY
    gyro_density: float = config.NOISE_GYRO_DENSITY
    acc_bias_walk: float = config.NOISE_ACC_BIAS_WALK
    gyro_bias_walk: float = config.NOISE_GYRO_BIAS_WALK
    position_std: float = config.NOISE_POSITION_STD
    rotation_std: float = float(np.radians(config.NOISE_ROTATION_STD_DEG))
    period: float = config.ESKF_PERIOD
    init_position_std: float = config.NOISE_INIT_POSITION_STD
    init_velocity_std: float = config.NOISE_INIT_VELOCITY_STD
    init_rotation_std: float = config.NOISE_INIT_ROTATION_STD
    init_acc_bias_std: float = config.NOISE_INIT_ACC_BIAS_STD
    init_gyro_bias_std: float = config.NOISE_INIT_GYRO_BIAS_STD

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if value <= 0:
                raise ValueError(f"Noise parameter '{name}' must be positive, got {value}")

    def process_noise(self, period: Optional[float] = None) -> np.ndarray:
        """12x12 Q for one filter period; white-noise densities are divided by the period."""
        T = self.period if period is None else period
        return np.diag(np.concatenate([
            np.full(3, self.acc_density ** 2 / T),
            np.full(3, self.gyro_density ** 2 / T),
            np.full(3, self.acc_bias_walk ** 2),
            np.full(3, self.gyro_bias_walk ** 2),
        ]))

    def observation_noise(self) -> np.ndarray:
        return np.diag(np.concatenate([
            np.full(3, self.position_std ** 2),
            np.full(3, self.rotation_std ** 2),
        ]))

    def initial_covariance(self) -> np.ndarray:
        return np.diag(np.concatenate([
            np.full(3, self.init_position_std ** 2),
            np.full(3, self.init_velocity_std ** 2),
            np.full(3, self.init_rotation_std ** 2),
            np.full(3, self.init_acc_bias_std ** 2),
            np.full(3, self.init_gyro_bias_std ** 2),
        ]))


@dataclass(frozen=True, eq=False)
class Observation:
    y: np.ndarray
    t: float
    G: np.ndarray = field(default_factory=lambda: observation_matrix())
    C: np.ndarray = field(default_factory=lambda: np.eye(6))


def observation_matrix() -> np.ndarray:
    """6x15 selection of (dp, dtheta)."""
    G = np.zeros((6, STATE_DIM))
    G[0:3, P_IDX] = np.eye(3)
    G[3:6, TH_IDX] = np.eye(3)
    return G


def continuous_jacobians(nominal: NominalState, sample: ImuSample) -> Tuple[np.ndarray, np.ndarray]:
    """Continuous-time error dynamics ``d(dx)/dt = F_t dx + B_t n``."""
    R = nominal.R
    F = np.zeros((STATE_DIM, STATE_DIM))
    F[P_IDX, V_IDX] = np.eye(3)
    F[V_IDX, TH_IDX] = -R @ skew(sample.a - nominal.b_a)
    F[V_IDX, BA_IDX] = -R
    F[TH_IDX, TH_IDX] = -skew(sample.w - nominal.b_w)
    F[TH_IDX, BW_IDX] = -np.eye(3)

    B = np.zeros((STATE_DIM, NOISE_DIM))
    B[V_IDX, 0:3] = R
    B[TH_IDX, 3:6] = np.eye(3)
    B[BA_IDX, 6:9] = np.eye(3)
    B[BW_IDX, 9:12] = np.eye(3)
    return F, B


def discretize(F_t: np.ndarray, R_prev: np.ndarray, T: float) -> Tuple[np.ndarray, np.ndarray]:
    """First-order discretization over one period ``T``; bias walks scale with sqrt(T)."""
    if T < 0:
        raise ValueError(f"Filter period must be non-negative, got {T}")
    F = np.eye(STATE_DIM) + F_t * T
    B = np.zeros((STATE_DIM, NOISE_DIM))
    B[V_IDX, 0:3] = R_prev * T
    B[TH_IDX, 3:6] = np.eye(3) * T
    B[BA_IDX, 6:9] = np.eye(3) * np.sqrt(T)
    B[BW_IDX, 9:12] = np.eye(3) * np.sqrt(T)
    return F, B


def _symmetrize(P: np.ndarray) -> np.ndarray:
    return 0.5 * (P + P.T)


def propagate(dx: np.ndarray, P: np.ndarray, F: np.ndarray, B: np.ndarray,
              Q: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Prior error state and covariance. ``dx`` may also be a (15, N) batch of columns."""
    dx_prior = F @ dx
    P_prior = _symmetrize(F @ P @ F.T + B @ Q @ B.T)
    if not (np.all(np.isfinite(P_prior)) and np.all(np.isfinite(dx_prior))):
        raise EstimationError("Non-finite covariance after propagation")
    return dx_prior, P_prior


def no_observation_step(dx: np.ndarray, P: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Without an observation the posterior is the prior."""
    return dx, P


def form_observation(prior: NominalState, vision: Pose, rig: Optional[StereoRig] = None,
                     t_prior: Optional[float] = None, t_vision: Optional[float] = None,
                     gate: float = config.ESKF_OBSERVATION_GATE) -> Observation:
    """Build the pose observation ``y = (p_prior - p_vis, log(R_vis^T R_prior))``.

    Args:
        prior: propagated nominal state.
        vision: world-from-body pose, or world-from-left-camera when ``rig`` is given.
        rig: used to move a camera pose into the body frame.
        t_prior, t_vision: timestamps checked against ``gate``.

    Raises:
        EstimationError: if the two timestamps differ by more than ``gate``.
    """
    if t_prior is not None and t_vision is not None and abs(t_prior - t_vision) > gate:
        raise EstimationError(f"Vision pose at t={t_vision} does not match prior at t={t_prior}")
    if rig is not None:
        vision = vision.compose(rig.T_body_leftcam.inverse())
    dp = prior.p - vision.translation
    dtheta = (vision.rot.inv() * quat_to_rotation(prior.q)).as_rotvec()
    t = t_vision if t_vision is not None else (t_prior if t_prior is not None else 0.0)
    return Observation(np.concatenate([dp, dtheta]), t)


def update(dx: np.ndarray, P: np.ndarray, y: np.ndarray, G: np.ndarray, C: np.ndarray,
           R: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Kalman gain, posterior covariance and posterior error state.

    ``dx`` and ``y`` may be (n,) vectors or column batches sharing one covariance.

    Raises:
        EstimationError: singular innovation covariance or non-finite result.
    """
    S = G @ P @ G.T + C @ R @ C.T
    if not np.all(np.isfinite(S)) or np.linalg.cond(S) > 1e15:
        raise EstimationError("Singular innovation covariance")
    try:
        K = np.linalg.solve(S, G @ P).T
    except np.linalg.LinAlgError as e:
        raise EstimationError(f"Singular innovation covariance ({e})")
    n = P.shape[0]
    P_post = _symmetrize((np.eye(n) - K @ G) @ P)
    dx_post = dx + K @ (y - G @ dx)
    if not (np.all(np.isfinite(P_post)) and np.all(np.isfinite(dx_post))):
        raise EstimationError("Non-finite state after update")
    return dx_post, P_post


def inject_and_reset(nominal: NominalState, dx,
                     max_angle: float = config.ESKF_MAX_INJECTION_ANGLE) -> NominalState:
    """Apply the estimated error to the nominal state; the caller then zeroes the error.

    Raises:
        EstimationError: if the attitude error is outside the linearization range.
    """
    if isinstance(dx, ErrorState):
        dx = dx.as_vector()
    dx = np.asarray(dx, dtype=np.float64).reshape(STATE_DIM)
    dtheta = dx[TH_IDX]
    if np.linalg.norm(dtheta) >= max_angle:
        raise EstimationError(f"Attitude correction of {np.linalg.norm(dtheta):.3f} rad exceeds {max_angle} rad")
    R_post = nominal.R @ (np.eye(3) - skew(dtheta))
    q = rotation_to_quat(Rotation.from_matrix(R_post))
    return NominalState(
        nominal.p - dx[P_IDX],
        nominal.v - dx[V_IDX],
        q,
        nominal.b_a - dx[BA_IDX],
        nominal.b_w - dx[BW_IDX],
    )


class InertialFilter:
    """Sequential owner of the (nominal, error, covariance) triple."""

    def __init__(self, nominal: NominalState, sample: ImuSample, gravity: GravityModel,
                 noise: NoiseConfig = NoiseConfig(), imu_cfg: ImuConfig = ImuConfig(),
                 P0: Optional[np.ndarray] = None):
        self.nominal = nominal
        self.dx = np.zeros(STATE_DIM)
        self.P = noise.initial_covariance() if P0 is None else np.array(P0, dtype=np.float64)
        self.last_sample = sample
        self.gravity = gravity
        self.noise = noise
        self.imu_cfg = imu_cfg
        self.updates = 0
        self.propagations = 0

    @property
    def t(self) -> float:
        return self.last_sample.t

    def propagate(self, sample: ImuSample):
        """Advance the nominal state and the covariance to ``sample.t``."""
        prev = self.last_sample
        F_t, _ = continuous_jacobians(self.nominal, prev)
        F, B = discretize(F_t, self.nominal.R, sample.t - prev.t)
        kin = median_integrate(self.nominal.kinematics, prev, sample, self.nominal.biases,
                               self.gravity, self.imu_cfg.max_gap)
        self.dx, self.P = propagate(self.dx, self.P, F, B, self.noise.process_noise(sample.t - prev.t))
        self.nominal = NominalState.from_parts(kin, self.nominal.biases)
        self.last_sample = sample
        self.propagations += 1

    def propagate_to(self, imu: ImuData, t: float):
        """Consume every sample up to ``t`` and finish with a sample interpolated at ``t``."""
        if t <= self.t:
            return
        i0 = int(np.searchsorted(imu.t, self.t, side='right'))
        i1 = int(np.searchsorted(imu.t, t, side='right'))
        for i in range(i0, i1):
            self.propagate(imu[i])
        if self.t < t:
            if i1 >= len(imu):
                if t - self.t <= _END_TOLERANCE:
                    return
                raise EstimationError(f"IMU data ends at t={imu.t[-1]:.4f}, cannot propagate to t={t:.4f}")
            self.propagate(interpolate_sample(self.last_sample, imu[i1], t))

    def skip_update(self):
        self.dx, self.P = no_observation_step(self.dx, self.P)

    def update_with_pose(self, vision: Pose, t: float, rig: Optional[StereoRig] = None,
                         R: Optional[np.ndarray] = None) -> Observation:
        """Fuse one vision pose, inject the correction and clear the error state."""
        obs = form_observation(self.nominal, vision, rig, self.t, t)
        R = self.noise.observation_noise() if R is None else R
        self.dx, self.P = update(self.dx, self.P, obs.y, obs.G, obs.C, R)
        self.nominal = inject_and_reset(self.nominal, self.dx)
        self.dx = np.zeros(STATE_DIM)
        self.updates += 1
        logger.debug(f"Update at t={t:.3f}: innovation |dp|={np.linalg.norm(obs.y[:3]):.4f} m, "
                     f"|dtheta|={np.degrees(np.linalg.norm(obs.y[3:])):.3f} deg")
        return obs
