"""Synthetic stereo event camera + IMU rig.

A scene is a set of 3D line segments. The rig follows a smooth splined
trajectory; IMU samples are the exact kinematics plus biases and noise, and
events fire where a projected segment enters a pixel.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import cv2
import numpy as np
from scipy.interpolate import make_interp_spline
from scipy.spatial.transform import Rotation

import config
from core.errors import SimulationError
from core.events import EventStream, write_events
from core.geometry import PinholeCamera, Pose, StereoRig, rotation_to_quat, so3_left_jacobian
from core.imu_integrator import GravityModel, ImuBiases, ImuData, write_imu
from core.trajectory_eval import Trajectory, save_trajectory

logger = logging.getLogger(__name__)

# fixed-point bits for cv2.line sub-pixel endpoints
_LINE_SHIFT = 4


@dataclass(frozen=True)
class SimConfig:
    imu_rate: float = config.SIM_IMU_RATE
    event_rate: float = config.SIM_EVENT_RATE
    gt_rate: float = config.SIM_GT_RATE
    edge_threshold: float = config.SIM_EDGE_THRESHOLD
    refractory: float = config.SIM_REFRACTORY
    near_plane: float = config.SIM_NEAR_PLANE
    seed: int = config.SIM_SEED
    noise: bool = config.SIM_NOISE
    acc_bias: Tuple[float, float, float] = config.SIM_ACC_BIAS
    gyro_bias: Tuple[float, float, float] = config.SIM_GYRO_BIAS
    acc_density: float = config.NOISE_ACC_DENSITY
    gyro_density: float = config.NOISE_GYRO_DENSITY
    acc_bias_walk: float = config.NOISE_ACC_BIAS_WALK
    gyro_bias_walk: float = config.NOISE_GYRO_BIAS_WALK
    gravity: Tuple[float, float, float] = (0.0, 0.0, -config.GRAVITY_MAGNITUDE)
    duration: float = config.SIM_DURATION
    static_prefix: float = config.SIM_STATIC_PREFIX

    def __post_init__(self):
        for name in ('imu_rate', 'event_rate', 'gt_rate', 'edge_threshold', 'near_plane'):
            if getattr(self, name) <= 0:
                raise ValueError(f"Simulator setting '{name}' must be positive, got {getattr(self, name)}")
        if self.refractory < 0:
            raise ValueError(f"Refractory period must be non-negative, got {self.refractory}")

    @property
    def biases(self) -> ImuBiases:
        return ImuBiases(np.array(self.acc_bias), np.array(self.gyro_bias))


@dataclass(frozen=True, eq=False)
class WireScene:
    """World-frame line segments (N, 2, 3) with a contrast sign per segment."""

    segments: np.ndarray
    contrast: np.ndarray = None

    def __post_init__(self):
        segments = np.asarray(self.segments, dtype=np.float64).reshape(-1, 2, 3)
        contrast = np.ones(len(segments), np.int8) if self.contrast is None else \
            np.where(np.asarray(self.contrast) < 0, -1, 1).astype(np.int8)
        if len(contrast) != len(segments):
            raise SimulationError(f"{len(segments)} segments but {len(contrast)} contrast signs")
        if not np.all(np.isfinite(segments)):
            raise SimulationError("Scene segments must be finite")
        lengths = np.linalg.norm(segments[:, 1] - segments[:, 0], axis=1)
        if np.any(lengths <= 0):
            raise SimulationError(f"Segment {int(np.argmin(lengths))} has zero length")
        object.__setattr__(self, 'segments', segments)
        object.__setattr__(self, 'contrast', contrast)

    def __len__(self) -> int:
        return len(self.segments)

    @classmethod
    def empty(cls) -> 'WireScene':
        return cls(np.zeros((0, 2, 3)))


def box_segments(center, size) -> np.ndarray:
    """The 12 edges of an axis-aligned box."""
    c = np.asarray(center, dtype=np.float64)
    h = 0.5 * np.asarray(size, dtype=np.float64)
    corners = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)]) * h + c
    edges = [(i, j) for i in range(8) for j in range(i + 1, 8) if bin(i ^ j).count('1') == 1]
    return np.array([[corners[i], corners[j]] for i, j in edges])


def grid_segments(origin, u, v, nu: int, nv: int) -> np.ndarray:
    """Lines of a planar grid spanned by ``u`` and ``v`` from ``origin``."""
    o, u, v = (np.asarray(a, dtype=np.float64) for a in (origin, u, v))
    lines = [[o + (i / nu) * u, o + (i / nu) * u + v] for i in range(nu + 1)]
    lines += [[o + (j / nv) * v, o + (j / nv) * v + u] for j in range(nv + 1)]
    return np.array(lines)


@dataclass(frozen=True, eq=False)
class TrajectorySamples:
    times: np.ndarray
    positions: np.ndarray          # world, (N, 3)
    rotations: Rotation            # world-from-body
    velocities: np.ndarray         # world, (N, 3)
    accelerations: np.ndarray      # world, (N, 3)
    angular_velocities: np.ndarray  # body, (N, 3)

    @property
    def quats(self) -> np.ndarray:
        return rotation_to_quat(self.rotations).reshape(-1, 4)


class AnalyticTrajectory:
    """Body pose as a function of time, splined through waypoints.

    Position and the rotation vector relative to the first waypoint are quintic
    splines with zero velocity and acceleration at both ends, so the motion is
    C2 and starts from rest. Before the first waypoint the rig holds still.
    """

    def __init__(self, position_spline, rotvec_spline, R0: Rotation, t_start: float, t_first: float, t_end: float):
        self.t_start = t_start
        self.t_first = t_first
        self.t_end = t_end
        self.R0 = R0
        self._pos = position_spline
        self._rot = rotvec_spline
        self._vel = position_spline.derivative(1)
        self._acc = position_spline.derivative(2) if position_spline.k >= 2 else None
        self._rot_rate = rotvec_spline.derivative(1)

    @classmethod
    def from_waypoints(cls, times, positions, rotvecs, t_start: Optional[float] = None,
                       clamped: bool = True) -> 'AnalyticTrajectory':
        """Build a trajectory from waypoint times, positions and world-from-body rotation vectors (rad).

        Args:
            clamped: quintic with zero end derivatives; otherwise a not-a-knot cubic
                (linear for fewer than four waypoints), which reproduces uniform motion.
        """
        times = np.asarray(times, dtype=np.float64)
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        rotvecs = np.asarray(rotvecs, dtype=np.float64).reshape(-1, 3)
        if len(times) < 2 or len(positions) != len(times) or len(rotvecs) != len(times):
            raise SimulationError("A trajectory needs at least two waypoints with a pose each")
        if np.any(np.diff(times) <= 0):
            raise SimulationError("Waypoint times must strictly increase")
        t_start = times[0] if t_start is None else float(t_start)
        if t_start > times[0]:
            raise SimulationError(f"Trajectory start {t_start} is after the first waypoint {times[0]}")

        rotations = Rotation.from_rotvec(rotvecs)
        R0 = rotations[0]
        relative = (R0.inv() * rotations).as_rotvec()
        if clamped:
            zero = np.zeros(3)
            bc = ([(1, zero), (2, zero)], [(1, zero), (2, zero)])
            pos = make_interp_spline(times, positions, k=5, bc_type=bc)
            rot = make_interp_spline(times, relative, k=5, bc_type=bc)
        else:
            k = 3 if len(times) >= 4 else 1
            pos = make_interp_spline(times, positions, k=k)
            rot = make_interp_spline(times, relative, k=k)
        return cls(pos, rot, R0, t_start, float(times[0]), float(times[-1]))

    @classmethod
    def constant(cls, pose: Pose, t_start: float, t_end: float) -> 'AnalyticTrajectory':
        return cls.from_waypoints([t_start, t_end], [pose.translation] * 2, [pose.rot.as_rotvec()] * 2)

    @property
    def support(self) -> Tuple[float, float]:
        return self.t_start, self.t_end

    @property
    def duration(self) -> float:
        return self.t_end - self.t_start

    def evaluate(self, times) -> TrajectorySamples:
        times = np.atleast_1d(np.asarray(times, dtype=np.float64))
        if len(times) and (times.min() < self.t_start - 1e-12 or times.max() > self.t_end + 1e-12):
            raise SimulationError(f"Times [{times.min():.4f}, {times.max():.4f}] outside trajectory support "
                                  f"[{self.t_start:.4f}, {self.t_end:.4f}]")
        tc = np.clip(times, self.t_first, self.t_end)
        moving = (times > self.t_first)[:, None]

        positions = self._pos(tc)
        velocities = np.where(moving, self._vel(tc), 0.0)
        accelerations = np.where(moving, self._acc(tc), 0.0) if self._acc is not None else np.zeros_like(positions)
        phi = self._rot(tc)
        phi_dot = np.where(moving, self._rot_rate(tc), 0.0)
        # body rate of R0 * Exp(phi) is J_r(phi) phi_dot, with J_r = J_l^T
        omega = np.array([so3_left_jacobian(f).T @ fd for f, fd in zip(phi, phi_dot)]).reshape(-1, 3)
        rotations = self.R0 * Rotation.from_rotvec(phi)
        return TrajectorySamples(times, positions, rotations, velocities, accelerations, omega)


def sample_trajectory(traj: AnalyticTrajectory, times) -> TrajectorySamples:
    """Poses and analytic derivatives at ``times``; raises SimulationError outside the support."""
    return traj.evaluate(times)


def default_trajectory(duration: float = config.SIM_DURATION,
                       static_prefix: float = config.SIM_STATIC_PREFIX) -> AnalyticTrajectory:
    """Gentle 6-DoF sway around the origin, at rest for ``static_prefix`` seconds."""
    times = np.arange(static_prefix, duration + 1e-9, 1.0)
    s = times - static_prefix
    positions = np.column_stack([
        0.15 * np.sin(0.5 * s),
        0.25 * np.sin(0.8 * s),
        0.10 * np.sin(0.6 * s + 0.3) - 0.10 * np.sin(0.3),
    ])
    rotvecs = np.radians(np.column_stack([
        4.0 * np.sin(0.7 * s),
        5.0 * np.sin(0.9 * s),
        8.0 * np.sin(0.5 * s),
    ]))
    return AnalyticTrajectory.from_waypoints(times, positions, rotvecs, t_start=0.0)


def _parse_floats(fields: Sequence[str], count: int, lineno: int, keyword: str) -> List[float]:
    if len(fields) < count:
        raise SimulationError(f"line {lineno}: '{keyword}' needs {count} values, got {len(fields)}")
    try:
        return [float(v) for v in fields]
    except ValueError as e:
        raise SimulationError(f"line {lineno}: {e}")


def load_scene(path, cfg: SimConfig = SimConfig()) -> Tuple[WireScene, AnalyticTrajectory]:
    """Parse a scene file.

    Directives, one per line (``#`` starts a comment)::

        start t
        waypoint t x y z rx ry rz        rotation vector in degrees
        segment x1 y1 z1 x2 y2 z2 [contrast]
        box cx cy cz sx sy sz [contrast]
        grid ox oy oz ux uy uz vx vy vz nu nv [contrast]

    Without waypoints the scene gets :func:`default_trajectory`.
    """
    path = Path(path)
    if not path.exists():
        raise SimulationError(f"Scene file not found: {path}")

    segments, contrast, waypoints = [], [], []
    t_start = None
    with open(path, 'r') as f:
        for lineno, line in enumerate(f, start=1):
            line = line.split('#', 1)[0].strip()
            if not line:
                continue
            keyword, *fields = line.split()
            if keyword == 'start':
                t_start = _parse_floats(fields, 1, lineno, keyword)[0]
            elif keyword == 'waypoint':
                waypoints.append(_parse_floats(fields, 7, lineno, keyword)[:7])
            elif keyword in ('segment', 'box', 'grid'):
                n = {'segment': 6, 'box': 6, 'grid': 11}[keyword]
                values = _parse_floats(fields, n, lineno, keyword)
                sign = values[n] if len(values) > n else 1.0
                if keyword == 'segment':
                    new = np.array(values[:6]).reshape(1, 2, 3)
                elif keyword == 'box':
                    new = box_segments(values[0:3], values[3:6])
                else:
                    nu, nv = int(values[9]), int(values[10])
                    if nu < 1 or nv < 1:
                        raise SimulationError(f"line {lineno}: grid needs at least one cell per direction")
                    new = grid_segments(values[0:3], values[3:6], values[6:9], nu, nv)
                segments.append(new)
                contrast += [sign] * len(new)
            else:
                raise SimulationError(f"line {lineno}: unknown directive '{keyword}'")

    scene = WireScene(np.concatenate(segments) if segments else np.zeros((0, 2, 3)), contrast or None)
    if waypoints:
        w = np.array(waypoints)
        trajectory = AnalyticTrajectory.from_waypoints(w[:, 0], w[:, 1:4], np.radians(w[:, 4:7]), t_start=t_start)
    else:
        trajectory = default_trajectory(cfg.duration, cfg.static_prefix)
    logger.info(f"Loaded scene {path.name}: {len(scene)} segments, "
                f"trajectory {trajectory.t_start:.1f}-{trajectory.t_end:.1f}s")
    return scene, trajectory


def generate_imu(traj: AnalyticTrajectory, cfg: SimConfig = SimConfig(), biases: Optional[ImuBiases] = None,
                 gravity: Optional[GravityModel] = None) -> ImuData:
    """Accelerometer and gyroscope readings along ``traj`` at ``cfg.imu_rate``.

    ``a = R^T (a_world - g) + b_a + n_a`` and ``w = w_body + b_w + n_w``; with
    ``cfg.noise`` the biases also random-walk. Output is a pure function of the seed.
    """
    biases = cfg.biases if biases is None else biases
    g = np.array(cfg.gravity) if gravity is None else gravity.g
    t0, t1 = traj.support
    n = int(np.floor((t1 - t0) * cfg.imu_rate + 1e-9)) + 1
    times = t0 + np.arange(n) / cfg.imu_rate
    s = traj.evaluate(times)

    acc = s.rotations.inv().apply(s.accelerations - g) + biases.b_a
    gyro = s.angular_velocities + biases.b_w
    if cfg.noise:
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0]))
        dt = 1.0 / cfg.imu_rate
        walk_a = np.cumsum(rng.standard_normal((n, 3)) * cfg.acc_bias_walk * np.sqrt(dt), axis=0)
        walk_w = np.cumsum(rng.standard_normal((n, 3)) * cfg.gyro_bias_walk * np.sqrt(dt), axis=0)
        acc += walk_a - walk_a[0] + rng.standard_normal((n, 3)) * cfg.acc_density * np.sqrt(cfg.imu_rate)
        gyro += walk_w - walk_w[0] + rng.standard_normal((n, 3)) * cfg.gyro_density * np.sqrt(cfg.imu_rate)

    logger.info(f"Generated {n} IMU samples at {cfg.imu_rate:.0f} Hz")
    return ImuData(times, acc, gyro)


def _camera_from_world(s: TrajectorySamples, T_cam_body: Pose) -> Tuple[Rotation, np.ndarray]:
    """Per-sample camera-from-world rotation and translation."""
    R_c_w = T_cam_body.rot * s.rotations.inv()
    t_c_w = T_cam_body.rot.apply(-s.rotations.inv().apply(s.positions)) + T_cam_body.translation
    return R_c_w, t_c_w


def _project_segments(segments: np.ndarray, R_c_w: Rotation, t_c_w: np.ndarray, cam: PinholeCamera,
                      near: float) -> np.ndarray:
    """Image endpoints (N, 2, 2) of each segment after near-plane clipping; NaN when invisible."""
    P = R_c_w.apply(segments.reshape(-1, 3)).reshape(-1, 2, 3) + t_c_w
    a0, b0 = P[:, 0], P[:, 1]
    za, zb = a0[:, 2], b0[:, 2]
    visible = (za > near) | (zb > near)
    with np.errstate(divide='ignore', invalid='ignore'):
        s = (near - za) / (zb - za)
    # move the endpoint behind the near plane onto it
    on_near = a0 + s[:, None] * (b0 - a0)
    a = np.where(((za <= near) & visible)[:, None], on_near, a0)
    b = np.where(((zb <= near) & visible)[:, None], on_near, b0)
    ends = np.stack([a, b], axis=1)
    z = np.where(visible[:, None], ends[..., 2], 1.0)
    uv = np.stack([cam.fx * ends[..., 0] / z + cam.cx, cam.fy * ends[..., 1] / z + cam.cy], axis=-1)
    uv[~visible] = np.nan
    return uv


def _clip_to_image(uv: np.ndarray, width: int, height: int) -> Tuple[np.ndarray, np.ndarray]:
    """Liang-Barsky clip of 2D segments to a box slightly larger than the image."""
    lo = np.array([-2.0, -2.0])
    hi = np.array([width + 1.0, height + 1.0])
    p0, d = uv[:, 0], uv[:, 1] - uv[:, 0]
    t_in = np.zeros(len(uv))
    t_out = np.ones(len(uv))
    with np.errstate(divide='ignore', invalid='ignore'):
        for axis in range(2):
            for bound, sign in ((lo[axis], -1.0), (hi[axis], 1.0)):
                p = sign * d[:, axis]
                q = sign * (bound - p0[:, axis])
                r = q / p
                parallel = p == 0
                t_in = np.where(~parallel & (p < 0), np.maximum(t_in, r), t_in)
                t_out = np.where(~parallel & (p > 0), np.minimum(t_out, r), t_out)
                t_out = np.where(parallel & (q < 0), -1.0, t_out)
    keep = np.isfinite(uv).all(axis=(1, 2)) & (t_in <= t_out)
    clipped = np.stack([p0 + t_in[:, None] * d, p0 + t_out[:, None] * d], axis=1)
    return clipped, keep


def _rasterize(uv: np.ndarray, cam: PinholeCamera, thickness: int) -> np.ndarray:
    """Segment-id image (0 = no edge, i + 1 = segment i)."""
    image = np.zeros((cam.height, cam.width), np.uint16)
    clipped, keep = _clip_to_image(uv, cam.width, cam.height)
    fixed = np.round(clipped * (1 << _LINE_SHIFT)).astype(np.int64)
    for i in np.flatnonzero(keep):
        (x0, y0), (x1, y1) = fixed[i]
        cv2.line(image, (int(x0), int(y0)), (int(x1), int(y1)), int(i) + 1, thickness, cv2.LINE_8, _LINE_SHIFT)
    return image


def _signed_distance(uv: np.ndarray, pixels: np.ndarray) -> np.ndarray:
    """Signed distance of pixel centres to the infinite line through each segment."""
    d = uv[:, 1] - uv[:, 0]
    length = np.linalg.norm(d, axis=1)
    with np.errstate(divide='ignore', invalid='ignore'):
        return (d[:, 0] * (pixels[:, 1] - uv[:, 0, 1]) - d[:, 1] * (pixels[:, 0] - uv[:, 0, 0])) / length


def _camera_events(scene: WireScene, times: np.ndarray, R_c_w: Rotation, t_c_w: np.ndarray,
                   cam: PinholeCamera, cfg: SimConfig, sensor: str) -> EventStream:
    if len(scene) == 0 or len(times) < 2:
        return EventStream.empty(cam.width, cam.height, sensor)

    thickness = max(1, int(round(2.0 * cfg.edge_threshold)))
    last_fired = np.full((cam.height, cam.width), -np.inf)
    chunks = []
    uv_prev = _project_segments(scene.segments, R_c_w[0], t_c_w[0], cam, cfg.near_plane)
    ids_prev = _rasterize(uv_prev, cam, thickness)
    for k in range(1, len(times)):
        uv_now = _project_segments(scene.segments, R_c_w[k], t_c_w[k], cam, cfg.near_plane)
        ids_now = _rasterize(uv_now, cam, thickness)
        ys, xs = np.nonzero((ids_now > 0) & (ids_prev == 0))
        if len(xs):
            seg = ids_now[ys, xs].astype(np.intp) - 1
            centres = np.column_stack([xs, ys]).astype(np.float64)
            d0 = _signed_distance(uv_prev[seg], centres)
            d1 = _signed_distance(uv_now[seg], centres)
            side = np.where(d0 < 0, -1.0, 1.0)
            with np.errstate(divide='ignore', invalid='ignore'):
                frac = (d0 - side * cfg.edge_threshold) / (d0 - d1)
            frac = np.where(np.isfinite(frac), np.clip(frac, 0.0, 1.0), 0.5)
            t_ev = times[k - 1] + frac * (times[k] - times[k - 1])
            ok = t_ev - last_fired[ys, xs] >= cfg.refractory
            if ok.any():
                last_fired[ys[ok], xs[ok]] = t_ev[ok]
                polarity = (scene.contrast[seg[ok]] * side[ok]).astype(np.int8)
                chunks.append((t_ev[ok], xs[ok], ys[ok], polarity))
        uv_prev, ids_prev = uv_now, ids_now

    if not chunks:
        return EventStream.empty(cam.width, cam.height, sensor)
    t, x, y, p = (np.concatenate(c) for c in zip(*chunks))
    order = np.lexsort((x, y, t))
    return EventStream(t[order], x[order].astype(np.int32), y[order].astype(np.int32), p[order],
                       cam.width, cam.height, sensor)


def generate_events(scene: WireScene, traj: AnalyticTrajectory, rig: StereoRig,
                    cfg: SimConfig = SimConfig()) -> Tuple[EventStream, EventStream]:
    """Left and right event streams for the rig moving along ``traj``.

    Raises:
        SimulationError: the rig moves but no event is produced in either camera.
    """
    t0, t1 = traj.support
    n_steps = max(1, int(round((t1 - t0) * cfg.event_rate)))
    times = np.linspace(t0, t1, n_steps + 1)
    s = traj.evaluate(times)

    T_left_body = rig.T_body_leftcam.inverse()
    T_right_body = rig.T_right_left.compose(T_left_body)
    jobs = [('left', rig.left, T_left_body), ('right', rig.right, T_right_body)]
    with ThreadPoolExecutor(max_workers=len(jobs)) as pool:
        futures = [pool.submit(_camera_events, scene, times, *_camera_from_world(s, T_cb), cam, cfg, sensor)
                   for sensor, cam, T_cb in jobs]
        left, right = (f.result() for f in futures)

    moving = np.any(np.linalg.norm(s.velocities, axis=1) > 1e-9) or \
        np.any(np.linalg.norm(s.angular_velocities, axis=1) > 1e-9)
    if moving and len(left) == 0 and len(right) == 0:
        raise SimulationError("No events generated over the whole trajectory; is the scene in view?")
    logger.info(f"Generated {len(left)} left and {len(right)} right events over {t1 - t0:.1f}s")
    return left, right


def ground_truth(traj: AnalyticTrajectory, times) -> Trajectory:
    """Exact world-from-body poses at strictly increasing ``times``."""
    times = np.asarray(times, dtype=np.float64)
    if np.any(np.diff(times) <= 0):
        raise SimulationError("Ground-truth times must strictly increase")
    s = traj.evaluate(times)
    return Trajectory(times, s.positions, s.quats)


@dataclass(frozen=True)
class SimulatedDataset:
    events_left: Path
    events_right: Path
    imu: Path
    groundtruth: Path
    n_events: int = 0
    n_imu: int = 0


def simulate_dataset(scene_path, out_dir, rig: StereoRig, cfg: SimConfig = SimConfig(),
                     binary: bool = False) -> SimulatedDataset:
    """Run the simulator on a scene file and write events, IMU and ground truth to ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    scene, traj = load_scene(scene_path, cfg)

    left, right = generate_events(scene, traj, rig, cfg)
    imu = generate_imu(traj, cfg, gravity=GravityModel(np.array(cfg.gravity)))
    t0, t1 = traj.support
    gt_times = t0 + np.arange(int(np.floor((t1 - t0) * cfg.gt_rate + 1e-9)) + 1) / cfg.gt_rate
    gt = ground_truth(traj, gt_times)

    suffix = '.bin' if binary else '.csv'
    dataset = SimulatedDataset(out_dir / f'events_left{suffix}', out_dir / f'events_right{suffix}',
                               out_dir / 'imu.csv', out_dir / 'groundtruth.txt',
                               len(left) + len(right), len(imu))
    write_events(dataset.events_left, left)
    write_events(dataset.events_right, right)
    write_imu(dataset.imu, imu)
    save_trajectory(dataset.groundtruth, gt)
    logger.info(f"Simulated dataset written to {out_dir}")
    return dataset
