"""Visual-inertial odometry loop: static init, stereo bootstrap, then track/fuse/map every cycle."""

import logging
import threading
import time
import traceback
from dataclasses import dataclass, field
from enum import Enum
from queue import Queue
from typing import List, Optional, Tuple

import numpy as np

import config
from core.debug_views import dump_cycle
from core.depth_mapper import (MappingConfig, PoseWindow, SemiDenseMap, estimate_inverse_depths, fuse_estimates,
                               stereo_initialize)
from core.edge_tracker import TrackingConfig, TrackingProblem, TrackingResult, initial_twist, track
from core.errors import EstimationError, InitializationError, MapNotReadyError, TrackingError, VisionInitTimeout
from core.eskf import InertialFilter, NoiseConfig, NominalState
from core.events import (EventConfig, EventStream, LastTimestampMap, TimeSurface, negate_time_surface, read_events,
                         render_time_surface)
from core.geometry import Pose, StereoRig, interpolate_pose
from core.imu_integrator import ImuConfig, ImuData, read_imu, static_initialize
from core.trajectory_eval import MetricReport, Trajectory, evaluate, load_trajectory, save_trajectory

logger = logging.getLogger(__name__)


class Phase(Enum):
    WAITING_STATIC_INIT = 'waiting-static-init'
    WAITING_VISION_INIT = 'waiting-vision-init'
    RUNNING = 'running'
    LOST = 'lost'


_TRANSITIONS = {
    Phase.WAITING_STATIC_INIT: {Phase.WAITING_VISION_INIT, Phase.RUNNING},
    Phase.WAITING_VISION_INIT: {Phase.RUNNING},
    Phase.RUNNING: {Phase.LOST},
    Phase.LOST: set(),
}


@dataclass(frozen=True)
class PipelineConfig:
    rig: StereoRig
    events: EventConfig = EventConfig()
    mapping: MappingConfig = MappingConfig()
    tracking: TrackingConfig = TrackingConfig()
    imu: ImuConfig = ImuConfig()
    noise: NoiseConfig = NoiseConfig()
    cycle: float = config.PIPELINE_CYCLE
    vision_init_timeout: float = config.PIPELINE_VISION_INIT_TIMEOUT
    deterministic: bool = config.PIPELINE_DETERMINISTIC
    vision_updates: bool = config.PIPELINE_VISION_UPDATES
    debug_every: int = config.PIPELINE_DEBUG_EVERY
    debug_dir: Optional[str] = None
    events_left: Optional[str] = None
    events_right: Optional[str] = None
    imu_path: Optional[str] = None
    gt_path: Optional[str] = None
    out_path: Optional[str] = None

    def __post_init__(self):
        if self.cycle <= 0:
            raise ValueError(f"Pipeline cycle must be positive, got {self.cycle}")
        if self.vision_init_timeout <= 0:
            raise ValueError("Vision initialization timeout must be positive")
        if self.mapping.window > self.cycle:
            raise ValueError(f"Mapping window {self.mapping.window}s longer than the cycle {self.cycle}s")
        if self.debug_every < 0:
            raise ValueError("debug_every must be >= 0")


@dataclass
class PipelineState:
    phase: Phase = Phase.WAITING_STATIC_INIT
    nominal: Optional[NominalState] = None
    depth_map: Optional[SemiDenseMap] = None
    last_observation_time: Optional[float] = None
    t: float = 0.0
    cycles: int = 0
    updates: int = 0
    lost_reason: str = ''
    times: List[float] = field(default_factory=list)
    poses: List[Pose] = field(default_factory=list)

    def advance(self, phase: Phase):
        if phase not in _TRANSITIONS[self.phase]:
            raise RuntimeError(f"Illegal phase transition {self.phase.value} -> {phase.value}")
        logger.info(f"Phase {self.phase.value} -> {phase.value} at t={self.t:.3f}")
        self.phase = phase

    def record(self, t: float, pose: Pose):
        if self.times and t <= self.times[-1]:
            return
        self.times.append(t)
        self.poses.append(pose)

    def trajectory(self) -> Trajectory:
        return Trajectory.from_poses(self.times, self.poses)


@dataclass(frozen=True, eq=False)
class RunReport:
    trajectory: Trajectory
    phase: Phase
    cycles: int
    updates: int
    events: int
    data_duration: float
    wall_time: float
    lost_reason: str = ''
    metrics: Optional[MetricReport] = None

    @property
    def events_per_second(self) -> float:
        return self.events / self.wall_time if self.wall_time > 0 else 0.0

    @property
    def realtime_factor(self) -> float:
        return self.data_duration / self.wall_time if self.wall_time > 0 else 0.0

    def as_lines(self) -> List[str]:
        lines = [
            f"phase={self.phase.value}",
            f"poses={len(self.trajectory)}",
            f"cycles={self.cycles}",
            f"updates={self.updates}",
            f"events={self.events}",
            f"wall_time={self.wall_time:.3f}",
            f"events_per_second={self.events_per_second:.1f}",
            f"realtime_factor={self.realtime_factor:.3f}",
        ]
        if self.lost_reason:
            lines.append(f"lost_reason={self.lost_reason}")
        if self.metrics is not None:
            lines += self.metrics.as_lines()
        return lines


@dataclass(frozen=True, eq=False)
class CycleFrames:
    """Both time-surfaces rendered at one cycle time."""

    t: float
    left: TimeSurface
    right: TimeSurface


class VisionFrontend:
    """Per-camera last-timestamp maps, time-surface rendering and the semi-dense map."""

    def __init__(self, cfg: PipelineConfig, left: EventStream, right: EventStream):
        self.cfg = cfg
        self.rig = cfg.rig
        self.left = left
        self.right = right
        self.left_map = LastTimestampMap(cfg.rig.left.width, cfg.rig.left.height, cfg.events.polarity)
        self.right_map = LastTimestampMap(cfg.rig.right.width, cfg.rig.right.height, cfg.events.polarity)
        self.depth_map: Optional[SemiDenseMap] = None
        self.pose_history: List[Tuple[float, Pose]] = []
        self.t = -np.inf
        self.events_seen = 0

    def ingest(self, t: float):
        """Consume events up to ``t`` in both streams."""
        t0 = self.t
        self.left_map.advance_stream(self.left, t0, t)
        self.right_map.advance_stream(self.right, t0, t)
        for stream in (self.left, self.right):
            i0, i1 = stream.span(t0, t)
            self.events_seen += i1 - i0
        self.t = t

    def render(self, t: float) -> CycleFrames:
        self.ingest(t)
        decay = self.cfg.events.decay
        return CycleFrames(t, render_time_surface(self.left_map, t, decay), render_time_surface(self.right_map, t, decay))

    def bootstrap(self, frames: CycleFrames, T_w_c: Pose) -> SemiDenseMap:
        self.depth_map = stereo_initialize(frames.left, frames.right, self.rig, self.cfg.mapping, T_w_c)
        self.pose_history = [(frames.t, T_w_c)]
        return self.depth_map

    def tracking_problem(self, frames: CycleFrames, T_w_c_prior: Pose) -> TrackingProblem:
        psi0 = initial_twist(self.depth_map.T_w_ref, T_w_c_prior)
        return TrackingProblem(self.depth_map, negate_time_surface(frames.left), self.rig.left, psi0,
                               self.cfg.tracking)

    def _pose_at(self, t: float) -> Pose:
        history = self.pose_history
        if t <= history[0][0]:
            return history[0][1]
        for (ta, Ta), (tb, Tb) in zip(history[:-1], history[1:]):
            if ta <= t <= tb:
                return interpolate_pose(Ta, Tb, (t - ta) / (tb - ta))
        return history[-1][1]

    def refresh_map(self, frames: CycleFrames, T_w_c: Pose) -> SemiDenseMap:
        """Estimate depth for a subsample of recent left events and fuse it at the fused pose."""
        cfg = self.cfg.mapping
        self.pose_history = (self.pose_history + [(frames.t, T_w_c)])[-4:]
        t0 = frames.t - cfg.window
        window = PoseWindow(t0, self._pose_at(t0), frames.t, T_w_c)

        i0, i1 = self.left.span(t0, frames.t)
        idx = np.arange(i0, i1)
        if len(idx) > cfg.max_events_per_cycle:
            idx = idx[np.linspace(0, len(idx) - 1, cfg.max_events_per_cycle).astype(np.intp)]
        fresh, flags = estimate_inverse_depths(self.left.t[idx], self.left.x[idx], self.left.y[idx],
                                               frames.left, frames.right, window, self.rig, cfg)
        self.depth_map = fuse_estimates(self.depth_map, fresh, T_w_c, frames.t, self.rig.left, cfg)
        accepted = sum(e is not None for e in fresh)
        logger.debug(f"Mapping at t={frames.t:.3f}: {accepted}/{len(idx)} events accepted, map {len(self.depth_map)}")

        if len(self.depth_map) < self.cfg.tracking.min_map_points:
            try:
                self.depth_map = stereo_initialize(frames.left, frames.right, self.rig, cfg, T_w_c)
                logger.warning(f"Map fell to {len(self.depth_map)} points, re-bootstrapped at t={frames.t:.3f}")
            except MapNotReadyError as e:
                logger.warning(f"Map re-bootstrap failed at t={frames.t:.3f}: {e}")
        return self.depth_map


class VioPipeline:
    """Owns the filter, the vision frontend and the pipeline state."""

    def __init__(self, cfg: PipelineConfig, left: EventStream, right: EventStream, imu: ImuData):
        self.cfg = cfg
        self.imu = imu
        self.frontend = VisionFrontend(cfg, left, right)
        self.filter: Optional[InertialFilter] = None
        self.state = PipelineState()
        self.t_init = 0.0

    @property
    def T_body_cam(self) -> Pose:
        return self.cfg.rig.T_body_leftcam

    def camera_pose(self, nominal: NominalState) -> Pose:
        return nominal.pose.compose(self.T_body_cam)

    @property
    def t_end(self) -> float:
        return float(self.imu.t[-1]) if len(self.imu) else 0.0

    def cycle_times(self) -> np.ndarray:
        n = int(np.floor((self.t_end - self.t_init) / self.cfg.cycle + 1e-9))
        return self.t_init + self.cfg.cycle * np.arange(1, n + 1)

    def initialize_static(self):
        """Gravity, attitude and biases from the first seconds of IMU data."""
        if len(self.imu) == 0:
            raise InitializationError("IMU stream is empty")
        q, biases, gravity = static_initialize(self.imu, self.cfg.imu.init_duration, self.cfg.imu)
        i_init = int(np.searchsorted(self.imu.t, self.imu.t[0] + self.cfg.imu.init_duration, side='right')) - 1
        self.t_init = float(self.imu.t[i_init])
        nominal = NominalState(np.zeros(3), np.zeros(3), q, biases.b_a, biases.b_w)
        self.filter = InertialFilter(nominal, self.imu[i_init], gravity, self.cfg.noise, self.cfg.imu)
        self.frontend.ingest(self.t_init)
        self.state.t = self.t_init
        self.state.nominal = nominal
        self.state.record(self.t_init, nominal.pose)
        self.state.advance(Phase.WAITING_VISION_INIT if self.cfg.vision_updates else Phase.RUNNING)

    def try_vision_init(self, t: float) -> bool:
        self.filter.propagate_to(self.imu, t)
        frames = self.frontend.render(t)
        self._finish_cycle(t, counted=False)
        try:
            depth_map = self.frontend.bootstrap(frames, self.camera_pose(self.filter.nominal))
        except MapNotReadyError as e:
            if t - self.t_init > self.cfg.vision_init_timeout:
                raise VisionInitTimeout(f"No stereo map after {self.cfg.vision_init_timeout:.1f}s ({e})")
            logger.debug(f"Vision init not ready at t={t:.3f}: {e}")
            return False
        self.state.depth_map = depth_map
        self.state.advance(Phase.RUNNING)
        return True

    def initialize(self):
        """Static init, then stereo bootstrap on the first well-populated time-surface pair."""
        self.initialize_static()
        if not self.cfg.vision_updates:
            return self.state
        for t in self.cycle_times():
            if self.try_vision_init(float(t)):
                return self.state
        raise VisionInitTimeout("Data ended before a stereo map could be bootstrapped")

    # the three logical tasks of one cycle
    def propagate(self, t: float) -> NominalState:
        self.filter.propagate_to(self.imu, t)
        return self.filter.nominal

    def track(self, frames: CycleFrames, prior: NominalState) -> Tuple[TrackingProblem, TrackingResult]:
        problem = self.frontend.tracking_problem(frames, self.camera_pose(prior))
        return problem, track(problem)

    def fuse(self, t: float, vision: Optional[Pose]) -> NominalState:
        if vision is None:
            self.filter.skip_update()
        else:
            self.filter.update_with_pose(vision, t, self.cfg.rig)
            self.state.updates += 1
            self.state.last_observation_time = t
        return self.filter.nominal

    def _finish_cycle(self, t: float, counted: bool = True):
        self.state.t = t
        if counted:
            self.state.cycles += 1
        self.state.nominal = self.filter.nominal
        self.state.record(t, self.filter.nominal.pose)

    def _lose(self, t: float, error: TrackingError):
        self.state.t = t
        self.state.lost_reason = str(error)
        logger.info(f"Tracking lost at t={t:.3f}: {error}")
        self.state.advance(Phase.LOST)

    def _debug(self, frames: CycleFrames, problem=None, result=None):
        if self.cfg.debug_dir and self.cfg.debug_every and self.state.cycles % self.cfg.debug_every == 0:
            dump_cycle(self.cfg.debug_dir, self.state.cycles, frames.left, self.frontend.depth_map,
                       self.cfg.rig.left, problem, result)

    def step(self, t: float) -> PipelineState:
        """One cycle at time ``t``: propagate, track, fuse and refresh the map."""
        if self.state.phase != Phase.RUNNING:
            raise RuntimeError(f"step() needs the running phase, pipeline is {self.state.phase.value}")
        prior = self.propagate(t)
        if not self.cfg.vision_updates:
            self.fuse(t, None)
            self._finish_cycle(t)
            return self.state

        frames = self.frontend.render(t)
        try:
            problem, result = self.track(frames, prior)
        except TrackingError as e:
            self._lose(t, e)
            return self.state
        fused = self.fuse(t, result.pose)
        self.state.depth_map = self.frontend.refresh_map(frames, self.camera_pose(fused))
        self._finish_cycle(t)
        self._debug(frames, problem, result)
        return self.state

    def run_deterministic(self):
        for t in self.cycle_times():
            if t <= self.state.t:
                continue
            self.step(float(t))
            if self.state.phase == Phase.LOST:
                break

    def run_concurrent(self):
        ConcurrentRunner(self).run([float(t) for t in self.cycle_times() if t > self.state.t])

    def run(self) -> PipelineState:
        if self.state.phase == Phase.WAITING_STATIC_INIT:
            self.initialize()
        if self.cfg.deterministic or not self.cfg.vision_updates:
            self.run_deterministic()
        else:
            self.run_concurrent()
        logger.info(f"Run finished in phase {self.state.phase.value}: {self.state.cycles} cycles, "
                    f"{self.state.updates} updates")
        return self.state


_STOP = object()


class ConcurrentRunner:
    """Runs the IMU/filter, event/mapping and tracking tasks on separate threads.

    Tasks exchange immutable snapshots (nominal states, time-surface pairs,
    poses) through ordered queues; the filter thread alone touches the filter.
    """

    def __init__(self, pipeline: VioPipeline):
        self.pipeline = pipeline
        self.cycle_queue = Queue()
        self.prior_queue = Queue()
        self.frames_queue = Queue()
        self.vision_queue = Queue()
        self.fused_queue = Queue()
        self.mapped_queue = Queue()
        self.errors: List[BaseException] = []
        self.stop = threading.Event()

    def _guard(self, target, name: str):
        def wrapper():
            try:
                target()
            except Exception as e:
                logger.error(f"Error in {name} thread: {e}")
                logger.error(traceback.format_exc())
                self.errors.append(e)
                self.stop.set()
                for q in (self.prior_queue, self.frames_queue, self.vision_queue, self.fused_queue,
                          self.mapped_queue, self.cycle_queue):
                    q.put(_STOP)
        return threading.Thread(target=wrapper, name=name, daemon=True)

    def _filter_task(self, times: List[float]):
        p = self.pipeline
        for t in times:
            self.prior_queue.put((t, p.propagate(t)))
            vision = self.vision_queue.get()
            if vision is _STOP:
                return
            if vision is None:
                self.fused_queue.put(_STOP)
                return
            self.fused_queue.put((t, p.fuse(t, vision)))

    def _event_task(self, times: List[float]):
        p = self.pipeline
        for t in times:
            frames = p.frontend.render(t)
            self.frames_queue.put(frames)
            fused = self.fused_queue.get()
            if fused is _STOP:
                return
            _, nominal = fused
            depth_map = p.frontend.refresh_map(frames, p.camera_pose(nominal))
            self.mapped_queue.put((t, nominal, depth_map, frames))

    def _tracking_task(self, times: List[float]):
        p = self.pipeline
        for _ in times:
            prior = self.prior_queue.get()
            frames = self.frames_queue.get()
            if prior is _STOP or frames is _STOP:
                return
            t, nominal = prior
            try:
                _, result = p.track(frames, nominal)
            except TrackingError as e:
                self.vision_queue.put(None)
                self.mapped_queue.put(('lost', t, e))
                return
            self.vision_queue.put(result.pose)

    def run(self, times: List[float]):
        threads = [
            self._guard(lambda: self._filter_task(times), 'filter'),
            self._guard(lambda: self._event_task(times), 'events'),
            self._guard(lambda: self._tracking_task(times), 'tracking'),
        ]
        for thread in threads:
            thread.start()

        state = self.pipeline.state
        for _ in times:
            item = self.mapped_queue.get()
            if item is _STOP:
                break
            if item[0] == 'lost':
                self.pipeline._lose(item[1], item[2])
                break
            t, nominal, depth_map, frames = item
            state.t = t
            state.cycles += 1
            state.nominal = nominal
            state.depth_map = depth_map
            state.record(t, nominal.pose)
            self.pipeline._debug(frames)

        for thread in threads:
            thread.join(timeout=10.0)
        if self.errors:
            raise self.errors[0]


def run(cfg: PipelineConfig) -> RunReport:
    """Load the configured inputs, run the pipeline, write the trajectory and evaluate it."""
    for name in ('events_left', 'events_right', 'imu_path'):
        if getattr(cfg, name) is None:
            raise ValueError(f"Pipeline input '{name}' is not set")
    left = read_events(cfg.events_left, cfg.rig.left.width, cfg.rig.left.height, 'left', cfg.events.sort)
    right = read_events(cfg.events_right, cfg.rig.right.width, cfg.rig.right.height, 'right', cfg.events.sort)
    imu = read_imu(cfg.imu_path)

    started = time.perf_counter()
    pipeline = VioPipeline(cfg, left, right, imu)
    try:
        state = pipeline.run()
    except (InitializationError, EstimationError) as e:
        logger.error(f"Pipeline stopped in phase {pipeline.state.phase.value} at t={pipeline.state.t:.3f}: {e}")
        raise
    wall_time = time.perf_counter() - started

    trajectory = state.trajectory()
    if cfg.out_path:
        save_trajectory(cfg.out_path, trajectory)
    metrics = None
    if cfg.gt_path and len(trajectory):
        metrics = evaluate(trajectory, load_trajectory(cfg.gt_path))

    report = RunReport(trajectory, state.phase, state.cycles, state.updates, pipeline.frontend.events_seen,
                       max(0.0, state.t - float(imu.t[0])) if len(imu) else 0.0, wall_time,
                       state.lost_reason, metrics)
    logger.info(f"Processed {report.events} events in {wall_time:.2f}s "
                f"({report.events_per_second:.0f} ev/s, {report.realtime_factor:.2f}x real time)")
    return report
