import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from core.errors import SimulationError
from core.events import read_events
from core.geometry import Pose
from core.imu_integrator import read_imu
from core.rig_simulator import (AnalyticTrajectory, SimConfig, WireScene, box_segments, default_trajectory,
                                generate_events, generate_imu, grid_segments, ground_truth, load_scene,
                                simulate_dataset)
from core.settings import default_rig
from core.trajectory_eval import load_trajectory


@pytest.fixture(scope='module')
def body_rig():
    """Rig with the body x axis looking forward through the left camera."""
    return default_rig()


def _posts(ys=(-0.3, 0.0, 0.3), depth=2.0) -> WireScene:
    """Vertical segments in front of the rig."""
    return WireScene(np.array([[[depth, y, -0.4], [depth, y, 0.4]] for y in ys]))


def _sideways(duration: float, distance: float = 0.2) -> AnalyticTrajectory:
    return AnalyticTrajectory.from_waypoints([0.0, duration], [[0.0, 0.0, 0.0], [0.0, distance, 0.0]],
                                             np.zeros((2, 3)))


def test_static_rig_produces_no_events(body_rig):
    scene = WireScene(box_segments((2.0, 0.0, 0.0), (0.5, 0.5, 0.5)))
    left, right = generate_events(scene, AnalyticTrajectory.constant(Pose.identity(), 0.0, 0.5), body_rig)
    assert len(left) == 0
    assert len(right) == 0


def test_event_count_follows_path_not_speed(body_rig):
    slow, _ = generate_events(_posts(), _sideways(1.0), body_rig)
    fast, _ = generate_events(_posts(), _sideways(0.5), body_rig)
    assert len(slow) > 1000
    assert 0.8 <= len(fast) / len(slow) <= 1.2


def test_events_are_time_ordered_and_in_bounds(body_rig):
    left, _ = generate_events(_posts(), _sideways(0.5), body_rig)
    assert np.all(np.diff(left.t) >= 0)
    assert left.t[0] >= 0.0 and left.t[-1] <= 0.5
    assert left.x.min() >= 0 and left.x.max() < body_rig.left.width
    assert left.y.min() >= 0 and left.y.max() < body_rig.left.height
    assert set(np.unique(left.p)) <= {-1, 1}


def test_stereo_events_are_shifted_by_disparity(body_rig):
    left, right = generate_events(_posts(ys=(0.0,)), _sideways(0.5), body_rig)
    disparity = body_rig.left.fx * body_rig.baseline / 2.0
    assert np.mean(left.x) - np.mean(right.x) == pytest.approx(disparity, abs=1.0)
    assert np.mean(left.y) == pytest.approx(np.mean(right.y), abs=0.5)


def test_refractory_period_per_pixel(body_rig):
    scene = _posts(ys=np.arange(-0.3, 0.31, 0.05))
    strict, _ = generate_events(scene, _sideways(0.5), body_rig, SimConfig(refractory=0.1))
    loose, _ = generate_events(scene, _sideways(0.5), body_rig, SimConfig(refractory=0.0))
    pixel = strict.y.astype(np.int64) * body_rig.left.width + strict.x
    order = np.lexsort((strict.t, pixel))
    repeated = np.diff(pixel[order]) == 0
    assert repeated.any()
    assert np.diff(strict.t[order])[repeated].min() >= 0.1
    assert len(loose) > len(strict)


def test_moving_rig_without_visible_scene_raises(body_rig):
    behind = _posts(depth=-2.0)
    with pytest.raises(SimulationError):
        generate_events(behind, _sideways(0.5), body_rig)


def test_ground_truth_passes_through_waypoints():
    times = np.array([0.0, 1.0, 2.0, 3.0])
    positions = np.array([[0.0, 0.0, 0.0], [0.5, 0.1, 0.0], [0.8, -0.2, 0.1], [1.0, 0.0, 0.0]])
    rotvecs = np.radians([[0.0, 0.0, 0.0], [5.0, 0.0, 10.0], [0.0, -5.0, 20.0], [2.0, 2.0, 30.0]])
    gt = ground_truth(AnalyticTrajectory.from_waypoints(times, positions, rotvecs), times)
    np.testing.assert_allclose(gt.positions, positions, atol=1e-9)
    for q, rv in zip(gt.quats, rotvecs):
        angle = (Rotation.from_quat(np.roll(q, -1)).inv() * Rotation.from_rotvec(rv)).magnitude()
        assert angle < 1e-9


def test_ground_truth_rejects_unordered_times():
    with pytest.raises(SimulationError):
        ground_truth(default_trajectory(), [1.0, 0.5])


def test_trajectory_support():
    traj = default_trajectory(duration=5.0, static_prefix=1.0)
    assert traj.support == (0.0, 5.0)
    with pytest.raises(SimulationError):
        traj.evaluate([6.0])


def test_static_prefix_holds_still():
    traj = default_trajectory(duration=5.0, static_prefix=1.0)
    s = traj.evaluate(np.linspace(0.0, 1.0, 11))
    np.testing.assert_allclose(s.positions, np.tile(s.positions[0], (11, 1)))
    assert np.all(s.velocities == 0.0)
    assert np.all(s.angular_velocities == 0.0)


def test_derivatives_match_finite_differences():
    traj = default_trajectory(duration=10.0, static_prefix=1.0)
    times = np.linspace(2.0, 9.0, 15)
    h = 1e-4
    s, s_plus, s_minus = traj.evaluate(times), traj.evaluate(times + h), traj.evaluate(times - h)
    np.testing.assert_allclose(s.velocities, (s_plus.positions - s_minus.positions) / (2 * h), atol=1e-6)
    np.testing.assert_allclose(s.accelerations, (s_plus.velocities - s_minus.velocities) / (2 * h), atol=1e-6)
    omega = (s_minus.rotations.inv() * s_plus.rotations).as_rotvec() / (2 * h)
    np.testing.assert_allclose(s.angular_velocities, omega, atol=1e-6)


def test_uniform_motion_is_reproduced():
    traj = AnalyticTrajectory.from_waypoints([0.0, 1.0], [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]], np.zeros((2, 3)),
                                             clamped=False)
    s = traj.evaluate([0.5])
    np.testing.assert_allclose(s.positions[0], (0.5, 0.0, 0.0))
    np.testing.assert_allclose(s.velocities[0], (1.0, 0.0, 0.0))
    np.testing.assert_allclose(s.accelerations[0], np.zeros(3))


def test_static_imu_reads_gravity():
    cfg = SimConfig(noise=False, acc_bias=(0.0, 0.0, 0.0), gyro_bias=(0.0, 0.0, 0.0))
    imu = generate_imu(AnalyticTrajectory.constant(Pose.identity(), 0.0, 1.0), cfg)
    assert len(imu) == 201
    np.testing.assert_allclose(imu.a, np.tile((0.0, 0.0, 9.81), (201, 1)), atol=1e-12)
    np.testing.assert_allclose(imu.w, np.zeros((201, 3)), atol=1e-12)


def test_imu_biases_are_added():
    cfg = SimConfig(noise=False, acc_bias=(0.1, 0.0, 0.0), gyro_bias=(0.0, 0.01, 0.0))
    imu = generate_imu(AnalyticTrajectory.constant(Pose.identity(), 0.0, 1.0), cfg)
    np.testing.assert_allclose(imu.a[0], (0.1, 0.0, 9.81), atol=1e-12)
    np.testing.assert_allclose(imu.w[0], (0.0, 0.01, 0.0), atol=1e-12)


def test_imu_noise_is_seeded():
    traj = default_trajectory(duration=3.0, static_prefix=1.0)
    a = generate_imu(traj, SimConfig(seed=3))
    b = generate_imu(traj, SimConfig(seed=3))
    c = generate_imu(traj, SimConfig(seed=4))
    assert np.array_equal(a.a, b.a)
    assert np.array_equal(a.w, b.w)
    assert not np.array_equal(a.a, c.a)


def test_static_noise_level():
    cfg = SimConfig(acc_bias=(0.0, 0.0, 0.0), gyro_bias=(0.0, 0.0, 0.0))
    imu = generate_imu(AnalyticTrajectory.constant(Pose.identity(), 0.0, 10.0), cfg)
    expected = cfg.acc_density * np.sqrt(cfg.imu_rate)
    assert np.std(imu.a[:, 0]) == pytest.approx(expected, rel=0.1)


def test_scene_primitives():
    assert box_segments((0.0, 0.0, 0.0), (1.0, 1.0, 1.0)).shape == (12, 2, 3)
    assert grid_segments((0.0, 0.0, 0.0), (1.0, 0.0, 0.0), (0.0, 1.0, 0.0), 2, 3).shape == (7, 2, 3)
    with pytest.raises(SimulationError):
        WireScene(np.zeros((1, 2, 3)))
    assert len(WireScene.empty()) == 0


def test_load_scene(tmp_path):
    path = tmp_path / 'tiny.scene'
    path.write_text(
        "# tiny\n"
        "start 0\n"
        "waypoint 1 0 0 0 0 0 0\n"
        "waypoint 2 0 0.1 0 0 0 5\n"
        "segment 2 0 -0.5 2 0 0.5 -1\n"
        "box 2 0.5 0 0.2 0.2 0.2\n"
    )
    scene, traj = load_scene(path)
    assert len(scene) == 13
    assert scene.contrast[0] == -1
    assert traj.support == (0.0, 2.0)


def test_load_scene_without_waypoints_uses_default(tmp_path):
    path = tmp_path / 'walls.scene'
    path.write_text("grid 3 -1 -1 0 2 0 0 0 2 4 4\n")
    scene, traj = load_scene(path, SimConfig(duration=6.0))
    assert len(scene) == 10
    assert traj.support == (0.0, 6.0)


@pytest.mark.parametrize('text, line', [
    ("segment 0 0 0 1 1 1\nwall 1 2 3\n", 2),
    ("segment 0 0 0 1 1\n", 1),
    ("\n\ngrid 0 0 0 1 0 0 0 1 0 0 2\n", 3),
])
def test_load_scene_errors(tmp_path, text, line):
    path = tmp_path / 'bad.scene'
    path.write_text(text)
    with pytest.raises(SimulationError, match=f"line {line}"):
        load_scene(path)


def test_missing_scene(tmp_path):
    with pytest.raises(SimulationError):
        load_scene(tmp_path / 'nope.scene')


def test_simulate_dataset_writes_readable_files(tmp_path, body_rig):
    scene = tmp_path / 'posts.scene'
    scene.write_text(
        "waypoint 0 0 0 0 0 0 0\n"
        "waypoint 1 0 0.2 0 0 0 3\n"
        "segment 2 -0.3 -0.4 2 -0.3 0.4\n"
        "segment 2 0.3 -0.4 2 0.3 0.4\n"
        "segment 2 -0.3 0.4 2 0.3 0.4\n"
    )
    dataset = simulate_dataset(scene, tmp_path / 'out', body_rig, SimConfig(seed=1))
    width, height = body_rig.left.width, body_rig.left.height
    left = read_events(dataset.events_left, width, height)
    right = read_events(dataset.events_right, width, height, 'right')
    assert len(left) + len(right) == dataset.n_events > 0
    assert len(read_imu(dataset.imu)) == dataset.n_imu == 201
    assert len(load_trajectory(dataset.groundtruth)) == 101
