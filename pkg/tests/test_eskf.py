import numpy as np
import pytest
from scipy.spatial.transform import Rotation
from scipy.stats import chi2

from core.errors import EstimationError
from core.eskf import (BA_IDX, BW_IDX, P_IDX, STATE_DIM, TH_IDX, V_IDX, ErrorState, InertialFilter, NominalState,
                       NoiseConfig, continuous_jacobians, discretize, form_observation, inject_and_reset,
                       no_observation_step, observation_matrix, propagate, update)
from core.geometry import Pose, StereoRig, quat_to_rotation, rotation_to_quat
from core.imu_integrator import GravityModel, ImuData, ImuSample

G_NORM = 9.81
T = 0.005
POSE_IDX = np.r_[0:3, 6:9]


def _level_sample(t=0.0):
    return ImuSample(t, (0.0, 0.0, G_NORM), np.zeros(3))


def _random_nominal(rng):
    q = rotation_to_quat(Rotation.from_rotvec(rng.normal(scale=0.5, size=3)))
    return NominalState(rng.normal(size=3), rng.normal(size=3), q,
                        rng.normal(scale=0.1, size=3), rng.normal(scale=0.01, size=3))


def test_jacobians_vanish_without_excitation():
    nominal = NominalState(b_a=(0.1, 0.2, 0.3), b_w=(0.01, 0.0, -0.01))
    F, B = continuous_jacobians(nominal, ImuSample(0.0, (0.1, 0.2, 0.3), (0.01, 0.0, -0.01)))
    assert np.all(F[V_IDX, TH_IDX] == 0.0)
    assert np.all(F[TH_IDX, TH_IDX] == 0.0)
    np.testing.assert_array_equal(F[P_IDX, V_IDX], np.eye(3))
    np.testing.assert_array_equal(F[V_IDX, BA_IDX], -np.eye(3))
    np.testing.assert_array_equal(F[TH_IDX, BW_IDX], -np.eye(3))
    np.testing.assert_array_equal(B[V_IDX, 0:3], np.eye(3))


def test_jacobians_match_error_dynamics(rng):
    for _ in range(20):
        nominal = _random_nominal(rng)
        sample = ImuSample(0.0, rng.normal(size=3) + (0.0, 0.0, G_NORM), rng.normal(size=3))
        F, B = continuous_jacobians(nominal, sample)
        dx = rng.normal(size=STATE_DIM)
        n = rng.normal(size=12)
        R = nominal.R
        a = sample.a - nominal.b_a
        w = sample.w - nominal.b_w
        expected = np.concatenate([
            dx[V_IDX],
            -R @ np.cross(a, dx[TH_IDX]) - R @ dx[BA_IDX] + R @ n[0:3],
            -np.cross(w, dx[TH_IDX]) - dx[BW_IDX] + n[3:6],
            n[6:9],
            n[9:12],
        ])
        np.testing.assert_allclose(F @ dx + B @ n, expected, atol=1e-12)


def test_discretize_zero_dynamics():
    F, B = discretize(np.zeros((STATE_DIM, STATE_DIM)), np.eye(3), T)
    np.testing.assert_array_equal(F, np.eye(STATE_DIM))
    np.testing.assert_allclose(B[V_IDX, 0:3], np.eye(3) * T)
    np.testing.assert_allclose(B[BA_IDX, 6:9], np.eye(3) * np.sqrt(T))


def test_discretize_zero_period():
    F_t, _ = continuous_jacobians(NominalState(), _level_sample())
    F, B = discretize(F_t, np.eye(3), 0.0)
    np.testing.assert_array_equal(F, np.eye(STATE_DIM))
    assert np.all(B == 0.0)
    with pytest.raises(ValueError):
        discretize(F_t, np.eye(3), -T)


def test_discretize_is_first_order(rng):
    nominal = _random_nominal(rng)
    F_t, _ = continuous_jacobians(nominal, ImuSample(0.0, rng.normal(size=3), rng.normal(size=3)))
    F, _ = discretize(F_t, nominal.R, T)
    np.testing.assert_allclose(F - np.eye(STATE_DIM), F_t * T, atol=1e-15)


def test_propagate_adds_process_noise():
    F, B = discretize(np.zeros((STATE_DIM, STATE_DIM)), np.eye(3), T)
    Q = NoiseConfig().process_noise(T)
    dx, P = propagate(np.zeros(STATE_DIM), np.zeros((STATE_DIM, STATE_DIM)), F, B, Q)
    assert np.all(dx == 0.0)
    np.testing.assert_allclose(P, B @ Q @ B.T)
    np.testing.assert_allclose(P[3, 3], NoiseConfig().acc_density ** 2 * T)


def test_propagate_rejects_non_finite():
    F = np.eye(STATE_DIM)
    F[0, 0] = np.inf
    with pytest.raises(EstimationError):
        propagate(np.zeros(STATE_DIM), np.eye(STATE_DIM), F, np.zeros((STATE_DIM, 12)), np.eye(12))


def test_no_observation_keeps_prior(rng):
    dx = rng.normal(size=STATE_DIM)
    P = np.eye(STATE_DIM) * 2.0
    out_dx, out_P = no_observation_step(dx, P)
    assert out_dx is dx
    assert out_P is P


def test_observation_zero_innovation():
    nominal = NominalState(p=(1.0, 2.0, 3.0), q=(0.9, 0.1, -0.2, 0.3))
    obs = form_observation(nominal, nominal.pose, t_prior=1.0, t_vision=1.0)
    np.testing.assert_allclose(obs.y, np.zeros(6), atol=1e-12)
    np.testing.assert_array_equal(obs.G, observation_matrix())
    assert obs.t == 1.0


def test_observation_position_offset():
    obs = form_observation(NominalState(p=(1.0, 0.0, 0.0)), Pose(translation=(1.1, 0.0, 0.0)))
    np.testing.assert_allclose(obs.y, (-0.1, 0.0, 0.0, 0.0, 0.0, 0.0), atol=1e-12)


def test_observation_timestamp_gate():
    nominal = NominalState()
    with pytest.raises(EstimationError):
        form_observation(nominal, nominal.pose, t_prior=1.0, t_vision=1.5)


def test_observation_converts_camera_pose(camera, rng):
    T_body_leftcam = Pose((0.5, -0.5, 0.5, -0.5), (0.1, 0.0, 0.05))
    rig = StereoRig(camera, camera, Pose(translation=(-0.1, 0.0, 0.0)), T_body_leftcam, 0.1)
    nominal = _random_nominal(rng)
    camera_pose = nominal.pose.compose(T_body_leftcam)
    obs = form_observation(nominal, camera_pose, rig)
    np.testing.assert_allclose(obs.y, np.zeros(6), atol=1e-12)


def test_full_gain_lands_on_vision():
    vision = Pose(rotation_to_quat(Rotation.from_rotvec((0.3, -0.2, 0.1))), (1.0, 2.0, 3.0))
    offset = Rotation.from_rotvec(np.array([1.0, -0.5, 0.4]) * 1e-3 / np.linalg.norm([1.0, -0.5, 0.4]))
    nominal = NominalState(vision.translation + (0.05, -0.02, 0.01),
                           q=rotation_to_quat(vision.rot * offset))
    obs = form_observation(nominal, vision)
    dx, _ = update(np.zeros(STATE_DIM), np.eye(STATE_DIM), obs.y, obs.G, obs.C, 1e-14 * np.eye(6))
    post = inject_and_reset(nominal, dx)
    np.testing.assert_allclose(post.p, vision.translation, atol=1e-9)
    angle = (quat_to_rotation(post.q).inv() * vision.rot).magnitude()
    assert angle < 1e-8


def test_update_consistent_observation_keeps_error(rng):
    dx = rng.normal(size=STATE_DIM)
    G = observation_matrix()
    out, _ = update(dx, np.eye(STATE_DIM), G @ dx, G, np.eye(6), np.eye(6) * 0.01)
    np.testing.assert_allclose(out, dx, atol=1e-12)


def test_update_with_huge_noise_changes_nothing(rng):
    dx = rng.normal(size=STATE_DIM)
    P = np.eye(STATE_DIM)
    G = observation_matrix()
    out, P_post = update(dx, P, rng.normal(size=6), G, np.eye(6), np.eye(6) * 1e12)
    np.testing.assert_allclose(out, dx, atol=1e-9)
    np.testing.assert_allclose(P_post, P, atol=1e-9)


def test_update_scalar():
    dx, P = update(np.zeros(1), np.array([[2.0]]), np.array([1.0]), np.eye(1), np.eye(1), np.array([[3.0]]))
    assert dx[0] == pytest.approx(0.4)
    assert P[0, 0] == pytest.approx(1.2)


def test_update_singular_innovation():
    with pytest.raises(EstimationError):
        update(np.zeros(STATE_DIM), np.zeros((STATE_DIM, STATE_DIM)), np.zeros(6), observation_matrix(),
               np.eye(6), np.zeros((6, 6)))


def test_inject_zero_is_identity(rng):
    nominal = _random_nominal(rng)
    post = inject_and_reset(nominal, ErrorState.zero())
    np.testing.assert_allclose(post.p, nominal.p)
    np.testing.assert_allclose(post.R, nominal.R, atol=1e-12)


def test_inject_subtracts_error(rng):
    nominal = _random_nominal(rng)
    dx = np.zeros(STATE_DIM)
    dx[P_IDX] = (0.1, 0.0, 0.0)
    dx[V_IDX] = (0.0, 0.2, 0.0)
    dx[BA_IDX] = (0.01, 0.01, 0.01)
    dx[BW_IDX] = (0.0, 0.0, 0.001)
    post = inject_and_reset(nominal, dx)
    np.testing.assert_allclose(post.p, nominal.p - dx[P_IDX])
    np.testing.assert_allclose(post.v, nominal.v - dx[V_IDX])
    np.testing.assert_allclose(post.b_a, nominal.b_a - dx[BA_IDX])
    np.testing.assert_allclose(post.b_w, nominal.b_w - dx[BW_IDX])


def test_inject_small_rotation(rng):
    nominal = _random_nominal(rng)
    dtheta = np.array([0.4, -0.3, 0.5]) * 1e-3
    dx = np.zeros(STATE_DIM)
    dx[TH_IDX] = dtheta
    post = inject_and_reset(nominal, dx)
    expected = nominal.R @ Rotation.from_rotvec(-dtheta).as_matrix()
    np.testing.assert_allclose(post.R, expected, atol=1e-6)
    assert np.linalg.norm(post.q) == pytest.approx(1.0)


def test_inject_rejects_large_rotation():
    dx = np.zeros(STATE_DIM)
    dx[TH_IDX] = (0.6, 0.0, 0.0)
    with pytest.raises(EstimationError):
        inject_and_reset(NominalState(), dx)


def test_noise_config_validation():
    with pytest.raises(ValueError):
        NoiseConfig(acc_density=0.0)
    assert NoiseConfig().process_noise().shape == (12, 12)
    assert np.all(np.diag(NoiseConfig().initial_covariance()) > 0)


def test_filter_static_propagate_to():
    n = 201
    imu = ImuData(np.arange(n) * T, np.tile((0.0, 0.0, G_NORM), (n, 1)), np.zeros((n, 3)))
    filt = InertialFilter(NominalState(), imu[0], GravityModel())
    trace0 = np.trace(filt.P)
    filt.propagate_to(imu, 0.5025)
    assert filt.t == pytest.approx(0.5025)
    assert filt.propagations == 101
    np.testing.assert_allclose(filt.nominal.p, np.zeros(3), atol=1e-12)
    np.testing.assert_allclose(filt.nominal.v, np.zeros(3), atol=1e-12)
    assert np.trace(filt.P) > trace0
    with pytest.raises(EstimationError):
        filt.propagate_to(imu, 2.0)


def test_filter_update_with_matching_pose():
    filt = InertialFilter(NominalState(p=(0.5, 0.0, 0.0)), _level_sample(1.0), GravityModel())
    trace0 = np.trace(filt.P)
    filt.skip_update()
    obs = filt.update_with_pose(Pose(translation=(0.5, 0.0, 0.0)), 1.0)
    np.testing.assert_allclose(obs.y, np.zeros(6), atol=1e-12)
    np.testing.assert_allclose(filt.nominal.p, (0.5, 0.0, 0.0), atol=1e-12)
    assert np.all(filt.dx == 0.0)
    assert np.trace(filt.P) < trace0
    assert filt.updates == 1


@pytest.mark.slow
def test_covariance_stays_symmetric_psd(rng):
    noise = NoiseConfig()
    Q = noise.process_noise(T)
    R = noise.observation_noise()
    G = observation_matrix()
    nominal = NominalState()
    dx, P = np.zeros(STATE_DIM), noise.initial_covariance()
    for k in range(100_000):
        sample = ImuSample(k * T, rng.normal(size=3) + (0.0, 0.0, G_NORM), rng.normal(scale=0.5, size=3))
        F_t, _ = continuous_jacobians(nominal, sample)
        F, B = discretize(F_t, nominal.R, T)
        dx, P = propagate(dx, P, F, B, Q)
        if k % 10 == 9:
            dx, P = update(dx, P, G @ dx, G, np.eye(6), R)
        if k % 1000 == 999:
            assert np.array_equal(P, P.T)
            assert np.linalg.eigvalsh(P).min() >= -1e-12 * np.abs(P).max()


@pytest.mark.slow
def test_pose_error_is_consistent():
    """Average normalized pose error over many runs stays inside its chi-square band."""
    rng = np.random.default_rng(42)
    runs, steps = 500, 200
    noise = NoiseConfig()
    F_t, _ = continuous_jacobians(NominalState(), _level_sample())
    F, B = discretize(F_t, np.eye(3), T)
    Q = noise.process_noise(T)
    R = noise.observation_noise()
    P = noise.initial_covariance()
    G = observation_matrix()
    sqrt_Q, sqrt_R = np.sqrt(Q), np.sqrt(R)

    truth = np.linalg.cholesky(P) @ rng.normal(size=(STATE_DIM, runs))
    dx = np.zeros((STATE_DIM, runs))
    low = chi2.ppf(0.0025, 6 * runs) / runs
    high = chi2.ppf(0.9975, 6 * runs) / runs
    inside = 0
    for k in range(steps):
        truth = F @ truth + B @ (sqrt_Q @ rng.normal(size=(12, runs)))
        dx, P = propagate(dx, P, F, B, Q)
        if k % 10 == 9:
            y = G @ truth + sqrt_R @ rng.normal(size=(6, runs))
            dx, P = update(dx, P, y, G, np.eye(6), R)
        e = (truth - dx)[POSE_IDX]
        nees = np.sum(e * np.linalg.solve(P[np.ix_(POSE_IDX, POSE_IDX)], e), axis=0)
        inside += low <= nees.mean() <= high
    assert inside >= 0.9 * steps
