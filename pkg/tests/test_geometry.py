import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from core.geometry import (PinholeCamera, Pose, StereoRig, back_project, back_project_points, exp_map,
                           interpolate_pose, log_map, project, project_points, se3_left_jacobian,
                           so3_left_jacobian, warp, warp_points)


def _random_twist(rng, max_angle=2.5):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return np.concatenate([rng.normal(scale=0.5, size=3), axis * rng.uniform(0.0, max_angle)])


def test_project_unit_camera():
    cam = PinholeCamera(1.0, 1.0, 0.0, 0.0, 4, 4)
    np.testing.assert_allclose(project(cam, (1.0, 2.0, 2.0)), (0.5, 1.0))


def test_project_optical_axis_hits_principal_point(camera):
    np.testing.assert_allclose(project(camera, (0.0, 0.0, 3.0)), (camera.cx, camera.cy))


def test_project_rejects_zero_depth(camera):
    with pytest.raises(ValueError):
        project(camera, (1.0, 1.0, 0.0))


def test_project_points_flags_points_behind(camera):
    uv, valid = project_points(camera, [[0.0, 0.0, 1.0], [0.0, 0.0, -1.0]])
    assert valid.tolist() == [True, False]
    assert np.isnan(uv[1]).all()


def test_back_project_principal_point(camera):
    np.testing.assert_allclose(back_project(camera, (camera.cx, camera.cy), 0.5), (0.0, 0.0, 2.0))


def test_back_project_rejects_zero_inverse_depth(camera):
    with pytest.raises(ValueError):
        back_project(camera, (10.0, 10.0), 0.0)


def test_project_back_project_round_trip(camera, rng):
    uv = np.column_stack([rng.uniform(0, camera.width - 1, 500), rng.uniform(0, camera.height - 1, 500)])
    rho = rng.uniform(0.1, 2.0, 500)
    back, valid = project_points(camera, back_project_points(camera, uv, rho))
    assert valid.all()
    assert np.max(np.abs(back - uv)) < 1e-12


def test_exp_map_zero_is_identity():
    T = exp_map(np.zeros(6))
    np.testing.assert_allclose(T.rotation, (1.0, 0.0, 0.0, 0.0))
    np.testing.assert_allclose(T.translation, np.zeros(3))


def test_exp_map_pure_yaw():
    T = exp_map((0.0, 0.0, 0.0, 0.0, 0.0, np.pi / 2))
    np.testing.assert_allclose(T.rotation, (np.sqrt(0.5), 0.0, 0.0, np.sqrt(0.5)), atol=1e-12)
    np.testing.assert_allclose(T.translation, np.zeros(3), atol=1e-15)


def test_exp_log_round_trip(rng):
    for _ in range(200):
        psi = _random_twist(rng, np.pi - 0.1)
        assert np.linalg.norm(log_map(exp_map(psi)) - psi) < 1e-9


def test_exp_log_round_trip_small_angles(rng):
    for scale in (1e-9, 1e-5, 1e-3, 5e-3, 2e-2):
        psi = rng.normal(size=6) * scale
        assert np.linalg.norm(log_map(exp_map(psi)) - psi) < 1e-9


def test_transform_cases():
    P = np.array([0.3, -1.2, 2.0])
    np.testing.assert_allclose(Pose.identity().transform(P), P)
    np.testing.assert_allclose(Pose(translation=(1.0, 0.0, 0.0)).transform(np.zeros(3)), (1.0, 0.0, 0.0))


def test_compose_with_inverse(rng):
    T = exp_map(_random_twist(rng))
    P = rng.normal(size=(20, 3))
    assert np.max(np.abs(T.compose(T.inverse()).transform(P) - P)) < 1e-12
    assert np.max(np.abs((T.inverse() @ T).transform(P) - P)) < 1e-12


def test_compose_matches_matrix_product(rng):
    A = exp_map(_random_twist(rng))
    B = exp_map(_random_twist(rng))
    np.testing.assert_allclose((A @ B).as_matrix(), A.as_matrix() @ B.as_matrix(), atol=1e-12)


def test_pose_normalizes_quaternion():
    T = Pose((2.0, 0.0, 0.0, 0.0))
    np.testing.assert_allclose(T.rotation, (1.0, 0.0, 0.0, 0.0))
    with pytest.raises(ValueError):
        Pose((0.0, 0.0, 0.0, 0.0))


def test_warp_identity(camera):
    x = np.array([100.25, 57.5])
    np.testing.assert_allclose(warp(x, 0.7, np.zeros(6), camera, camera), x, rtol=0, atol=1e-12)


def test_warp_depth_change_scales_radius(camera):
    # T_cur_ref = exp(psi): a positive z translation pushes points away from the current camera
    x = np.array([250.0, 200.0])
    principal = np.array([camera.cx, camera.cy])
    farther = warp(x, 0.5, (0.0, 0.0, 0.5, 0.0, 0.0, 0.0), camera, camera)
    nearer = warp(x, 0.5, (0.0, 0.0, -0.5, 0.0, 0.0, 0.0), camera, camera)
    assert np.linalg.norm(farther - principal) < np.linalg.norm(x - principal)
    assert np.linalg.norm(nearer - principal) > np.linalg.norm(x - principal)
    np.testing.assert_allclose(farther - principal, (x - principal) * 2.0 / 2.5)


def test_warp_out_of_bounds_is_not_clamped(camera):
    out = warp((340.0, 130.0), 0.5, (1.0, 0.0, 0.0, 0.0, 0.0, 0.0), camera, camera)
    assert out[0] > camera.width
    assert not camera.contains(out)


def test_warp_behind_camera_raises(camera):
    with pytest.raises(ValueError):
        warp((camera.cx, camera.cy), 0.5, (0.0, 0.0, -3.0, 0.0, 0.0, 0.0), camera, camera)


def test_warp_points_matches_scalar_warp(camera, rng):
    psi = _random_twist(rng, 0.1) * 0.2
    uv = np.column_stack([rng.uniform(50, 300, 30), rng.uniform(50, 200, 30)])
    rho = rng.uniform(0.3, 1.0, 30)
    out, valid = warp_points(uv, rho, exp_map(psi), camera, camera)
    assert valid.all()
    for i in range(len(uv)):
        np.testing.assert_allclose(out[i], warp(uv[i], rho[i], psi, camera, camera), atol=1e-10)


def test_so3_left_jacobian_matches_finite_difference(rng):
    phi = rng.normal(size=3)
    eps = 1e-6
    J = so3_left_jacobian(phi)
    R = Rotation.from_rotvec(phi)
    for k in range(3):
        d = np.zeros(3)
        d[k] = eps
        delta = (Rotation.from_rotvec(phi + d) * R.inv()).as_rotvec() / eps
        np.testing.assert_allclose(delta, J[:, k], atol=1e-5)


def test_se3_left_jacobian_matches_finite_difference(rng):
    psi = _random_twist(rng, 1.5)
    eps = 1e-6
    J = se3_left_jacobian(psi)
    T = exp_map(psi)
    for k in range(6):
        d = np.zeros(6)
        d[k] = eps
        delta = log_map(exp_map(psi + d) @ T.inverse()) / eps
        np.testing.assert_allclose(delta, J[:, k], atol=1e-5)


def test_interpolate_pose_endpoints_and_midpoint():
    T0 = Pose.identity()
    T1 = exp_map((1.0, 0.0, 0.0, 0.0, 0.0, 0.4))
    np.testing.assert_allclose(interpolate_pose(T0, T1, 0.0).as_matrix(), T0.as_matrix(), atol=1e-12)
    np.testing.assert_allclose(interpolate_pose(T0, T1, 1.0).as_matrix(), T1.as_matrix(), atol=1e-12)
    mid = interpolate_pose(T0, T1, 0.5)
    np.testing.assert_allclose(mid.rot.as_rotvec(), (0.0, 0.0, 0.2), atol=1e-12)
    np.testing.assert_allclose(mid.translation, 0.5 * T1.translation, atol=1e-12)


def test_stereo_rig_checks_baseline(camera):
    StereoRig(camera, camera, Pose(translation=(-0.1, 0.0, 0.0)), Pose.identity(), 0.1)
    with pytest.raises(ValueError):
        StereoRig(camera, camera, Pose(translation=(-0.2, 0.0, 0.0)), Pose.identity(), 0.1)


def test_camera_validation():
    with pytest.raises(ValueError):
        PinholeCamera(0.0, 1.0, 1.0, 1.0, 4, 4)
    with pytest.raises(ValueError):
        PinholeCamera(1.0, 1.0, 10.0, 1.0, 4, 4)
