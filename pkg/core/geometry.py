"""Pinhole cameras, rigid-body poses and the SE(3) tools shared by mapping and tracking.

Conventions:
    - Quaternions are stored scalar-first (w, x, y, z).
    - A ``Pose`` named ``T_a_b`` maps points from frame b into frame a:
      ``P_a = R @ P_b + t``.
    - A twist is a 6-vector ``(rho, phi)``: translation part first, rotation part last.
"""

from dataclasses import dataclass, field
from typing import Tuple

import numpy as np
from scipy.spatial.transform import Rotation, Slerp

Twist = np.ndarray

_SERIES_THRESHOLD = 1e-2


def quat_to_rotation(q) -> Rotation:
    """Build a scipy rotation from a (w, x, y, z) quaternion."""
    q = np.asarray(q, dtype=np.float64)
    return Rotation.from_quat(q[..., [1, 2, 3, 0]])


def rotation_to_quat(rot: Rotation) -> np.ndarray:
    """Return the (w, x, y, z) quaternion of a scipy rotation."""
    return rot.as_quat()[..., [3, 0, 1, 2]]


def quat_multiply(q1, q2) -> np.ndarray:
    """Hamilton product of two (w, x, y, z) quaternions."""
    w1, x1, y1, z1 = q1
    w2, x2, y2, z2 = q2
    return np.array([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ])


def skew(v) -> np.ndarray:
    """Cross-product matrix, ``skew(a) @ b == cross(a, b)``."""
    x, y, z = v
    return np.array([
        [0.0, -z, y],
        [z, 0.0, -x],
        [-y, x, 0.0],
    ])


@dataclass(frozen=True)
class PinholeCamera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"Focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(f"Principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image")

    @property
    def K(self) -> np.ndarray:
        return np.array([
            [self.fx, 0.0, self.cx],
            [0.0, self.fy, self.cy],
            [0.0, 0.0, 1.0],
        ])

    def contains(self, uv, margin: float = 0.0) -> np.ndarray:
        """Whether continuous pixel coordinates fall inside the image (minus a margin)."""
        uv = np.asarray(uv, dtype=np.float64)
        u, v = uv[..., 0], uv[..., 1]
        return (
            (u >= margin) & (u <= self.width - 1 - margin)
            & (v >= margin) & (v <= self.height - 1 - margin)
        )


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform with a unit quaternion (w, x, y, z) and a translation in meters."""

    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        norm = np.linalg.norm(q)
        if not np.isfinite(norm) or norm == 0.0:
            raise ValueError(f"Invalid quaternion {q}")
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, 'rotation', q / norm)
        object.__setattr__(self, 'translation', t.copy())

    @classmethod
    def identity(cls) -> 'Pose':
        return cls()

    @classmethod
    def from_rotation(cls, rot: Rotation, translation=(0.0, 0.0, 0.0)) -> 'Pose':
        return cls(rotation_to_quat(rot), np.asarray(translation, dtype=np.float64))

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> 'Pose':
        matrix = np.asarray(matrix, dtype=np.float64)
        return cls.from_rotation(Rotation.from_matrix(matrix[:3, :3]), matrix[:3, 3])

    @property
    def rot(self) -> Rotation:
        return quat_to_rotation(self.rotation)

    @property
    def R(self) -> np.ndarray:
        return self.rot.as_matrix()

    def as_matrix(self) -> np.ndarray:
        matrix = np.eye(4)
        matrix[:3, :3] = self.R
        matrix[:3, 3] = self.translation
        return matrix

    def compose(self, other: 'Pose') -> 'Pose':
        """Return ``self ∘ other`` (apply ``other`` first)."""
        rot = self.rot
        return Pose.from_rotation(rot * other.rot, rot.apply(other.translation) + self.translation)

    def __matmul__(self, other: 'Pose') -> 'Pose':
        return self.compose(other)

    def inverse(self) -> 'Pose':
        inv = self.rot.inv()
        return Pose.from_rotation(inv, -inv.apply(self.translation))

    def transform(self, points) -> np.ndarray:
        """Apply the pose to one point (3,) or an array of points (N, 3)."""
        return self.rot.apply(np.asarray(points, dtype=np.float64)) + self.translation

    def __repr__(self):
        q = np.array2string(self.rotation, precision=6)
        t = np.array2string(self.translation, precision=6)
        return f"Pose(q={q}, t={t})"


@dataclass(frozen=True, eq=False)
class StereoRig:
    """Rectified stereo pair; the left camera is the reference."""

    left: PinholeCamera
    right: PinholeCamera
    T_right_left: Pose
    T_body_leftcam: Pose
    baseline: float

    def __post_init__(self):
        if self.baseline < 0:
            raise ValueError(f"Baseline must be non-negative, got {self.baseline}")
        norm = float(np.linalg.norm(self.T_right_left.translation))
        if abs(norm - self.baseline) > 1e-3 * max(1.0, self.baseline):
            raise ValueError(f"T_right_left translation norm {norm:.6f} does not match baseline {self.baseline:.6f}")


def so3_left_jacobian(phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=np.float64)
    theta = np.linalg.norm(phi)
    Phi = skew(phi)
    if theta < _SERIES_THRESHOLD:
        t2 = theta * theta
        a = 0.5 - t2 / 24.0 + t2 * t2 / 720.0
        b = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0
    else:
        a = (1.0 - np.cos(theta)) / theta ** 2
        b = (theta - np.sin(theta)) / theta ** 3
    return np.eye(3) + a * Phi + b * Phi @ Phi


def _se3_coupling(rho, phi) -> np.ndarray:
    theta = np.linalg.norm(phi)
    P = skew(phi)
    Rh = skew(rho)
    if theta < _SERIES_THRESHOLD:
        t2 = theta * theta
        c1 = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0
        c2 = 1.0 / 24.0 - t2 / 720.0 + t2 * t2 / 40320.0
        c3 = 1.0 / 120.0 - t2 / 2520.0
    else:
        s, c = np.sin(theta), np.cos(theta)
        c1 = (theta - s) / theta ** 3
        c2 = (theta ** 2 + 2.0 * c - 2.0) / (2.0 * theta ** 4)
        c3 = (2.0 * theta - 3.0 * s + theta * c) / (2.0 * theta ** 5)
    PR = P @ Rh
    RP = Rh @ P
    PRP = PR @ P
    PP = P @ P
    return (
        0.5 * Rh
        + c1 * (PR + RP + PRP)
        + c2 * (PP @ Rh + RP @ P - 3.0 * PRP)
        + c3 * (PRP @ P + PP @ Rh @ P)
    )


def se3_left_jacobian(psi: Twist) -> np.ndarray:
    """6x6 left Jacobian: ``exp(psi + d) ≈ exp(J d) ∘ exp(psi)`` for small d."""
    psi = np.asarray(psi, dtype=np.float64)
    rho, phi = psi[:3], psi[3:]
    J = so3_left_jacobian(phi)
    out = np.zeros((6, 6))
    out[:3, :3] = J
    out[3:, 3:] = J
    out[:3, 3:] = _se3_coupling(rho, phi)
    return out


def exp_map(psi: Twist) -> Pose:
    """SE(3) exponential of a twist ``(rho, phi)``."""
    psi = np.asarray(psi, dtype=np.float64).reshape(6)
    rho, phi = psi[:3], psi[3:]
    return Pose.from_rotation(Rotation.from_rotvec(phi), so3_left_jacobian(phi) @ rho)


def log_map(T: Pose) -> Twist:
    """SE(3) logarithm, inverse of :func:`exp_map` for rotation angles below pi."""
    phi = T.rot.as_rotvec()
    rho = np.linalg.solve(so3_left_jacobian(phi), T.translation)
    return np.concatenate([rho, phi])


def transform(T: Pose, P) -> np.ndarray:
    return T.transform(P)


def project(cam: PinholeCamera, P) -> np.ndarray:
    X, Y, Z = np.asarray(P, dtype=np.float64)
    if Z <= 0:
        raise ValueError(f"Cannot project point with non-positive depth Z={Z}")
    return np.array([cam.fx * X / Z + cam.cx, cam.fy * Y / Z + cam.cy])


def project_points(cam: PinholeCamera, points) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorised projection.

    Returns:
        (uv, valid): (N, 2) pixels, NaN where the point is not in front of the camera,
        and the boolean mask of points with positive depth.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    Z = points[:, 2]
    valid = Z > 0
    uv = np.full((len(points), 2), np.nan)
    inv_z = 1.0 / Z[valid]
    uv[valid, 0] = cam.fx * points[valid, 0] * inv_z + cam.cx
    uv[valid, 1] = cam.fy * points[valid, 1] * inv_z + cam.cy
    return uv, valid


def back_project(cam: PinholeCamera, x, rho: float) -> np.ndarray:
    if rho <= 0:
        raise ValueError(f"Inverse depth must be positive, got {rho}")
    u, v = x
    return np.array([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0]) / rho


def back_project_points(cam: PinholeCamera, uv, rho) -> np.ndarray:
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    rho = np.asarray(rho, dtype=np.float64).reshape(-1)
    if np.any(rho <= 0):
        raise ValueError("Inverse depth must be positive")
    bearing = np.column_stack([
        (uv[:, 0] - cam.cx) / cam.fx,
        (uv[:, 1] - cam.cy) / cam.fy,
        np.ones(len(uv)),
    ])
    return bearing / rho[:, None]


def warp(x, rho: float, psi: Twist, cam_ref: PinholeCamera, cam_cur: PinholeCamera) -> np.ndarray:
    """Move a reference pixel with inverse depth into the current camera.

    Raises:
        ValueError: if the transformed point is not in front of ``cam_cur``.
            The result is never clamped; check it with ``cam_cur.contains``.
    """
    P = transform(exp_map(psi), back_project(cam_ref, x, rho))
    if P[2] <= 0:
        raise ValueError("Warped point is behind the camera")
    return project(cam_cur, P)


def warp_points(uv, rho, T_cur_ref: Pose, cam_ref: PinholeCamera, cam_cur: PinholeCamera):
    """Vectorised warp with an explicit pose; returns (uv, in-front mask)."""
    return project_points(cam_cur, T_cur_ref.transform(back_project_points(cam_ref, uv, rho)))


def interpolate_pose(T0: Pose, T1: Pose, s: float) -> Pose:
    """Linear interpolation of translation and spherical interpolation of rotation, ``s`` in [0, 1]."""
    s = float(np.clip(s, 0.0, 1.0))
    key_rots = Rotation.concatenate([T0.rot, T1.rot])
    rot = Slerp([0.0, 1.0], key_rots)([s])[0]
    return Pose.from_rotation(rot, (1.0 - s) * T0.translation + s * T1.translation)
