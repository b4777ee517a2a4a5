"""Pose tracking by aligning the semi-dense map with the current time-surface negative.

The unknown is a twist ``psi`` with ``exp_map(psi)`` = current-from-reference.
Map pixels are warped into the current image, where the negative is close to 0
on recent edges; the cost is the sum of squared sampled values.
"""

import logging
from dataclasses import dataclass, field
from typing import Tuple, Union

import cv2
import numpy as np

import config
from core.depth_mapper import SemiDenseMap
from core.errors import InsufficientMapError, TrackingLostError
from core.events import TimeSurface, sample_bilinear
from core.geometry import PinholeCamera, Pose, Twist, back_project_points, exp_map, log_map, se3_left_jacobian

logger = logging.getLogger(__name__)

SATURATION = 255.0


@dataclass(frozen=True)
class TrackingConfig:
    max_iterations: int = config.TRACKING_MAX_ITERATIONS
    step_tolerance: float = config.TRACKING_STEP_TOLERANCE
    initial_damping: float = config.TRACKING_INITIAL_DAMPING
    max_damping: float = config.TRACKING_MAX_DAMPING
    min_map_points: int = config.TRACKING_MIN_MAP_POINTS
    max_map_points: int = config.TRACKING_MAX_MAP_POINTS
    min_inlier_fraction: float = config.TRACKING_MIN_INLIER_FRACTION
    max_rms_residual: float = config.TRACKING_MAX_RMS_RESIDUAL
    blur_sigma: float = config.TRACKING_BLUR_SIGMA
    image_gradient: str = config.TRACKING_IMAGE_GRADIENT

    def __post_init__(self):
        if self.image_gradient not in ('bilinear', 'central'):
            raise ValueError(f"Unknown image gradient '{self.image_gradient}'")
        if self.max_iterations < 1 or self.initial_damping <= 0:
            raise ValueError("Invalid solver settings")


@dataclass(frozen=True, eq=False)
class TrackingProblem:
    """Map snapshot, current time-surface negative and initial twist.

    ``ts_negative`` may be a :class:`TimeSurface` (with ``negative`` set) or a
    float image of the same size as ``cam``.
    """

    depth_map: SemiDenseMap
    ts_negative: Union[TimeSurface, np.ndarray]
    cam: PinholeCamera
    psi0: Twist = field(default_factory=lambda: np.zeros(6))
    config: TrackingConfig = TrackingConfig()

    def __post_init__(self):
        if isinstance(self.ts_negative, TimeSurface):
            if not self.ts_negative.negative:
                raise ValueError("Tracking needs the time-surface negative")
            image = self.ts_negative.values.astype(np.float64)
        else:
            image = np.asarray(self.ts_negative, dtype=np.float64)
        if image.shape != (self.cam.height, self.cam.width):
            raise ValueError(f"Image of shape {image.shape} does not match the {self.cam.width}x{self.cam.height} camera")
        if self.config.blur_sigma > 0:
            image = cv2.GaussianBlur(image, (0, 0), self.config.blur_sigma, borderType=cv2.BORDER_REPLICATE)

        uv, rho, _, _ = self.depth_map.arrays()
        if len(rho) > self.config.max_map_points:
            stride = int(np.ceil(len(rho) / self.config.max_map_points))
            uv, rho = uv[::stride], rho[::stride]
        points = back_project_points(self.cam, uv, rho) if len(rho) else np.zeros((0, 3))

        object.__setattr__(self, 'psi0', np.asarray(self.psi0, dtype=np.float64).reshape(6))
        object.__setattr__(self, 'image', image)
        object.__setattr__(self, 'points', points)
        if self.config.image_gradient == 'central':
            kernel = np.array([[-0.5, 0.0, 0.5]])
            object.__setattr__(self, 'grad_x', cv2.filter2D(image, -1, kernel, borderType=cv2.BORDER_REPLICATE))
            object.__setattr__(self, 'grad_y', cv2.filter2D(image, -1, kernel.T, borderType=cv2.BORDER_REPLICATE))

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True, eq=False)
class TrackingResult:
    psi: Twist
    pose: Pose  # world-from-current camera
    cost: float
    initial_cost: float
    iterations: int
    inlier_fraction: float


def initial_twist(T_w_ref: Pose, T_w_cur: Pose) -> Twist:
    """Twist whose exponential is current-from-reference for a predicted current pose."""
    return log_map(T_w_cur.inverse().compose(T_w_ref))


def _evaluate(problem: TrackingProblem, psi: Twist, with_jacobian: bool):
    n = len(problem)
    if n == 0:
        return (0.0, np.zeros(6), np.zeros((6, 6)), 0) if with_jacobian else (0.0, 0)

    P = exp_map(psi).transform(problem.points)
    Z = P[:, 2]
    in_front = Z > 0
    safe_z = np.where(in_front, Z, 1.0)
    u = np.where(in_front, problem.cam.fx * P[:, 0] / safe_z + problem.cam.cx, np.nan)
    v = np.where(in_front, problem.cam.fy * P[:, 1] / safe_z + problem.cam.cy, np.nan)

    if with_jacobian and problem.config.image_gradient == 'bilinear':
        r, gx, gy, valid = sample_bilinear(problem.image, u, v, with_gradient=True)
    else:
        r, valid = sample_bilinear(problem.image, u, v)
    n_in = int(valid.sum())
    cost = float((r[valid] ** 2).sum()) + (n - n_in) * SATURATION ** 2
    if not with_jacobian:
        return cost, n_in

    if problem.config.image_gradient == 'central':
        gx, _ = sample_bilinear(problem.grad_x, u, v)
        gy, _ = sample_bilinear(problem.grad_y, u, v)

    Pv = P[valid]
    zv = Pv[:, 2]
    fx, fy = problem.cam.fx, problem.cam.fy
    gxv, gyv, rv = gx[valid], gy[valid], r[valid]
    # derivative of the sampled value with respect to the warped point
    dr_dP = np.column_stack([
        gxv * fx / zv,
        gyv * fy / zv,
        -(gxv * fx * Pv[:, 0] + gyv * fy * Pv[:, 1]) / zv ** 2,
    ])
    # left perturbation: dP = d_rho + d_phi x P
    J = np.hstack([dr_dP, np.cross(Pv, dr_dP)]) @ se3_left_jacobian(psi)
    grad = 2.0 * J.T @ rv
    H = 2.0 * J.T @ J
    return cost, grad, H, n_in


def tracking_cost(problem: TrackingProblem, psi: Twist) -> float:
    """Sum of squared sampled negative values; pixels warped outside add a saturation penalty."""
    return _evaluate(problem, np.asarray(psi, dtype=np.float64), False)[0]


def tracking_gradient(problem: TrackingProblem, psi: Twist) -> Tuple[np.ndarray, np.ndarray]:
    """Gradient of :func:`tracking_cost` and its Gauss-Newton Hessian approximation."""
    _, grad, H, _ = _evaluate(problem, np.asarray(psi, dtype=np.float64), True)
    return grad, H


def track(problem: TrackingProblem) -> TrackingResult:
    """Levenberg-Marquardt alignment of the map with the time-surface negative.

    Raises:
        InsufficientMapError: fewer map points than ``min_map_points``.
        TrackingLostError: the solver diverges at maximum damping, too few points stay in the
            image or the residual stays high.
    """
    cfg = problem.config
    n = len(problem)
    if n < cfg.min_map_points:
        raise InsufficientMapError(f"Map has {n} points, tracking needs {cfg.min_map_points}")

    psi = problem.psi0.copy()
    cost, grad, H, n_in = _evaluate(problem, psi, True)
    initial_cost = cost
    damping = cfg.initial_damping
    iterations = 0

    for _ in range(cfg.max_iterations):
        A = H + damping * np.diag(np.maximum(np.diag(H), 1e-9))
        try:
            delta = np.linalg.solve(A, -grad)
        except np.linalg.LinAlgError:
            delta = np.zeros(6)
        if np.linalg.norm(delta) < cfg.step_tolerance:
            break
        candidate = psi + delta
        new_cost, _ = _evaluate(problem, candidate, False)
        if new_cost < cost:
            psi = candidate
            cost, grad, H, n_in = _evaluate(problem, psi, True)
            damping /= 10.0
            iterations += 1
        else:
            damping *= 10.0
            if damping > cfg.max_damping:
                raise TrackingLostError(f"Cost still rises at damping {cfg.max_damping:g} "
                                        f"(cost {cost:.1f}, step {np.linalg.norm(delta):.2e})")

    inlier_fraction = n_in / n
    rms = np.sqrt(cost / n)
    logger.debug(f"Tracking: cost {initial_cost:.1f} -> {cost:.1f} in {iterations} steps, "
                 f"inliers {inlier_fraction:.2f}, rms {rms:.1f}")
    if inlier_fraction < cfg.min_inlier_fraction:
        raise TrackingLostError(f"Only {inlier_fraction:.0%} of map points stay in the image")
    if not np.isfinite(cost) or rms > cfg.max_rms_residual:
        raise TrackingLostError(f"Alignment residual too high (rms {rms:.1f})")

    pose = problem.depth_map.T_w_ref.compose(exp_map(psi).inverse())
    return TrackingResult(psi, pose, cost, initial_cost, iterations, inlier_fraction)
