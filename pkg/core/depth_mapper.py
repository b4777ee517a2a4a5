"""Semi-dense inverse-depth mapping from a stereo pair of time-surfaces.

Per-event depth comes from minimising the temporal difference between the two
time-surfaces along the stereo correspondence of the event pixel; estimates are
fused per pixel into a map attached to a reference left-camera pose.
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from types import MappingProxyType
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import cv2
import numpy as np
from scipy.spatial.transform import Rotation, Slerp

import config
from core.errors import MapNotReadyError
from core.events import Event, TimeSurface, sample_bilinear
from core.geometry import PinholeCamera, Pose, StereoRig, back_project_points, interpolate_pose, project_points

logger = logging.getLogger(__name__)

PixelKey = Tuple[int, int]


class EstimateFlag(Enum):
    SUCCESS = 0
    OUT_OF_BOUNDS = 1
    FLAT_COST = 2
    NOT_CONVERGED = 3
    OUT_OF_RANGE = 4


@dataclass(frozen=True)
class MappingConfig:
    patch_half_width: int = config.MAPPING_PATCH_HALF_WIDTH
    window: float = config.MAPPING_WINDOW
    rho_min: float = config.MAPPING_RHO_MIN
    rho_max: float = config.MAPPING_RHO_MAX
    grid_size: int = config.MAPPING_GRID_SIZE
    gn_iterations: int = config.MAPPING_GN_ITERATIONS
    gn_tolerance: float = config.MAPPING_GN_TOLERANCE
    min_curvature: float = config.MAPPING_MIN_CURVATURE
    min_activity: float = config.MAPPING_MIN_ACTIVITY
    fusion_gate: float = config.MAPPING_FUSION_GATE
    variance_inflation: float = config.MAPPING_VARIANCE_INFLATION
    max_age: float = config.MAPPING_MAX_AGE
    max_events_per_cycle: int = config.MAPPING_MAX_EVENTS_PER_CYCLE
    init_method: str = config.MAPPING_INIT_METHOD
    init_threshold: int = config.MAPPING_INIT_THRESHOLD
    init_min_pixels: int = config.MAPPING_INIT_MIN_PIXELS
    init_block_half_width: int = config.MAPPING_INIT_BLOCK_HALF_WIDTH
    init_disparity_sigma: float = config.MAPPING_INIT_DISPARITY_SIGMA
    init_max_disparity_diff: int = config.MAPPING_INIT_MAX_DISPARITY_DIFF
    min_correlation_spread: float = config.MAPPING_MIN_CORRELATION_SPREAD

    def __post_init__(self):
        if self.patch_half_width < 1:
            raise ValueError(f"Patch half-width must be >= 1, got {self.patch_half_width}")
        if self.window <= 0:
            raise ValueError(f"Event window must be positive, got {self.window}")
        if not 0 < self.rho_min < self.rho_max:
            raise ValueError(f"Invalid inverse depth range [{self.rho_min}, {self.rho_max}]")
        if self.grid_size < 2:
            raise ValueError("Inverse depth grid needs at least two candidates")
        if self.init_method not in ('block', 'sgbm'):
            raise ValueError(f"Unknown initialization method '{self.init_method}'")
        if self.variance_inflation < 1.0:
            raise ValueError("Variance inflation factor must be >= 1")

    @property
    def rho_grid(self) -> np.ndarray:
        return np.linspace(self.rho_min, self.rho_max, self.grid_size)


@dataclass(frozen=True, eq=False)
class InverseDepthEstimate:
    x: np.ndarray
    rho: float
    sigma2: float
    t: float

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError(f"Inverse depth must be positive, got {self.rho}")
        if not self.sigma2 > 0:
            raise ValueError(f"Variance must be positive, got {self.sigma2}")
        object.__setattr__(self, 'x', np.asarray(self.x, dtype=np.float64).reshape(2))

    @property
    def key(self) -> PixelKey:
        return pixel_key(self.x)


def pixel_key(x) -> PixelKey:
    return int(math.floor(x[0] + 0.5)), int(math.floor(x[1] + 0.5))


class SemiDenseMap:
    """Inverse-depth estimates on edge pixels of one reference left-camera frame.

    Treated as an immutable snapshot: fusion builds a new map.
    """

    def __init__(self, T_w_ref: Pose, t_ref: float,
                 estimates: Optional[Dict[PixelKey, InverseDepthEstimate]] = None):
        self.T_w_ref = T_w_ref
        self.t_ref = t_ref
        self._estimates = dict(estimates or {})
        self._arrays = None

    @classmethod
    def from_estimates(cls, T_w_ref: Pose, t_ref: float,
                       estimates: Iterable[InverseDepthEstimate]) -> 'SemiDenseMap':
        return cls(T_w_ref, t_ref, {e.key: e for e in estimates})

    @property
    def estimates(self):
        return MappingProxyType(self._estimates)

    def __len__(self) -> int:
        return len(self._estimates)

    def __iter__(self):
        return iter(self._estimates.values())

    def arrays(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """(uv (N, 2), rho (N,), sigma2 (N,), t (N,)) in a fixed pixel order."""
        if self._arrays is None:
            keys = sorted(self._estimates)
            ests = [self._estimates[k] for k in keys]
            self._arrays = (
                np.array([e.x for e in ests], dtype=np.float64).reshape(-1, 2),
                np.array([e.rho for e in ests], dtype=np.float64),
                np.array([e.sigma2 for e in ests], dtype=np.float64),
                np.array([e.t for e in ests], dtype=np.float64),
            )
        return self._arrays

    def points_world(self, cam: PinholeCamera) -> np.ndarray:
        uv, rho, _, _ = self.arrays()
        if len(rho) == 0:
            return np.zeros((0, 3))
        return self.T_w_ref.transform(back_project_points(cam, uv, rho))


@dataclass(frozen=True, eq=False)
class PoseWindow:
    """Left-camera poses at both ends of the mapping window; poses in between are interpolated."""

    t0: float
    T_w_c0: Pose
    t1: float
    T_w_c1: Pose

    def pose_at(self, t: float) -> Pose:
        if self.t1 <= self.t0:
            return self.T_w_c1
        return interpolate_pose(self.T_w_c0, self.T_w_c1, (t - self.t0) / (self.t1 - self.t0))

    def cur_from_event(self, times: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Rotations (N, 3, 3) and translations (N, 3) mapping camera-at-event into camera-at-t1."""
        times = np.asarray(times, dtype=np.float64)
        if self.t1 <= self.t0:
            return np.tile(np.eye(3), (len(times), 1, 1)), np.zeros((len(times), 3))
        s = np.clip((times - self.t0) / (self.t1 - self.t0), 0.0, 1.0)
        slerp = Slerp([0.0, 1.0], Rotation.concatenate([self.T_w_c0.rot, self.T_w_c1.rot]))
        R_w_e = slerp(s).as_matrix()
        t_w_e = (1.0 - s)[:, None] * self.T_w_c0.translation + s[:, None] * self.T_w_c1.translation
        R_1 = self.T_w_c1.R
        R = np.einsum('ji,njk->nik', R_1, R_w_e)
        t = (t_w_e - self.T_w_c1.translation) @ R_1
        return R, t


def _patch_offsets(half_width: int) -> np.ndarray:
    r = np.arange(-half_width, half_width + 1, dtype=np.float64)
    du, dv = np.meshgrid(r, r)
    return np.column_stack([du.ravel(), dv.ravel()])


def _bearings(cam: PinholeCamera, uv: np.ndarray) -> np.ndarray:
    return np.column_stack([(uv[:, 0] - cam.cx) / cam.fx, (uv[:, 1] - cam.cy) / cam.fy, np.ones(len(uv))])


def _correspondences(bearing: np.ndarray, rho: np.ndarray, R: np.ndarray, t: np.ndarray, rig: StereoRig):
    """Left and right pixels at the render time for events with candidate inverse depths.

    Args:
        bearing: (N, 3) normalised rays of the event pixels.
        rho: (N, G) inverse-depth candidates.
        R, t: per-event motion from the camera at event time to the camera at render time.

    Returns:
        (x1, x2, in_front): (N, G, 2) left and right pixels and the (N, G) positive-depth mask.
    """
    rotated = np.einsum('nij,nj->ni', R, bearing)
    P = rotated[:, None, :] / rho[..., None] + t[:, None, :]
    P_right = rig.T_right_left.transform(P.reshape(-1, 3)).reshape(P.shape)
    in_front = (P[..., 2] > 0) & (P_right[..., 2] > 0)
    x1, _ = project_points(rig.left, P.reshape(-1, 3))
    x2, _ = project_points(rig.right, P_right.reshape(-1, 3))
    return x1.reshape(P.shape[:-1] + (2,)), x2.reshape(P.shape[:-1] + (2,)), in_front


def _patch_residuals(x1: np.ndarray, x2: np.ndarray, in_front: np.ndarray, left: np.ndarray,
                     right: np.ndarray, offsets: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Residuals (..., P) of the two patches and the mask of fully-inside patches."""
    c1 = x1[..., None, :] + offsets
    c2 = x2[..., None, :] + offsets
    v1, ok1 = sample_bilinear(left, c1[..., 0], c1[..., 1])
    v2, ok2 = sample_bilinear(right, c2[..., 0], c2[..., 1])
    valid = ok1.all(axis=-1) & ok2.all(axis=-1) & in_front
    return v1 - v2, valid


def residual(x, rho: float, ts_left: TimeSurface, ts_right: TimeSurface, T_cur_event: Pose,
             rig: StereoRig, half_width: int = config.MAPPING_PATCH_HALF_WIDTH) -> Optional[np.ndarray]:
    """Temporal difference between the two time-surfaces over the patch of one event.

    Args:
        x: event pixel in the left camera at event time.
        rho: inverse depth of the event in that camera.
        T_cur_event: left camera at render time from left camera at event time.

    Returns:
        The ((2h+1)^2,) residual vector, or None if a patch leaves either image.
    """
    bearing = _bearings(rig.left, np.asarray(x, dtype=np.float64).reshape(1, 2))
    x1, x2, in_front = _correspondences(bearing, np.array([[rho]], dtype=np.float64),
                                        T_cur_event.R[None], T_cur_event.translation[None], rig)
    r, valid = _patch_residuals(x1, x2, in_front, ts_left.values, ts_right.values, _patch_offsets(half_width))
    if not valid[0, 0]:
        return None
    return r[0, 0]


def estimate_inverse_depths(t: np.ndarray, x: np.ndarray, y: np.ndarray, ts_left: TimeSurface,
                            ts_right: TimeSurface, window: PoseWindow, rig: StereoRig,
                            cfg: MappingConfig = MappingConfig()
                            ) -> Tuple[List[Optional[InverseDepthEstimate]], np.ndarray]:
    """Batched per-event inverse depth: coarse grid search, then Gauss-Newton on rho.

    The returned estimates are expressed in the left camera at ``window.t1`` (the
    render time of both time-surfaces).

    Returns:
        (estimates, flags): one entry per event, ``None`` where the flag is not SUCCESS.
    """
    t = np.asarray(t, dtype=np.float64)
    n = len(t)
    flags = np.full(n, EstimateFlag.SUCCESS, dtype=object)
    if n == 0:
        return [], flags
    if np.any(t < window.t0 - 1e-9) or np.any(t > window.t1 + 1e-9):
        raise ValueError("Events must lie inside the pose window")

    left = ts_left.values.astype(np.float64)
    right = ts_right.values.astype(np.float64)
    offsets = _patch_offsets(cfg.patch_half_width)
    n_patch = len(offsets)
    uv = np.column_stack([x, y]).astype(np.float64)
    bearing = _bearings(rig.left, uv)
    R, tr = window.cur_from_event(t)

    def evaluate(rho):
        x1, x2, in_front = _correspondences(bearing, rho, R, tr, rig)
        r, valid = _patch_residuals(x1, x2, in_front, left, right, offsets)
        return r, valid, x1

    # coarse search over the inverse depth grid
    grid = np.broadcast_to(cfg.rho_grid, (n, cfg.grid_size))
    r_grid, valid_grid, x1_grid = evaluate(grid)
    cost_grid = np.where(valid_grid, (r_grid ** 2).sum(axis=-1), np.inf)
    n_valid = valid_grid.sum(axis=1)
    best = np.argmin(cost_grid, axis=1)
    rows = np.arange(n)
    rho = grid[rows, best].copy()
    cost = cost_grid[rows, best].copy()

    flags[n_valid == 0] = EstimateFlag.OUT_OF_BOUNDS
    finite_max = np.where(valid_grid, cost_grid, -np.inf).max(axis=1)
    spread = finite_max - cost
    flat = (n_valid > 0) & (spread <= 1e-9 * (1.0 + finite_max))
    left_patch = sample_bilinear(left, x1_grid[rows, best][:, None, 0] + offsets[:, 0],
                                 x1_grid[rows, best][:, None, 1] + offsets[:, 1])[0]
    flat |= (n_valid > 0) & (np.ptp(left_patch, axis=1) < cfg.min_activity)
    flags[flat & (flags == EstimateFlag.SUCCESS)] = EstimateFlag.FLAT_COST

    active = flags == EstimateFlag.SUCCESS
    converged = ~active
    scale = np.ones(n)

    def derivative(rho_now):
        h = np.maximum(1e-6, 1e-4 * rho_now)
        r_plus, ok_plus, _ = evaluate((rho_now + h)[:, None])
        r_minus, ok_minus, _ = evaluate((rho_now - h)[:, None])
        J = (r_plus[:, 0] - r_minus[:, 0]) / (2.0 * h[:, None])
        return J, ok_plus[:, 0] & ok_minus[:, 0]

    for _ in range(cfg.gn_iterations):
        todo = active & ~converged
        if not todo.any():
            break
        r_now, ok_now, _ = evaluate(rho[:, None])
        J, ok_J = derivative(rho)
        JtJ = (J ** 2).sum(axis=1)
        Jtr = (J * r_now[:, 0]).sum(axis=1)
        usable = todo & ok_now[:, 0] & ok_J & (JtJ > 0)
        converged |= todo & ~usable
        step = np.where(usable, -Jtr / np.where(JtJ > 0, JtJ, 1.0), 0.0) * scale
        small = usable & (np.abs(step) < cfg.gn_tolerance)
        converged |= small
        trial = usable & ~small
        rho_new = np.clip(rho + step, cfg.rho_min, cfg.rho_max)
        r_new, ok_new, _ = evaluate(rho_new[:, None])
        cost_new = np.where(ok_new[:, 0], (r_new[:, 0] ** 2).sum(axis=1), np.inf)
        accept = trial & (cost_new < cost)
        rho = np.where(accept, rho_new, rho)
        cost = np.where(accept, cost_new, cost)
        scale = np.where(accept, 1.0, np.where(trial, 0.25 * scale, scale))
        # clipped steps that cannot move further have converged at the bound
        converged |= trial & ~accept & (rho_new == rho)
    flags[active & ~converged] = EstimateFlag.NOT_CONVERGED

    # curvature-based variance at the optimum
    J, ok_J = derivative(rho)
    JtJ = (J ** 2).sum(axis=1)
    ok = flags == EstimateFlag.SUCCESS
    flags[ok & (~ok_J | (JtJ < cfg.min_curvature))] = EstimateFlag.FLAT_COST
    s2 = cost / n_patch
    sigma2 = np.maximum(s2 / np.where(JtJ > 0, JtJ, 1.0), 1e-12)

    # express in the camera at render time
    k = np.einsum('nj,nj->n', R[:, 2, :], bearing)
    denom = k + tr[:, 2] * rho
    with np.errstate(divide='ignore', invalid='ignore'):
        rho_ref = rho / denom
        sigma2_ref = sigma2 * (k / denom ** 2) ** 2
    P_ref = np.einsum('nij,nj->ni', R, bearing) / rho[:, None] + tr
    x_ref, in_front = project_points(rig.left, P_ref)

    estimates: List[Optional[InverseDepthEstimate]] = [None] * n
    for i in np.flatnonzero(flags == EstimateFlag.SUCCESS):
        if not in_front[i] or not rig.left.contains(x_ref[i]):
            flags[i] = EstimateFlag.OUT_OF_BOUNDS
        elif not cfg.rho_min <= rho_ref[i] <= cfg.rho_max:
            flags[i] = EstimateFlag.OUT_OF_RANGE
        else:
            estimates[i] = InverseDepthEstimate(x_ref[i], float(rho_ref[i]), float(sigma2_ref[i]), window.t1)
    return estimates, flags


def estimate_inverse_depth(e: Event, ts_left: TimeSurface, ts_right: TimeSurface, window: PoseWindow,
                           rig: StereoRig, cfg: MappingConfig = MappingConfig()
                           ) -> Tuple[Optional[InverseDepthEstimate], EstimateFlag]:
    """Inverse depth of a single event; see :func:`estimate_inverse_depths`."""
    estimates, flags = estimate_inverse_depths(np.array([e.t]), np.array([e.x]), np.array([e.y]),
                                               ts_left, ts_right, window, rig, cfg)
    return estimates[0], flags[0]


def _merge(a: InverseDepthEstimate, b: InverseDepthEstimate, gate: float) -> InverseDepthEstimate:
    if abs(a.rho - b.rho) <= gate * math.sqrt(a.sigma2 + b.sigma2):
        wa, wb = 1.0 / a.sigma2, 1.0 / b.sigma2
        w = wa + wb
        return InverseDepthEstimate((wa * a.x + wb * b.x) / w, (wa * a.rho + wb * b.rho) / w, 1.0 / w,
                                    max(a.t, b.t))
    return b if b.sigma2 <= a.sigma2 else a


def propagate_map(depth_map: SemiDenseMap, T_w_ref: Pose, t_ref: float, cam: PinholeCamera,
                  cfg: MappingConfig = MappingConfig()) -> Dict[PixelKey, InverseDepthEstimate]:
    """Move every estimate of ``depth_map`` into a new reference frame, pruning stale ones."""
    uv, rho, sigma2, times = depth_map.arrays()
    if len(rho) == 0:
        return {}
    T_new_old = T_w_ref.inverse().compose(depth_map.T_w_ref)
    P = T_new_old.transform(back_project_points(cam, uv, rho))
    x_new, in_front = project_points(cam, P)
    with np.errstate(divide='ignore', invalid='ignore'):
        rho_new = 1.0 / P[:, 2]
    keep = (
        in_front
        & cam.contains(np.nan_to_num(x_new, nan=-1.0))
        & (rho_new >= cfg.rho_min) & (rho_new <= cfg.rho_max)
        & (t_ref - times <= cfg.max_age)
    )
    out: Dict[PixelKey, InverseDepthEstimate] = {}
    for i in np.flatnonzero(keep):
        est = InverseDepthEstimate(x_new[i], float(rho_new[i]), float(sigma2[i] * cfg.variance_inflation),
                                   float(times[i]))
        prev = out.get(est.key)
        out[est.key] = est if prev is None else _merge(prev, est, cfg.fusion_gate)
    return out


def fuse_estimates(depth_map: Optional[SemiDenseMap], fresh: Sequence[InverseDepthEstimate], T_w_ref: Pose,
                   t_ref: float, cam: PinholeCamera, cfg: MappingConfig = MappingConfig()) -> SemiDenseMap:
    """Fuse fresh estimates (already in the new reference frame) into the map.

    Existing estimates are propagated only when the reference frame changes.
    """
    if depth_map is None:
        merged: Dict[PixelKey, InverseDepthEstimate] = {}
    elif depth_map.t_ref == t_ref and np.allclose(depth_map.T_w_ref.as_matrix(), T_w_ref.as_matrix(), atol=1e-12):
        merged = dict(depth_map.estimates)
    else:
        merged = propagate_map(depth_map, T_w_ref, t_ref, cam, cfg)

    for est in fresh:
        if est is None:
            continue
        if not (cfg.rho_min <= est.rho <= cfg.rho_max and cam.contains(est.x)):
            continue
        prev = merged.get(est.key)
        merged[est.key] = est if prev is None else _merge(prev, est, cfg.fusion_gate)
    return SemiDenseMap(T_w_ref, t_ref, merged)


def _block_disparity(left: np.ndarray, right: np.ndarray, max_disparity: int, cfg: MappingConfig):
    """Left-image disparity by SSD block matching with a left-right consistency check.

    Returns:
        (disparity, valid): subpixel disparities and the mask of accepted pixels.
    """
    h, w = left.shape
    bh = cfg.init_block_half_width
    ksize = 2 * bh + 1
    L = left.astype(np.float32)
    R = right.astype(np.float32)
    inf = np.float32(np.inf)

    best = np.full((h, w), inf, np.float32)
    best_d = np.zeros((h, w), np.int32)
    c_minus = np.full((h, w), inf, np.float32)
    c_plus = np.full((h, w), inf, np.float32)
    total = np.zeros((h, w), np.float64)
    count = np.zeros((h, w), np.int32)
    best_r = np.full((h, w), inf, np.float32)
    best_r_d = np.zeros((h, w), np.int32)
    prev = np.full((h, w), inf, np.float32)

    for d in range(max_disparity + 1):
        diff = np.zeros((h, w), np.float32)
        diff[:, d:] = L[:, d:] - R[:, :w - d]
        cost = cv2.boxFilter(diff * diff, -1, (ksize, ksize), normalize=False, borderType=cv2.BORDER_REPLICATE)
        cost[:, :d + bh] = inf
        cost[:, w - bh:] = inf
        cost[:bh, :] = inf
        cost[h - bh:, :] = inf

        finite = np.isfinite(cost)
        total += np.where(finite, cost, 0.0)
        count += finite

        c_plus = np.where(best_d == d - 1, cost, c_plus)
        better = cost < best
        c_minus = np.where(better, prev, c_minus)
        c_plus = np.where(better, inf, c_plus)
        best_d = np.where(better, d, best_d)
        best = np.where(better, cost, best)
        prev = cost

        # right-image view of the same cost: pixel u_r matches left pixel u_r + d
        cost_r = np.full((h, w), inf, np.float32)
        cost_r[:, :w - d] = cost[:, d:]
        better_r = cost_r < best_r
        best_r_d = np.where(better_r, d, best_r_d)
        best_r = np.where(better_r, cost_r, best_r)

    valid = np.isfinite(best) & (best_d > 0) & (best_d < max_disparity)
    mean = total / np.maximum(count, 1)
    with np.errstate(invalid='ignore'):
        spread = (mean - best) / (mean + 1e-9)
    valid &= spread >= cfg.min_correlation_spread

    rows, cols = np.indices((h, w))
    u_r = np.clip(cols - best_d, 0, w - 1)
    valid &= np.abs(best_d - best_r_d[rows, u_r]) <= cfg.init_max_disparity_diff

    with np.errstate(invalid='ignore', divide='ignore'):
        denom = c_minus.astype(np.float64) - 2.0 * best + c_plus
        offset = np.where(np.isfinite(denom) & (denom > 0), 0.5 * (c_minus - c_plus) / denom, 0.0)
    offset = np.clip(np.nan_to_num(offset), -0.5, 0.5)
    return best_d + offset, valid


def _sgbm_disparity(left: np.ndarray, right: np.ndarray, max_disparity: int, cfg: MappingConfig):
    ksize = 2 * cfg.init_block_half_width + 1
    num_disparities = 16 * int(math.ceil((max_disparity + 1) / 16.0))
    matcher = cv2.StereoSGBM_create(
        minDisparity=0,
        numDisparities=num_disparities,
        blockSize=ksize,
        P1=8 * ksize * ksize,
        P2=32 * ksize * ksize,
        disp12MaxDiff=cfg.init_max_disparity_diff,
        uniquenessRatio=10,
        speckleWindowSize=0,
        speckleRange=0,
        mode=cv2.STEREO_SGBM_MODE_SGBM,
    )
    disparity = matcher.compute(np.ascontiguousarray(left), np.ascontiguousarray(right)).astype(np.float64) / 16.0
    return disparity, disparity > 0


def stereo_initialize(ts_left: TimeSurface, ts_right: TimeSurface, rig: StereoRig,
                      cfg: MappingConfig = MappingConfig(), T_w_ref: Optional[Pose] = None) -> SemiDenseMap:
    """Bootstrap a semi-dense map by horizontal stereo matching on the time-surface pair.

    Raises:
        MapNotReadyError: too few active pixels, or too few of them survive matching.
    """
    if abs(ts_left.t - ts_right.t) > 1e-9:
        raise ValueError("Stereo initialization needs time-surfaces rendered at the same time")
    T_w_ref = Pose.identity() if T_w_ref is None else T_w_ref
    cam = rig.left
    fb = cam.fx * rig.baseline
    if fb <= 0:
        raise ValueError("Stereo initialization needs a positive baseline")

    active = ts_left.values > cfg.init_threshold
    n_active = int(active.sum())
    if n_active < cfg.init_min_pixels:
        raise MapNotReadyError(f"Only {n_active} active pixels, need {cfg.init_min_pixels}")

    max_disparity = min(int(math.ceil(fb * cfg.rho_max)), cam.width - 2 * cfg.init_block_half_width - 2)
    if cfg.init_method == 'sgbm':
        disparity, valid = _sgbm_disparity(ts_left.values, ts_right.values, max_disparity, cfg)
    else:
        disparity, valid = _block_disparity(ts_left.values, ts_right.values, max_disparity, cfg)

    with np.errstate(divide='ignore', invalid='ignore'):
        rho = disparity / fb
    select = active & valid & (rho >= cfg.rho_min) & (rho <= cfg.rho_max)
    vs, us = np.nonzero(select)
    if len(us) < cfg.init_min_pixels:
        raise MapNotReadyError(f"Only {len(us)} pixels passed stereo matching, need {cfg.init_min_pixels}")

    sigma2 = (cfg.init_disparity_sigma / fb) ** 2
    estimates = {
        (int(u), int(v)): InverseDepthEstimate(np.array([u, v], dtype=np.float64), float(rho[v, u]), sigma2, ts_left.t)
        for u, v in zip(us, vs)
    }
    logger.info(f"Stereo initialization at t={ts_left.t:.3f}: {len(estimates)} of {n_active} active pixels, "
                f"median depth {np.median(1.0 / rho[select]):.2f} m")
    return SemiDenseMap(T_w_ref, ts_left.t, estimates)
