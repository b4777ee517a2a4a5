"""Image and CSV dumps of time-surfaces, depth maps and tracking overlays."""

import logging
from pathlib import Path
from typing import Optional

import cv2
import numpy as np
import pandas as pd
from PIL import Image

from core.depth_mapper import SemiDenseMap
from core.edge_tracker import TrackingProblem, TrackingResult
from core.events import TimeSurface
from core.geometry import PinholeCamera, exp_map, project_points

logger = logging.getLogger(__name__)


def save_time_surface(path, ts: TimeSurface):
    """Write a time-surface (or its negative) as an 8-bit grayscale image."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(ts.values, dtype=np.uint8)).save(path)


def depth_image(depth_map: SemiDenseMap, cam: PinholeCamera) -> np.ndarray:
    """Grayscale depth: near pixels bright, far pixels dark, 0 where the map has no estimate."""
    image = np.zeros((cam.height, cam.width), np.uint8)
    uv, rho, _, _ = depth_map.arrays()
    if len(rho) == 0:
        return image
    depth = 1.0 / rho
    lo, hi = depth.min(), depth.max()
    scale = (hi - depth) / (hi - lo) if hi > lo else np.ones_like(depth)
    cols = np.clip(np.floor(uv[:, 0] + 0.5).astype(int), 0, cam.width - 1)
    rows = np.clip(np.floor(uv[:, 1] + 0.5).astype(int), 0, cam.height - 1)
    image[rows, cols] = (55 + 200 * scale).astype(np.uint8)
    return image


def dump_depth_map(prefix, depth_map: SemiDenseMap, cam: PinholeCamera):
    """``<prefix>_depth.csv`` with x,y,rho,sigma2 and ``<prefix>_depth.png``."""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    uv, rho, sigma2, _ = depth_map.arrays()
    pd.DataFrame({'x': uv[:, 0], 'y': uv[:, 1], 'rho': rho, 'sigma2': sigma2}).to_csv(
        f"{prefix}_depth.csv", index=False, float_format='%.6f')
    Image.fromarray(depth_image(depth_map, cam)).save(f"{prefix}_depth.png")


def warp_overlay(problem: TrackingProblem, psi) -> np.ndarray:
    """RGB image of the TS negative with the warped map points drawn on top."""
    base = np.clip(problem.image, 0, 255).astype(np.uint8)
    canvas = cv2.cvtColor(base, cv2.COLOR_GRAY2BGR)
    uv, valid = project_points(problem.cam, exp_map(psi).transform(problem.points))
    inside = valid & problem.cam.contains(np.nan_to_num(uv, nan=-1.0))
    for u, v in uv[inside]:
        cv2.circle(canvas, (int(round(u)), int(round(v))), 1, (0, 200, 0), -1)
    return cv2.cvtColor(canvas, cv2.COLOR_BGR2RGB)


def dump_tracking(prefix, problem: TrackingProblem, result: TrackingResult):
    """``<prefix>_warp.csv`` with warped pixel positions and ``<prefix>_warp.png`` overlay."""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    uv, valid = project_points(problem.cam, exp_map(result.psi).transform(problem.points))
    pd.DataFrame({'u': uv[:, 0], 'v': uv[:, 1], 'in_front': valid.astype(int)}).to_csv(
        f"{prefix}_warp.csv", index=False, float_format='%.4f')
    Image.fromarray(warp_overlay(problem, result.psi)).save(f"{prefix}_warp.png")


def dump_cycle(out_dir, index: int, ts_left: TimeSurface, depth_map: Optional[SemiDenseMap], cam: PinholeCamera,
               problem: Optional[TrackingProblem] = None, result: Optional[TrackingResult] = None):
    """Write every available view of one pipeline cycle under ``out_dir``."""
    prefix = Path(out_dir) / f"cycle_{index:06d}"
    try:
        save_time_surface(f"{prefix}_ts.png", ts_left)
        if depth_map is not None:
            dump_depth_map(prefix, depth_map, cam)
        if problem is not None and result is not None:
            dump_tracking(prefix, problem, result)
        logger.debug(f"Debug views written to {prefix}_*")
    except OSError as e:
        logger.error(f"Error writing debug views for cycle {index}: {e}")
