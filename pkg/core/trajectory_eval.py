"""Trajectory files, timestamp association and APE/RPE metrics."""

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd

import config
from core.errors import EvaluationError, InputFormatError
from core.geometry import Pose

logger = logging.getLogger(__name__)

QUATERNION_TOLERANCE = 1e-3
RPE_UNITS = ('frames', 'seconds')


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Timestamped world-from-body poses, quaternions stored (w, x, y, z)."""

    times: np.ndarray
    positions: np.ndarray
    quats: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=np.float64).reshape(-1)
        positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        quats = np.asarray(self.quats, dtype=np.float64).reshape(-1, 4)
        if not len(times) == len(positions) == len(quats):
            raise ValueError("Trajectory columns differ in length")
        if np.any(np.diff(times) <= 0):
            raise ValueError("Trajectory times must strictly increase")
        norms = np.linalg.norm(quats, axis=1)
        if np.any(np.abs(norms - 1.0) > QUATERNION_TOLERANCE):
            raise ValueError("Trajectory quaternions must be unit length")
        object.__setattr__(self, 'times', times)
        object.__setattr__(self, 'positions', positions)
        object.__setattr__(self, 'quats', quats / norms[:, None] if len(norms) else quats)

    @classmethod
    def empty(cls) -> 'Trajectory':
        return cls(np.zeros(0), np.zeros((0, 3)), np.zeros((0, 4)))

    @classmethod
    def from_poses(cls, times: Sequence[float], poses: Sequence[Pose]) -> 'Trajectory':
        if len(poses) == 0:
            return cls.empty()
        return cls(np.asarray(times), np.array([p.translation for p in poses]), np.array([p.rotation for p in poses]))

    def __len__(self) -> int:
        return len(self.times)

    def pose(self, i: int) -> Pose:
        return Pose(self.quats[i], self.positions[i])

    def poses(self) -> List[Pose]:
        return [self.pose(i) for i in range(len(self))]

    def subset(self, indices) -> 'Trajectory':
        indices = np.asarray(indices, dtype=np.intp)
        return Trajectory(self.times[indices], self.positions[indices], self.quats[indices])

    @property
    def length(self) -> float:
        """Path length of the positions in meters."""
        if len(self) < 2:
            return 0.0
        return float(np.linalg.norm(np.diff(self.positions, axis=0), axis=1).sum())


def load_trajectory(path) -> Trajectory:
    """Read ``t x y z qx qy qz qw`` lines; blank lines and ``#`` comments are skipped.

    Raises:
        InputFormatError: malformed line, quaternion norm off by more than 1e-3,
            or a timestamp that does not increase. The error carries the line number.
    """
    path = Path(path)
    if not path.exists():
        raise InputFormatError("trajectory file not found", path=str(path))

    times, positions, quats = [], [], []
    with open(path, 'r') as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith('#'):
                continue
            fields = line.split()
            if len(fields) != 8:
                raise InputFormatError(f"expected 8 fields, got {len(fields)}", line=lineno, path=str(path))
            try:
                t, x, y, z, qx, qy, qz, qw = (float(v) for v in fields)
            except ValueError as e:
                raise InputFormatError(f"malformed pose ({e})", line=lineno, path=str(path))
            norm = np.linalg.norm([qw, qx, qy, qz])
            if not np.isfinite(norm) or abs(norm - 1.0) > QUATERNION_TOLERANCE:
                raise InputFormatError(f"quaternion norm {norm:.6f} is not unit", line=lineno, path=str(path))
            if times and t <= times[-1]:
                raise InputFormatError(f"timestamp {t} does not increase", line=lineno, path=str(path))
            times.append(t)
            positions.append([x, y, z])
            quats.append([qw, qx, qy, qz])

    if not times:
        return Trajectory.empty()
    logger.debug(f"Loaded {len(times)} poses from {path}")
    return Trajectory(np.array(times), np.array(positions), np.array(quats))


def save_trajectory(path, traj: Trajectory):
    """Write ``t x y z qx qy qz qw`` lines with 9 decimals."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w') as f:
        for t, p, q in zip(traj.times, traj.positions, traj.quats):
            values = [t, p[0], p[1], p[2], q[1], q[2], q[3], q[0]]
            f.write(' '.join(f"{v:.9f}" for v in values) + '\n')
    logger.info(f"Wrote {len(traj)} poses to {path}")


@dataclass(frozen=True, eq=False)
class MatchedPairs:
    """Estimated and ground-truth poses matched index by index."""

    est: Trajectory
    gt: Trajectory

    def __len__(self) -> int:
        return len(self.est)


def associate(est: Trajectory, gt: Trajectory, max_dt: float = config.EVAL_MAX_DT) -> MatchedPairs:
    """Pair each estimate with the nearest unused ground-truth pose within ``max_dt``.

    Matching walks both trajectories in time order, so every ground-truth pose
    is used at most once.
    """
    if len(est) == 0 or len(gt) == 0:
        raise EvaluationError("Cannot associate an empty trajectory")
    i_est, i_gt = [], []
    j_last = -1
    for i, t in enumerate(est.times):
        k = int(np.searchsorted(gt.times, t))
        best = None
        for j in (k - 1, k):
            if j_last < j < len(gt) and abs(gt.times[j] - t) <= max_dt:
                if best is None or abs(gt.times[j] - t) < abs(gt.times[best] - t):
                    best = j
        if best is not None:
            i_est.append(i)
            i_gt.append(best)
            j_last = best

    if not i_est:
        raise EvaluationError(f"No timestamps match within {max_dt}s "
                              f"(est {est.times[0]:.3f}-{est.times[-1]:.3f}, gt {gt.times[0]:.3f}-{gt.times[-1]:.3f})")
    if len(i_est) < len(est):
        logger.debug(f"Associated {len(i_est)} of {len(est)} estimated poses")
    return MatchedPairs(est.subset(i_est), gt.subset(i_gt))


@dataclass(frozen=True, eq=False)
class MetricReport:
    n_pairs: int = 0
    aligned: bool = False
    ape_rmse: Optional[float] = None
    ape_residuals: Optional[np.ndarray] = None
    rpe_rmse: Optional[float] = None
    rpe_delta: Optional[float] = None
    rpe_unit: str = 'frames'
    rpe_residuals: Optional[np.ndarray] = None
    times: Optional[np.ndarray] = None
    gt_length: float = 0.0
    alignment: Pose = field(default_factory=Pose.identity)

    def as_dict(self) -> dict:
        out = {'pairs': self.n_pairs, 'gt_length': round(self.gt_length, 6)}
        if self.ape_rmse is not None:
            out['ape_aligned'] = int(self.aligned)
            out['ape_rmse'] = self.ape_rmse
            out['ape_mean'] = float(np.mean(self.ape_residuals)) if len(self.ape_residuals) else 0.0
            out['ape_max'] = float(np.max(self.ape_residuals)) if len(self.ape_residuals) else 0.0
            if self.gt_length > 0:
                out['ape_rmse_percent'] = 100.0 * self.ape_rmse / self.gt_length
        if self.rpe_rmse is not None:
            out['rpe_delta'] = self.rpe_delta
            out['rpe_unit'] = self.rpe_unit
            out['rpe_windows'] = len(self.rpe_residuals)
            out['rpe_rmse'] = self.rpe_rmse
        return out

    def as_lines(self) -> List[str]:
        """Machine-readable ``key=value`` lines."""
        lines = []
        for key, value in self.as_dict().items():
            lines.append(f"{key}={value:.9f}" if isinstance(value, float) else f"{key}={value}")
        return lines

    def write_residuals(self, path):
        """Per-pair APE residuals (and per-window RPE residuals) as CSV."""
        frames = []
        if self.ape_residuals is not None:
            frames.append(pd.DataFrame({'metric': 'ape', 't': self.times, 'residual': self.ape_residuals}))
        if self.rpe_residuals is not None:
            frames.append(pd.DataFrame({'metric': 'rpe', 't': self.times[:len(self.rpe_residuals)],
                                        'residual': self.rpe_residuals}))
        if not frames:
            raise EvaluationError("Report holds no residuals")
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        pd.concat(frames, ignore_index=True).to_csv(path, index=False, float_format='%.9f')
        logger.info(f"Wrote residuals to {path}")


def _rmse(residuals: np.ndarray) -> float:
    return float(np.sqrt(np.mean(residuals ** 2))) if len(residuals) else 0.0


def umeyama_alignment(source: np.ndarray, target: np.ndarray) -> Optional[Pose]:
    """Least-squares rigid transform mapping ``source`` points onto ``target``.

    Returns None when the source points are collinear (rotation about the line
    is undetermined).
    """
    mu_s = source.mean(axis=0)
    mu_t = target.mean(axis=0)
    S = source - mu_s
    T = target - mu_t
    spread = np.linalg.svd(S, compute_uv=False)
    if len(spread) < 2 or spread[1] <= 1e-9 * max(spread[0], 1e-12):
        return None
    U, _, Vt = np.linalg.svd(T.T @ S / len(source))
    D = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[2, 2] = -1.0
    R = U @ D @ Vt
    return Pose.from_matrix(np.block([[R, (mu_t - R @ mu_s)[:, None]], [np.zeros((1, 3)), np.ones((1, 1))]]))


def compute_ape(pairs: MatchedPairs, align: bool = True) -> MetricReport:
    """Absolute translation error, optionally after rigid alignment of the estimate to the ground truth."""
    est = pairs.est.positions
    gt = pairs.gt.positions
    alignment = Pose.identity()
    aligned = False
    if align:
        if len(pairs) < 3:
            raise EvaluationError(f"Rigid alignment needs at least 3 pairs, got {len(pairs)}")
        fitted = umeyama_alignment(est, gt)
        if fitted is None:
            logger.warning("Estimated positions are collinear, reporting APE without alignment")
        else:
            alignment = fitted
            aligned = True
            est = alignment.transform(est)

    residuals = np.linalg.norm(est - gt, axis=1)
    return MetricReport(n_pairs=len(pairs), aligned=aligned, ape_rmse=_rmse(residuals), ape_residuals=residuals,
                        times=pairs.gt.times.copy(), gt_length=pairs.gt.length, alignment=alignment)


def compute_rpe(pairs: MatchedPairs, delta: float = config.EVAL_RPE_DELTA, unit: str = 'frames') -> MetricReport:
    """Relative translation error over windows of ``delta`` frames or seconds."""
    if unit not in RPE_UNITS:
        raise ValueError(f"Unknown RPE unit '{unit}'")
    if delta <= 0:
        raise ValueError(f"RPE delta must be positive, got {delta}")
    times = pairs.gt.times
    if unit == 'frames':
        step = max(1, int(round(delta)))
        starts = np.arange(len(pairs) - step)
        ends = starts + step
    else:
        ends = np.searchsorted(times, times + delta - 1e-9, side='left')
        starts = np.flatnonzero(ends < len(pairs))
        ends = ends[starts]
    if len(starts) == 0:
        raise EvaluationError(f"No complete RPE window of {delta} {unit} in {len(pairs)} pairs")

    est = pairs.est.poses()
    gt = pairs.gt.poses()
    residuals = np.array([
        np.linalg.norm(gt[i].inverse().compose(gt[j]).inverse()
                       .compose(est[i].inverse().compose(est[j])).translation)
        for i, j in zip(starts, ends)
    ])
    return MetricReport(n_pairs=len(pairs), rpe_rmse=_rmse(residuals), rpe_delta=delta, rpe_unit=unit,
                        rpe_residuals=residuals, times=times[starts].copy(), gt_length=pairs.gt.length)


def evaluate(est: Trajectory, gt: Trajectory, max_dt: float = config.EVAL_MAX_DT, align: bool = True,
             rpe_delta: float = config.EVAL_RPE_DELTA, rpe_unit: str = 'frames') -> MetricReport:
    """Associate, then compute APE and (when a window fits) RPE into one report."""
    pairs = associate(est, gt, max_dt)
    report = compute_ape(pairs, align and len(pairs) >= 3)
    try:
        rpe = compute_rpe(pairs, rpe_delta, rpe_unit)
    except EvaluationError as e:
        logger.warning(f"Skipping RPE: {e}")
        return report
    return replace(report, rpe_rmse=rpe.rpe_rmse, rpe_delta=rpe.rpe_delta, rpe_unit=rpe.rpe_unit,
                   rpe_residuals=rpe.rpe_residuals)
