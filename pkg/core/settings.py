"""Key-value settings files: rig calibration plus per-module overrides.

One ``key=value`` per line, ``#`` starts a comment. Values are read as JSON when
possible (numbers, booleans, lists) and kept as strings otherwise. Keys are
either rig calibration entries (``left.fx``, ``T_right_left.t``, ``baseline``...)
or ``<section>.<field>`` overrides of a module config.
"""

import json
import logging
from dataclasses import fields
from pathlib import Path
from typing import Any, Dict, Iterable, Optional

import numpy as np

import config
from core.depth_mapper import MappingConfig
from core.edge_tracker import TrackingConfig
from core.errors import ConfigError
from core.eskf import NoiseConfig
from core.events import EventConfig
from core.geometry import PinholeCamera, Pose, StereoRig
from core.imu_integrator import ImuConfig
from core.pipeline import PipelineConfig
from core.rig_simulator import SimConfig

logger = logging.getLogger(__name__)

SECTIONS = {
    'events': EventConfig,
    'mapping': MappingConfig,
    'tracking': TrackingConfig,
    'imu': ImuConfig,
    'noise': NoiseConfig,
    'sim': SimConfig,
}
PIPELINE_KEYS = ('cycle', 'vision_init_timeout', 'deterministic', 'vision_updates', 'debug_every', 'debug_dir')
CAMERA_KEYS = ('fx', 'fy', 'cx', 'cy', 'width', 'height')
POSE_KEYS = ('T_right_left', 'T_body_leftcam')


def parse_value(text: str) -> Any:
    text = text.strip()
    try:
        return json.loads(text)
    except ValueError:
        return text


def parse_line(line: str, lineno: Optional[int] = None, source: str = '') -> Optional[tuple]:
    line = line.split('#', 1)[0].strip()
    if not line:
        return None
    if '=' not in line:
        where = f"{source}:{lineno}: " if lineno is not None else ''
        raise ConfigError(f"{where}expected key=value, got '{line}'")
    key, value = line.split('=', 1)
    return key.strip(), parse_value(value)


def load_settings(path) -> Dict[str, Any]:
    """Read a settings or calibration file into a flat dict."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Settings file not found: {path}")
    settings: Dict[str, Any] = {}
    with open(path, 'r') as f:
        for lineno, line in enumerate(f, start=1):
            entry = parse_line(line, lineno, str(path))
            if entry is not None:
                settings[entry[0]] = entry[1]
    logger.info(f"Loaded {len(settings)} settings from {path}")
    return settings


def apply_overrides(settings: Dict[str, Any], overrides: Iterable[str]) -> Dict[str, Any]:
    """Return a copy of ``settings`` with ``key=value`` overrides applied."""
    merged = dict(settings)
    for override in overrides or ():
        entry = parse_line(override)
        if entry is None:
            continue
        merged[entry[0]] = entry[1]
    return merged


def _is_rig_key(key: str) -> bool:
    prefix = key.split('.', 1)[0]
    return prefix in ('left', 'right', 'baseline') or prefix in POSE_KEYS


def check_keys(settings: Dict[str, Any]):
    """Raise ConfigError for any key that no rig entry or config field accepts."""
    for key in settings:
        if _is_rig_key(key):
            continue
        section, _, name = key.partition('.')
        if section == 'pipeline' and name in PIPELINE_KEYS:
            continue
        if section in SECTIONS and name in {f.name for f in fields(SECTIONS[section])}:
            continue
        raise ConfigError(f"Unknown setting '{key}'")


def _require(settings: Dict[str, Any], key: str) -> Any:
    if key not in settings:
        raise ConfigError(f"Missing calibration entry '{key}'")
    return settings[key]


def build_camera(settings: Dict[str, Any], name: str) -> PinholeCamera:
    values = {k: _require(settings, f"{name}.{k}") for k in CAMERA_KEYS}
    try:
        return PinholeCamera(float(values['fx']), float(values['fy']), float(values['cx']), float(values['cy']),
                             int(values['width']), int(values['height']))
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid {name} camera: {e}")


def _build_pose(settings: Dict[str, Any], name: str, default: Pose) -> Pose:
    t = settings.get(f"{name}.t")
    q = settings.get(f"{name}.q")
    if t is None and q is None:
        return default
    try:
        translation = np.asarray(t if t is not None else default.translation, dtype=np.float64).reshape(3)
        rotation = np.asarray(q if q is not None else default.rotation, dtype=np.float64).reshape(4)
        norm = np.linalg.norm(rotation)
        if abs(norm - 1.0) > 1e-3:
            raise ValueError(f"quaternion norm {norm:.6f} is not unit")
        return Pose(rotation, translation)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid {name}: {e}")


def build_rig(settings: Dict[str, Any]) -> StereoRig:
    """Stereo rig from ``left.*``, ``right.*``, ``baseline`` and optional extrinsics.

    ``T_right_left`` defaults to a pure baseline shift along x and
    ``T_body_leftcam`` to the identity.
    """
    left = build_camera(settings, 'left')
    right = build_camera(settings, 'right')
    try:
        baseline = float(_require(settings, 'baseline'))
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid baseline: {e}")
    T_right_left = _build_pose(settings, 'T_right_left', Pose(translation=(-baseline, 0.0, 0.0)))
    T_body_leftcam = _build_pose(settings, 'T_body_leftcam', Pose.identity())
    try:
        return StereoRig(left, right, T_right_left, T_body_leftcam, baseline)
    except ValueError as e:
        raise ConfigError(f"Invalid stereo rig: {e}")


def load_calibration(path) -> StereoRig:
    return build_rig(load_settings(path))


def build_section(cls, settings: Dict[str, Any], section: str):
    """Instantiate a module config dataclass from its ``<section>.*`` keys."""
    kwargs = {}
    for f in fields(cls):
        key = f"{section}.{f.name}"
        if key in settings:
            value = settings[key]
            kwargs[f.name] = tuple(value) if isinstance(value, list) else value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid {section} settings: {e}")


def build_sim_config(settings: Dict[str, Any]) -> SimConfig:
    check_keys(settings)
    return build_section(SimConfig, settings, 'sim')


def build_pipeline_config(settings: Dict[str, Any], rig: Optional[StereoRig] = None, **paths) -> PipelineConfig:
    """Assemble and validate the full pipeline configuration.

    Args:
        settings: flat key-value settings, possibly holding the rig calibration.
        rig: overrides the rig described in ``settings``.
        paths: ``events_left``, ``events_right``, ``imu_path``, ``gt_path``, ``out_path``.
    """
    check_keys(settings)
    rig = build_rig(settings) if rig is None else rig
    kwargs = {name: build_section(cls, settings, name) for name, cls in SECTIONS.items() if name != 'sim'}
    for name in PIPELINE_KEYS:
        if f"pipeline.{name}" in settings:
            kwargs[name] = settings[f"pipeline.{name}"]
    kwargs.update({k: (str(v) if v is not None else None) for k, v in paths.items()})
    try:
        return PipelineConfig(rig=rig, **kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid pipeline settings: {e}")


def _format(value: Any) -> str:
    if isinstance(value, np.ndarray):
        value = value.tolist()
    return json.dumps(value)


def write_calibration(path, rig: StereoRig, extra: Optional[Dict[str, Any]] = None):
    """Write a rig (and optional extra settings) in the key-value format read by :func:`load_calibration`."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries: Dict[str, Any] = {}
    for name, cam in (('left', rig.left), ('right', rig.right)):
        for key in CAMERA_KEYS:
            entries[f"{name}.{key}"] = getattr(cam, key)
    entries['baseline'] = rig.baseline
    for name, pose in (('T_right_left', rig.T_right_left), ('T_body_leftcam', rig.T_body_leftcam)):
        entries[f"{name}.t"] = pose.translation
        entries[f"{name}.q"] = pose.rotation
    entries.update(extra or {})
    with open(path, 'w') as f:
        f.write("# stereo rig calibration, quaternions (w, x, y, z)\n")
        for key, value in entries.items():
            f.write(f"{key}={_format(value)}\n")
    logger.info(f"Wrote calibration to {path}")


def default_rig() -> StereoRig:
    return load_calibration(config.DEFAULT_CALIB_PATH)
