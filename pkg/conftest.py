import sys
from pathlib import Path

import numpy as np
import pytest

# Add the project root to the Python path
project_root = str(Path(__file__).parent.absolute())
if project_root not in sys.path:
    sys.path.insert(0, project_root)

from core.geometry import PinholeCamera, Pose, StereoRig


@pytest.fixture
def camera() -> PinholeCamera:
    return PinholeCamera(226.0, 226.0, 173.0, 130.0, 346, 260)


@pytest.fixture
def rig(camera) -> StereoRig:
    """DAVIS346-like stereo pair, 10 cm baseline, camera frame equal to the body frame."""
    return StereoRig(camera, camera, Pose(translation=(-0.10, 0.0, 0.0)), Pose.identity(), 0.10)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
