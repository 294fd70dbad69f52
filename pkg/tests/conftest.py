import os

# no log files from the test-suite
os.environ.setdefault("FISHEYE_SPLAT_LOG_DIR", "")

import numpy as np
import pytest

from fisheye_splat.core.camera_models import CameraKind, CameraModel, CameraPose
from fisheye_splat.core.synthetic import mei_camera, pinhole_camera, random_gaussians


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def pinhole_32():
    return pinhole_camera(32, 32, 60.0, "pin32")


@pytest.fixture
def mei_32():
    return mei_camera(32, 32, xi=1.0, gamma_ratio=0.7, camera_id="mei32")


@pytest.fixture
def kb_model():
    return CameraModel(kind=CameraKind.KANNALA_BRANDT, width=64, height=64, u0=31.5, v0=31.5,
                       fx=30.0, fy=30.0, k=(0.02, -0.01, 0.001, 0.0), camera_id="kb64")


@pytest.fixture
def front_pose():
    """Camera at the origin looking down world +z."""
    return CameraPose()


@pytest.fixture
def small_scene(rng):
    """30 Gaussians in front of the default camera."""
    return random_gaussians(30, rng, center=(0.0, 0.0, 4.0), spread=(1.0, 1.0, 0.5),
                            scale_range=(0.05, 0.2), num_classes=3)
