import os

import hypothesis
import numpy as np
import pytest

from specpose.codebook import build_codebook
from specpose.geometry import CameraIntrinsics, Pose, random_rotation
from specpose.meshes import bundled_mesh, unit_cube

hypothesis.settings.register_profile("specpose", max_examples=50, deadline=None)
hypothesis.settings.register_profile("fast", max_examples=5, deadline=None)
hypothesis.settings.register_profile("debugger", report_multiple_bugs=False, deadline=None)
hypothesis.settings.load_profile(os.getenv("HYPOTHESIS_PROFILE", "specpose"))


@pytest.fixture(scope="session")
def codebook():
    return build_codebook()


@pytest.fixture
def intr():
    return CameraIntrinsics.default()


@pytest.fixture
def cube():
    return unit_cube()


@pytest.fixture(scope="session")
def shaft():
    return bundled_mesh("shaft")


@pytest.fixture(scope="session")
def pulley_with_screw():
    return bundled_mesh("pulley_with_screw")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_pose(rng, depth=0.5, spread=0.05):
    """Random rotation with the translation in front of the camera."""
    t = np.array([0.0, 0.0, depth]) + rng.normal(0.0, spread, 3)
    return Pose(random_rotation(rng), t)
