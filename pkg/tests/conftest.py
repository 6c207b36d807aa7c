import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=50,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def street():
    """Small in-memory synthetic sequence shared by the slower tests."""
    from disorient.synth import SceneSpec, generate

    scene, traj, clouds = generate(SceneSpec(seed=0, frames=4))
    return scene, traj, clouds


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory):
    """The default 21-frame synthetic corpus written in KITTI layout."""
    from disorient.synth import SceneSpec, gen_synthetic

    root = tmp_path_factory.mktemp("corpus")
    gen_synthetic(SceneSpec(seed=0, frames=21), root)
    return str(root)


@pytest.fixture(scope="session")
def small_scan():
    """One reduced-resolution synthetic street scan, thinned for fast registration tests."""
    from disorient.cloud import voxel_downsample
    from disorient.synth import LidarModel, SceneSpec, generate

    spec = SceneSpec(seed=0, frames=1, lidar=LidarModel(beams=32, azimuth_steps=500))
    _, _, clouds = generate(spec)
    return voxel_downsample(clouds[0], 0.4)


# one pass/fail line per acceptance criterion, filled by test_acceptance.py
ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
