import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from helpers import small_body

# Compiled-kernel warmup can make single examples slow; wall-clock
# deadlines would flake.
settings.register_profile(
    "camelsplat", deadline=None,
    suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("camelsplat")


@pytest.fixture(scope="session")
def body_small():
    return small_body()


@pytest.fixture(scope="session")
def tiny_scene():
    """3-frame 32x32 scene on a 4-bone body; enough for render/loss tests."""
    from camelsplat.scene_io import generate_synthetic_scene

    return generate_synthetic_scene(n_frames=3, width=32, height=32,
                                    seed=11, body=small_body(), fx=40.0,
                                    radius=2.8)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
