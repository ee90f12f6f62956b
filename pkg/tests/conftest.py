import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from recalib.geometry import kitti_like_calibration
from recalib.sceneio import random_scene_spec, synth_scene

settings.register_profile(
    "recalib", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("recalib")


@pytest.fixture(scope="session")
def kitti():
    return kitti_like_calibration()


@pytest.fixture(scope="session")
def scene(kitti):
    """A dense six-car synthetic frame shared by read-only tests."""
    spec = random_scene_spec(11, calib=kitti, n_objects=6, points_per_object=1500)
    cloud, mask = synth_scene(spec, kitti)
    return spec, cloud, mask


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_VERDICTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_VERDICTS] = []


@pytest.fixture
def verdict(request):
    """Record one acceptance line; returns the boolean so tests can assert it."""

    def record(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        request.config.stash[_VERDICTS].append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
