import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from gesta.volume import PeakField, VolumeGrid, scaling_affine

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def pytest_collection_modifyitems(config, items):
    # acceptance criteria run last so their pass/fail lines close the log
    items.sort(key=lambda it: it.fspath.basename == "test_acceptance.py")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def box_grid(dims=(10, 10, 10), voxel=1.0, fill=True):
    data = np.ones(dims, dtype=bool) if fill else np.zeros(dims, dtype=bool)
    return VolumeGrid(data, scaling_affine(voxel))


def uniform_peaks(dims, direction, voxel=1.0):
    peaks = np.zeros(tuple(dims) + (5, 3))
    peaks[..., 0, :] = np.asarray(direction, dtype=float) / np.linalg.norm(direction)
    return PeakField(peaks, scaling_affine(voxel))


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(line)
