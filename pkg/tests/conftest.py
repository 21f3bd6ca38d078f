from __future__ import annotations

import numpy as np
import pytest

from edgepose.geometry import CameraRig
from edgepose.harness.scenes import ring_cameras
from edgepose.skeleton import SkeletonTopology


@pytest.fixture(scope="session")
def topology():
    return SkeletonTopology.default()


@pytest.fixture(scope="session")
def cams():
    return ring_cameras(4)


@pytest.fixture()
def rig(cams):
    return CameraRig(list(cams))


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(LINES):
            terminalreporter.write_line(line)
