import math

import numpy as np
import pytest

from bevbench.scene import ObjectBox, Scene, SceneGenConfig, RigidTransform, default_rig


def make_scene(objects=(), scene_id="t", seed=1, rig=None):
    cams, lidar = default_rig() if rig is None else rig
    return Scene(scene_id, RigidTransform.identity(), tuple(objects), cams, lidar, seed)


def box(i=0, label="car", center=(10.0, 0.0, 0.75), size=(2.0, 4.0, 1.5), yaw=0.0, velocity=(0.0, 0.0)):
    return ObjectBox(i, label, center, size, yaw, velocity)


def yaw_close(a, b, tol):
    d = abs(math.remainder(a - b, math.pi))
    return min(d, math.pi - d) <= tol


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def empty_gen():
    return SceneGenConfig(count_range=(0, 0))


# filled by test_acceptance.py, printed after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
