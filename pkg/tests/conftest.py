import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from poseforge.misalign import procedural_walk, make_rng
from poseforge.skeleton import N_KEYPOINTS

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def pose_from_points(points, conf=1.0):
    """(18, 3) pose with the given (x, y) points in the first slots, rest missing."""
    kp = np.zeros((N_KEYPOINTS, 3))
    for i, (x, y) in enumerate(points):
        kp[i] = (x, y, conf)
    return kp


def random_pose(rng, n_present=N_KEYPOINTS):
    kp = np.zeros((N_KEYPOINTS, 3))
    kp[:, :2] = rng.uniform(0.1, 0.9, size=(N_KEYPOINTS, 2))
    idx = rng.choice(N_KEYPOINTS, size=n_present, replace=False)
    kp[idx, 2] = 1.0
    return kp


@pytest.fixture
def walk():
    return procedural_walk(make_rng(3), n_frames=4)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
