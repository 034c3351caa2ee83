import numpy as np
import pytest

from stcalib.rig_sim import LidarModel, courtyard_scene, default_rig, make_trajectory, simulate_dataset


def tiny_dataset(seed=3, duration=1.0):
    """A one-second rig with 16x12 cameras and a sparse LiDAR."""
    rig = default_rig(width=16, height=12, fx=12.0, lidar=LidarModel(rings=4, azimuth_steps=24))
    track = make_trajectory("arc", duration=duration + 0.2, turn_deg=30.0, start=(-3.0, -2.0))
    return simulate_dataset(courtyard_scene(), rig, track, duration, supersample=1, seed=seed)


@pytest.fixture(scope="session")
def tiny():
    return tiny_dataset()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# PASS/FAIL lines from the acceptance suite, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
