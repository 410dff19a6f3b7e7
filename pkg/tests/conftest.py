from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from fmcw_slam.se2 import Pose2

settings.register_profile(
    "default", deadline=None, max_examples=100, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

angles = st.floats(-math.pi, math.pi, allow_nan=False)
coords = st.floats(-100.0, 100.0, allow_nan=False)
poses = st.builds(Pose2, angles, coords, coords)
points = st.tuples(coords, coords).map(np.array)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_pose(rng, extent=20.0) -> Pose2:
    return Pose2(rng.uniform(-math.pi, math.pi), *rng.uniform(-extent, extent, 2))


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
