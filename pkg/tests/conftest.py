import numpy as np
import pytest
from scipy.spatial.transform import Rotation


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


def random_rotation(rng, n=None):
    return Rotation.random(n, random_state=rng).as_matrix()


def rigid_sequence(rng, n_frames, n_points):
    """Frames ``Q_i S0`` with random rotations and a centered non-planar S0."""
    s0 = rng.normal(size=(3, n_points))
    s0 -= s0.mean(axis=1, keepdims=True)
    q = random_rotation(rng, n_frames)
    return q @ s0, q, s0


ACCEPTANCE_LINES = {}


def record_criterion(number, passed, detail):
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
