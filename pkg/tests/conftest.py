import numpy as np
import pytest

from totalcap.body_model import default_topology
from totalcap.geometry import Camera, look_at


@pytest.fixture(scope="session")
def topo():
    return default_topology()


@pytest.fixture
def identity_cam():
    return Camera(1000.0, np.array([500.0, 500.0]), np.eye(3), np.zeros(3), 1000, 1000, id=0)


@pytest.fixture
def ring():
    """Four cameras on a 3 m circle looking at (0, 1, 0)."""
    cams = []
    for i in range(4):
        a = np.pi / 2 * i + 0.3
        cams.append(
            look_at([3 * np.sin(a), 1.5, 3 * np.cos(a)], [0, 1, 0], focal=1500, width=1920, height=1080, id=i)
        )
    return cams


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    setattr(item, f"rep_{rep.when}", rep)
