import numpy as np
import pytest

from artifact.geometry import MetricField
from artifact.mesh import DiskMesh
from artifact.raytransform import FanSampling


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long end-to-end runs")


@pytest.fixture(scope="session")
def euclid():
    return MetricField()


@pytest.fixture(scope="session")
def conformal():
    return MetricField("conformal", "0.05*(x1**2 + x2**2)")


@pytest.fixture(scope="session")
def mesh():
    return DiskMesh(1.0, 0.05)


@pytest.fixture(scope="session")
def coarse_mesh():
    return DiskMesh(1.0, 0.08)


@pytest.fixture(scope="session")
def fan(euclid):
    return FanSampling(euclid, 64, 64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def bump_poly(x, c, power=2):
    """Random quadratic times (1 - |x|^2)^power, vanishing on the unit circle."""
    r2 = np.sum(x ** 2, axis=-1)
    P = (c[0] + c[1] * x[..., 0] + c[2] * x[..., 1] + c[3] * x[..., 0] ** 2
         + c[4] * x[..., 0] * x[..., 1] + c[5] * x[..., 1] ** 2)
    return P * np.clip(1 - r2, 0, None) ** power


ACCEPTANCE = {}


def record_criterion(n, ok, detail):
    """Store one acceptance line; printed in the terminal summary."""
    ACCEPTANCE[n] = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(ACCEPTANCE[n])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
