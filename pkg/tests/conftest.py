import numpy as np
import pytest

from gsct import GaussianCloud, ScanGeometry


def random_cloud(rng, m=10, lo=0.05, hi=0.2, spread=0.5, density=(0.2, 1.0)) -> GaussianCloud:
    """Anisotropic, randomly rotated splats inside a cube of half-width ``spread``."""
    return GaussianCloud(
        rng.uniform(-spread, spread, (m, 3)),
        np.log(rng.uniform(lo, hi, (m, 3))),
        rng.normal(size=(m, 4)),
        rng.uniform(*density, m),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_parallel():
    return ScanGeometry("parallel", (40, 36), (0.04, 0.045), [0.3, 1.2])


@pytest.fixture
def small_cone():
    return ScanGeometry("cone", (40, 36), (0.06, 0.065), [0.3, 1.2], 4.0, 2.0)



def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(lines):
        terminalreporter.write_line(line)
