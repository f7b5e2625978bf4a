import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from manifoldnet.neighbors import make_rng

settings.register_profile(
    "default", deadline=None, max_examples=60,
    suppress_health_check=[HealthCheck.function_scoped_fixture],
)
settings.load_profile("default")


def gaussian_blobs(seed, n_per_class=100, n_classes=5, dim=16, spread=10.0, sigma=1.0):
    """Isotropic blobs whose centers sit ``spread`` apart along orthogonal axes."""
    rng = make_rng(seed, 1234)
    y = np.repeat(np.arange(n_classes), n_per_class)
    centers = spread / np.sqrt(2.0) * np.eye(n_classes, dim)
    x = centers[y] + sigma * rng.normal(size=(y.size, dim))
    return x, y


@pytest.fixture
def blobs():
    return gaussian_blobs(0)


def pytest_terminal_summary(terminalreporter):
    from . import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(test_acceptance.RESULTS):
            terminalreporter.write_line(test_acceptance.RESULTS[n])
