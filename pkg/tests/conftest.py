import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from rehyat.numerics import Rng

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return Rng(1234, 0)


def assert_close(a, b, tol):
    a, b = np.asarray(a), np.asarray(b)
    assert a.shape == b.shape, (a.shape, b.shape)
    gap = float(np.max(np.abs(a - b))) if a.size else 0.0
    assert gap <= tol, f"max abs diff {gap:.3e} > {tol:g}"
