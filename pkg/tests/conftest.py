import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from tnalign.data import cache_dir, gen_blobs, is_cached

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

# widths exercised by the property suites: depth 1..3, narrow and wide
ARCH_GRID = [
    (1, 1),
    (2, 3, 1),
    (4, 8, 3),
    (5, 16, 16, 2),
    (3, 7, 5, 9, 4),
    (10, 32, 32, 32, 10),
]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def blobs():
    return gen_blobs(n_classes=3, n_per_class=60, dim=4, separation=4.0, seed=3)


def needs_cache(name):
    return pytest.mark.skipif(not is_cached(name),
                              reason=f"{name} not in {cache_dir()}; run `tnalign data fetch {name}`")


# acceptance criteria append (number, passed, detail); printed once at the end
ACCEPTANCE = []


def record(number, passed, detail):
    ACCEPTANCE.append((number, bool(passed), detail))
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(ACCEPTANCE, key=lambda r: str(r[0])):
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
