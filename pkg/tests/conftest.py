import sys

import numpy as np
import pytest

from rpnbf import kernels


@pytest.fixture(params=sorted(kernels.available_backends()))
def backend(request):
    """Run a test once per available kernel backend."""
    prev = kernels.backend
    kernels.use(request.param)
    yield request.param
    kernels.backend = prev


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_boxes(rng, n, extent=100.0, min_size=1.0, max_size=40.0):
    xy = rng.uniform(0, extent, (n, 2))
    wh = rng.uniform(min_size, max_size, (n, 2))
    return np.concatenate([xy, wh], axis=1)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(mod.RESULTS):
        terminalreporter.write_line(line)
    for line in mod.DETAILS:
        terminalreporter.write_line("    " + line)
