import numpy as np
import pytest
from hypothesis import settings

# JIT compilation makes the first call of every kernel slow; no deadlines.
settings.register_profile("qxkit", deadline=None, max_examples=60)
settings.load_profile("qxkit")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session", autouse=True)
def warm_kernels():
    """Compile the numba kernels once so timed tests measure steady state."""
    from qxkit import codecs
    from qxkit.codebook import build_codebook

    x = np.random.default_rng(0).standard_normal(1024).astype(np.float32)
    codecs.q40_encode(x)
    codecs.q4k_encode(x)
    fit = build_codebook(x)
    codecs.q4x_encode(x, fit.codebook, fit.assignment)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
