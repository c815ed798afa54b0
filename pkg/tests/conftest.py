import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


class ZeroStream:
    """Random-stream stand-in whose every draw sits at the distribution's centre."""

    def standard_normal(self, size=None):
        return np.zeros(() if size is None else size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return np.broadcast_to(np.asarray(loc, dtype=float), () if size is None else size).copy()

    def uniform(self, low=0.0, high=1.0, size=None):
        mid = 0.5 * (np.asarray(low, dtype=float) + np.asarray(high, dtype=float))
        return np.broadcast_to(mid, () if size is None else size).copy()


class ReplayStream:
    """Replays one fixed normal vector for every row of each draw."""

    def __init__(self, eta):
        self.eta = np.asarray(eta, dtype=float)

    def standard_normal(self, size=None):
        if size is None:
            return self.eta.copy()
        size = (size,) if np.isscalar(size) else tuple(size)
        return np.broadcast_to(self.eta, size).copy()


@pytest.fixture
def zero_stream():
    return ZeroStream()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# Acceptance verdicts, printed after the run so they survive output capture.
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
