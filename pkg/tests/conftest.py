import numpy as np
import pytest

from fedsim.models import Batch


class LinearModel:
    """loss = g . w, so every gradient equals the fixed vector g."""

    kind = "linear"

    def __init__(self, g):
        self.g = np.asarray(g, dtype=np.float64)

    @property
    def num_params(self):
        return self.g.shape[0]

    def loss(self, w, batch=None):
        return float(self.g @ w)

    def gradient(self, w, batch=None):
        return self.g.copy()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_batch(rng, n, d, k):
    return Batch(rng.normal(size=(n, d)), rng.integers(0, k, size=n))


_ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance_lines():
    return _ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda l: int(l.split()[2])):
            terminalreporter.write_line(line)
