import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("repo", deadline=None, max_examples=40)
settings.load_profile("repo")


class FieldModel:
    """Closed-form model for exercising inference without training."""

    def __init__(self, dim, drift=None, growth=None, score=None, nu=0.0):
        self.dim = dim
        self.nu = nu
        self._v = drift or (lambda x, t: np.zeros_like(x))
        self._g = growth or (lambda x, t: np.zeros(len(x)))
        self._s = score or (lambda x, t: np.zeros_like(x))

    def drift(self, x, t):
        return self._v(x, t)

    def growth(self, x, t):
        return np.broadcast_to(self._g(x, t), (len(x),)).astype(float)

    def score(self, x, t):
        return self._s(x, t)


@pytest.fixture
def field_model():
    return FieldModel


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if not RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(RESULTS):
        terminalreporter.write_line(RESULTS[number])
