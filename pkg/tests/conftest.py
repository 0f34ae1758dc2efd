import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=50, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

# acceptance lines collected by tests/test_acceptance.py, printed at the end of the run
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)


class LinearInZeta:
    """Test double: loss(theta; (zeta, y)) = theta . zeta, independent of y.

    With squared transport cost the inner maximiser is zeta* = x + theta / (2 gamma).
    """

    is_classifier = False

    def __init__(self, dim: int):
        self.input_dim = dim
        self.n_params = dim

    def losses(self, theta, x, y):
        return np.asarray(x, dtype=np.float64) @ theta

    def evaluate(self, theta, x, y, *, want_params=True, want_input=True):
        x = np.asarray(x, dtype=np.float64)
        losses = x @ theta
        gp = x.mean(axis=0) if want_params else None
        gx = np.tile(theta, (x.shape[0], 1)) if want_input else None
        return losses, gp, gx


class QuadraticModel:
    """loss = 0.5 ||theta - a||^2 + s . zeta: convex in theta, linear in zeta."""

    is_classifier = False

    def __init__(self, a, s):
        self.a = np.asarray(a, dtype=np.float64)
        self.s = np.asarray(s, dtype=np.float64)
        self.input_dim = self.s.size
        self.n_params = self.a.size

    def losses(self, theta, x, y):
        d = theta - self.a
        return 0.5 * d @ d + np.asarray(x, dtype=np.float64) @ self.s

    def evaluate(self, theta, x, y, *, want_params=True, want_input=True):
        x = np.asarray(x, dtype=np.float64)
        gp = (theta - self.a) if want_params else None
        gx = np.tile(self.s, (x.shape[0], 1)) if want_input else None
        return self.losses(theta, x, y), gp, gx


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
