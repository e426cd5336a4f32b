import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from conicflow.nn import VelocityField

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


class ConstantField:
    """``v(x, t) = c`` for every input."""

    def __init__(self, c):
        self.c = np.asarray(c, dtype=np.float64)
        self.calls = 0

    def __call__(self, x, t):
        self.calls += 1
        x = np.atleast_2d(x)
        return np.broadcast_to(self.c, x.shape).copy()


class LinearField:
    """``v(x, t) = x``; solution ``z0 * exp(t)``."""

    def __init__(self):
        self.calls = 0

    def __call__(self, x, t):
        self.calls += 1
        return np.array(x, dtype=np.float64, copy=True)


@pytest.fixture
def small_field():
    return VelocityField.init(2, (16, 16), n_frequencies=3, seed=11)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


TINY_INI = """\
[experiment]
seed = 3
log_every = 20
[data]
n_train = 600
[network]
hidden = 16,16
n_frequencies = 4
[base]
steps = 100
[reflow]
max_order = 3
steps = 40
n_fake = 300
n_real = 200
repair_interval = 10
zeta_search_samples = 100
[solver]
pair_steps = 10
sample_steps = 10
[eval]
n_samples = 400
gmm_components = 3
gmm_iter = 20
gmm_restarts = 1
n_mc = 2000
[distill]
steps = 30
n_pairs = 200
"""


@pytest.fixture
def tiny_ini(tmp_path):
    path = tmp_path / "tiny.ini"
    path.write_text(TINY_INI)
    return path


ACCEPTANCE_LINES = {}


def record_criterion(number, passed, detail):
    """Remember one acceptance line; printed again in the terminal summary."""
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
