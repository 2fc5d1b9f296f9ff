import math

import numpy as np
import pytest
from hypothesis import HealthCheck, settings, strategies as st

from fxted.model import GeneratorParams

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@st.composite
def generator_lists(draw, min_n=1, max_n=6, limited=False):
    """Random generator parameter lists in the ranges used by the random scenarios."""
    n = draw(st.integers(min_n, max_n))
    gens = []
    for i in range(n):
        alpha = draw(st.floats(0.1, 2.0))
        beta = draw(st.floats(0.0, 10.0))
        if limited:
            p_min = draw(st.floats(0.0, 5.0))
            p_max = p_min + draw(st.floats(0.5, 20.0))
        else:
            p_min, p_max = 0.0, math.inf
        gens.append(GeneratorParams(alpha, beta, 0.0, p_min, p_max, f"g{i}"))
    return gens


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def two_gen(alpha=(0.5, 0.5), beta=(0.0, 0.0), p_max=(math.inf, math.inf)):
    return [GeneratorParams(a, b, 0.0, 0.0, m) for a, b, m in zip(alpha, beta, p_max)]


# --- acceptance report -----------------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
