import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from sglpt.graph import Graph

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", deadline=None, max_examples=200,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def random_graph(rng, n=8, d=4, p=0.35, label=None, gid=0, one_hot=False):
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < p]
    if one_hot:
        x = np.eye(d)[rng.integers(0, d, size=n)]
    else:
        x = rng.normal(size=(n, d))
    return Graph(x, pairs, label, gid)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def graphs(rng):
    return [random_graph(rng, int(rng.integers(4, 9)), 4, label=k % 2, gid=k, one_hot=True)
            for k in range(12)]


@pytest.fixture
def triangle():
    return Graph(np.eye(3), [(0, 1), (1, 2), (0, 2)], 1, 0)


def pytest_terminal_summary(terminalreporter):
    acc = __import__("sys").modules.get("test_acceptance")
    if acc is not None and acc.RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(acc.RESULTS):
            terminalreporter.write_line(acc.RESULTS[n])
