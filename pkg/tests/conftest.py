import numpy as np
import pytest

from privmod.data_io import synthetic_grid_city
from privmod.road_graph import RoadGraph


def random_strong_graph(n, rng, extra=None, speed_range=(3.0, 15.0)):
    """Random planar graph made strongly connected by a Hamiltonian cycle."""
    xy = rng.uniform(0, 2000, (n, 2))
    perm = rng.permutation(n)
    src = list(perm)
    dst = list(np.roll(perm, -1))
    extra = 3 * n if extra is None else extra
    for _ in range(extra):
        a, b = rng.integers(0, n, 2)
        if a != b:
            src.append(a)
            dst.append(b)
    src, dst = np.array(src), np.array(dst)
    length = np.hypot(*(xy[src] - xy[dst]).T) + 1.0
    weight = length / rng.uniform(*speed_range, len(src))
    return RoadGraph(xy, src, dst, length, weight)


def bellman_ford(n, src, dst, w, source):
    dist = np.full(n, np.inf)
    dist[source] = 0.0
    for _ in range(n - 1):
        changed = False
        for a, b, c in zip(src, dst, w):
            if dist[a] + c < dist[b]:
                dist[b] = dist[a] + c
                changed = True
        if not changed:
            break
    return dist


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def grid5():
    return synthetic_grid_city(5, 5, 100.0, 10.0)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
