import numpy as np
import pytest

from geokp.pcloud import PointCloud


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def random_cloud(rng):
    def make(n=64, scale=1.0):
        return PointCloud(rng.uniform(-scale, scale, size=(n, 3)))

    return make


def floyd_warshall(n, edges):
    """Dense O(n^3) all-pairs shortest paths; ``edges`` maps (i, j) -> weight."""
    d = np.full((n, n), np.inf)
    np.fill_diagonal(d, 0.0)
    for (i, j), w in edges.items():
        d[i, j] = min(d[i, j], w)
        d[j, i] = min(d[j, i], w)
    for m in range(n):
        d = np.minimum(d, d[:, m : m + 1] + d[m : m + 1, :])
    return d


def brute_knn(points, k):
    """Index lists of the k nearest other points, ties to the lower index."""
    n = len(points)
    out = []
    for i in range(n):
        cand = sorted(
            ((float(np.sum((points[i] - points[j]) ** 2)), j) for j in range(n) if j != i)
        )
        out.append([j for _, j in cand[:k]])
    return out


# ---- acceptance reporting ----------------------------------------------------

ACCEPTANCE_LINES: list = []


def record(criterion: int, passed: bool, detail: str) -> None:
    line = f"criterion {criterion}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
