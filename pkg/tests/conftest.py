import numpy as np
import pytest
from hypothesis import strategies as st

from pgnn.graph import SparseGraph, from_edges


def random_graph(rng: np.random.Generator, n: int, extra: float = 0.3, weighted: bool = True) -> SparseGraph:
    """Connected graph: random spanning tree plus random extra edges, weights in (0, 2]."""
    order = rng.permutation(n)
    src = [int(order[k]) for k in range(1, n)]
    dst = [int(order[rng.integers(0, k)]) for k in range(1, n)]
    m = int(extra * n * (n - 1) / 2)
    src += rng.integers(0, n, m).tolist()
    dst += rng.integers(0, n, m).tolist()
    pairs = {}
    for a, b in zip(src, dst):
        if a != b:
            pairs.setdefault((min(a, b), max(a, b)), 2.0 - rng.uniform(0, 2) if weighted else 1.0)
    return SparseGraph.from_arrays(n, *map(np.array, zip(*[(a, b, w) for (a, b), w in pairs.items()])))


@st.composite
def graphs(draw, min_n=2, max_n=20):
    seed = draw(st.integers(0, 2**32 - 1))
    n = draw(st.integers(min_n, max_n))
    return random_graph(np.random.default_rng(seed), n)


@pytest.fixture
def pair_graph():
    return from_edges(2, [(0, 1)])


@pytest.fixture
def path3():
    return from_edges(3, [(0, 1), (1, 2)])


@pytest.fixture
def triangle():
    return from_edges(3, [(0, 1), (1, 2), (0, 2)])


def two_cliques(size: int = 5):
    """Two cliques joined by one edge, with cluster-indicator features."""
    edges = []
    for base in (0, size):
        edges += [(base + i, base + j) for i in range(size) for j in range(i + 1, size)]
    edges.append((size - 1, size))
    g = from_edges(2 * size, edges)
    labels = np.repeat([0, 1], size)
    X = np.eye(2)[labels]
    return g, X, labels


# criterion number -> (verdict, detail); filled by test_acceptance
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        verdict, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {verdict}  {detail}")
