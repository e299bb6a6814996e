import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pgnn.errors import DataError, ShapeError
from pgnn.graph import (
    SparseGraph,
    apply_p_laplacian,
    dense_laplacian,
    divergence,
    from_edges,
    gradient,
    homophily,
    normalized_adjacency,
    variation_sp,
)

from conftest import graphs, random_graph


def _slot(g, i, j):
    row = g.neighbors_of(i)
    return int(g.offsets[i] + np.searchsorted(row, j))


class TestConstruction:
    def test_pair(self, pair_graph):
        assert pair_graph.degrees.tolist() == [1.0, 1.0]
        assert pair_graph.nnz == 2

    def test_triangle(self, triangle):
        assert triangle.degrees.tolist() == [2.0, 2.0, 2.0]

    def test_isolated_rejected(self):
        with pytest.raises(DataError, match="node 2"):
            from_edges(3, [(0, 1)])

    def test_self_loop_rejected(self):
        with pytest.raises(DataError, match="self-loop"):
            from_edges(2, [(0, 1), (1, 1)])

    def test_nonpositive_weight_rejected(self):
        with pytest.raises(DataError):
            from_edges(2, [(0, 1, 0.0)])

    def test_conflicting_duplicate_rejected(self):
        with pytest.raises(DataError, match="conflicting"):
            from_edges(2, [(0, 1, 1.0), (1, 0, 2.0)])

    def test_consistent_duplicate_merged(self):
        g = from_edges(2, [(0, 1, 0.5), (1, 0, 0.5)])
        assert g.num_edges == 1 and g.degrees.tolist() == [0.5, 0.5]

    def test_canonical_layout(self):
        g = from_edges(4, [(3, 0), (2, 1), (0, 1), (2, 3)])
        for i in range(4):
            row = g.neighbors_of(i)
            assert np.all(np.diff(row) > 0)
        assert np.array_equal(g.reverse[g.reverse], np.arange(g.nnz))
        assert g.same_as(from_edges(4, [(1, 0), (3, 2), (1, 2), (0, 3)]))

    def test_arrays_frozen(self, triangle):
        with pytest.raises(ValueError):
            triangle.weights[0] = 3.0


class TestGradientDivergence:
    def test_pair_gradient(self, pair_graph):
        grad = gradient(pair_graph, [1.0, 0.0])
        assert grad[_slot(pair_graph, 0, 1)] == -1.0
        assert grad[_slot(pair_graph, 1, 0)] == 1.0

    def test_kernel_signal(self):
        g = random_graph(np.random.default_rng(0), 12)
        assert not gradient(g, np.sqrt(g.degrees)).any()

    def test_antisymmetry_equal_degrees(self, triangle):
        f = np.array([0.3, -1.2, 2.0])
        grad = gradient(triangle, f)
        np.testing.assert_allclose(grad, -grad[triangle.reverse], atol=1e-15)

    def test_pair_divergence(self, pair_graph):
        field = np.zeros(2)
        field[_slot(pair_graph, 0, 1)] = -1.0
        field[_slot(pair_graph, 1, 0)] = 1.0
        assert divergence(pair_graph, field).tolist() == [-2.0, 2.0]

    def test_zero_field(self, triangle):
        assert not divergence(triangle, np.zeros(triangle.nnz)).any()

    @given(graphs(), st.integers(1, 3), st.integers(0, 2**31))
    @settings(max_examples=50, deadline=None)
    def test_adjointness(self, g, c, seed):
        rng = np.random.default_rng(seed)
        f = rng.normal(size=(g.n, c))
        field = rng.normal(size=(g.nnz, c))
        lhs = float(np.sum(gradient(g, f) * field))
        rhs = float(np.sum(f * divergence(g, field)))
        assert abs(lhs + rhs) <= 1e-10 * (1 + abs(lhs))

    def test_shape_checks(self, triangle):
        with pytest.raises(ShapeError):
            gradient(triangle, np.ones(4))
        with pytest.raises(ShapeError):
            divergence(triangle, np.ones(3))


class TestPLaplacian:
    def test_pair_p2(self, pair_graph):
        assert apply_p_laplacian(pair_graph, [1.0, 0.0], 2).tolist() == [1.0, -1.0]

    def test_pair_p3_saturates(self, pair_graph):
        np.testing.assert_allclose(apply_p_laplacian(pair_graph, [1.0, -1.0], 3), [4.0, -4.0])

    @pytest.mark.parametrize("p", [1, 1.5, 2, 3])
    def test_kernel(self, p):
        g = random_graph(np.random.default_rng(1), 9)
        np.testing.assert_allclose(apply_p_laplacian(g, np.sqrt(g.degrees), p), 0.0, atol=1e-12)

    @given(graphs(), st.integers(0, 2**31))
    @settings(max_examples=30, deadline=None)
    def test_p2_matches_dense(self, g, seed):
        f = np.random.default_rng(seed).normal(size=(g.n, 2))
        np.testing.assert_allclose(apply_p_laplacian(g, f, 2), dense_laplacian(g) @ f, atol=1e-12)

    @pytest.mark.parametrize("p", [1.5, 2, 3])
    def test_semidefinite_identity(self, p):
        rng = np.random.default_rng(2)
        for _ in range(10):
            g = random_graph(rng, int(rng.integers(3, 20)))
            f = rng.normal(size=(g.n, 2))
            sp_ = variation_sp(g, f, p)
            assert sp_ >= 0
            assert float(np.sum(f * apply_p_laplacian(g, f, p))) == pytest.approx(sp_, rel=1e-9)

    def test_p_below_one_rejected(self, pair_graph):
        with pytest.raises(ValueError):
            apply_p_laplacian(pair_graph, [1.0, 0.0], 0.5)


class TestVariation:
    def test_pair(self, pair_graph):
        assert variation_sp(pair_graph, [1.0, 0.0], 2) == 1.0

    def test_kernel_zero(self):
        g = random_graph(np.random.default_rng(3), 8)
        assert variation_sp(g, 2.5 * np.sqrt(g.degrees), 1.5) == pytest.approx(0.0, abs=1e-20)


class TestDense:
    def test_pair_adjacency(self, pair_graph):
        assert normalized_adjacency(pair_graph).tolist() == [[0.0, 1.0], [1.0, 0.0]]
        assert normalized_adjacency(pair_graph).sum(axis=1).tolist() == [1.0, 1.0]

    def test_symmetric(self):
        A = normalized_adjacency(random_graph(np.random.default_rng(4), 15))
        assert np.array_equal(A, A.T)

    def test_gate(self):
        n = 2100
        g = SparseGraph.from_arrays(n, np.arange(n - 1), np.arange(1, n))
        with pytest.raises(ValueError, match="2048"):
            normalized_adjacency(g)


class TestHomophily:
    def test_all_same(self, triangle):
        assert homophily(triangle, [1, 1, 1]) == 1.0

    def test_alternating(self, path3):
        assert homophily(path3, [0, 1, 0]) == 0.0

    def test_mixed(self, path3):
        assert homophily(path3, [0, 0, 1]) == pytest.approx(0.5)
