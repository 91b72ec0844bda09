import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gcnn.errors import FormatError, InvalidArgument
from gcnn.graph import (
    Graph,
    build_grid_graph,
    laplacian,
    read_edge_list,
    restrict_graph,
    subsample_graph,
    write_edge_list,
)


def test_mnist_grid_size():
    g = build_grid_graph(28, 28)
    assert g.n == 784
    assert g.num_edges == 28 * 27 * 2


def test_single_vertex():
    g = build_grid_graph(1, 1)
    assert g.n == 1
    assert g.num_edges == 0
    np.testing.assert_array_equal(laplacian(g), [[0.0]])


def test_two_by_two_is_four_cycle():
    g = build_grid_graph(2, 2)
    assert g.num_edges == 4
    np.testing.assert_array_equal(g.degrees, [2, 2, 2, 2])


@pytest.mark.parametrize("rows,cols", [(0, 3), (3, 0), (-1, 2)])
def test_bad_dimensions(rows, cols):
    with pytest.raises(InvalidArgument):
        build_grid_graph(rows, cols)


@given(st.integers(1, 7), st.integers(1, 7))
def test_grid_edge_count(r, c):
    g = build_grid_graph(r, c)
    assert g.num_edges == r * (c - 1) + c * (r - 1)
    np.testing.assert_allclose(laplacian(g) @ np.ones(g.n), 0.0, atol=1e-12)


def test_grid_adjacency_is_four_neighbourhood():
    rows, cols = 4, 5
    g = build_grid_graph(rows, cols)
    for a in range(g.n):
        for b in range(g.n):
            ra, ca = divmod(a, cols)
            rb, cb = divmod(b, cols)
            expected = 1.0 if abs(ra - rb) + abs(ca - cb) == 1 else 0.0
            assert g.adjacency[a, b] == expected


def test_euclidean_weight_mode_matches_binary_on_unit_grid():
    a = build_grid_graph(3, 4, weight_mode="binary")
    b = build_grid_graph(3, 4, weight_mode="euclidean")
    np.testing.assert_array_equal(a.adjacency, b.adjacency)
    c = build_grid_graph(3, 4, weight_mode="euclidean", spacing=2.5)
    assert set(np.unique(c.adjacency)) == {0.0, 2.5}


def test_laplacian_examples():
    path = Graph(np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]], dtype=float))
    np.testing.assert_array_equal(laplacian(path), [[1, -1, 0], [-1, 2, -1], [0, -1, 1]])
    pair = Graph(np.array([[0, 5.0], [5.0, 0]]))
    np.testing.assert_array_equal(laplacian(pair), [[5, -5], [-5, 5]])


def test_laplacian_invariants_on_random_graphs():
    rng = np.random.default_rng(3)
    for _ in range(20):
        n = rng.integers(1, 15)
        a = np.triu(rng.random((n, n)) * (rng.random((n, n)) < 0.5), 1)
        g = Graph(a + a.T)
        lap = laplacian(g)
        np.testing.assert_array_equal(lap, lap.T)
        np.testing.assert_allclose(lap.sum(axis=1), 0.0, atol=1e-12)
        assert np.linalg.eigvalsh(lap).min() >= -1e-10


@pytest.mark.parametrize(
    "adj",
    [
        np.array([[0, 1], [2, 0]], dtype=float),
        np.array([[1, 1], [1, 0]], dtype=float),
        np.array([[0, -1], [-1, 0]], dtype=float),
    ],
)
def test_graph_rejects_invalid_adjacency(adj):
    with pytest.raises(InvalidArgument):
        Graph(adj)


def test_graph_is_immutable():
    g = build_grid_graph(2, 3)
    with pytest.raises(ValueError):
        g.adjacency[0, 1] = 3.0


def test_subsample_to_700_vertices():
    g, kept = subsample_graph(build_grid_graph(28, 28), 84, seed=0)
    assert g.n == 700
    assert kept.shape == (700,)
    assert np.all(np.diff(kept) > 0)


def test_subsample_zero_is_identity():
    base = build_grid_graph(4, 4)
    g, kept = subsample_graph(base, 0, seed=1)
    np.testing.assert_array_equal(kept, np.arange(16))
    np.testing.assert_array_equal(g.adjacency, base.adjacency)


def test_subsample_deterministic_and_seed_dependent():
    base = build_grid_graph(10, 10)
    _, a = subsample_graph(base, 30, seed=5)
    _, b = subsample_graph(base, 30, seed=5)
    _, c = subsample_graph(base, 30, seed=6)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_removing_a_corner_of_four_cycle_gives_path():
    base = build_grid_graph(2, 2)
    for drop in range(4):
        kept = np.array([v for v in range(4) if v != drop])
        g = restrict_graph(base, kept)
        assert g.num_edges == 2
        assert sorted(g.degrees) == [1, 1, 2]
    g, _ = subsample_graph(base, 1, seed=11)
    assert g.num_edges == 2 and sorted(g.degrees) == [1, 1, 2]


@pytest.mark.parametrize("count", [4, 5, -1])
def test_subsample_bad_count(count):
    with pytest.raises(InvalidArgument):
        subsample_graph(build_grid_graph(2, 2), count, seed=0)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.data())
def test_subsample_matches_deleting_rows_and_columns(r, c, data):
    base = build_grid_graph(r, c)
    count = data.draw(st.integers(0, base.n - 1))
    seed = data.draw(st.integers(0, 1000))
    g, kept = subsample_graph(base, count, seed)
    w = base.adjacency[np.ix_(kept, kept)]
    expected = np.diag(w.sum(axis=1)) - w
    np.testing.assert_array_equal(laplacian(g), expected)
    np.testing.assert_array_equal(g.vertex_labels, kept)


def test_subsample_may_disconnect():
    base = build_grid_graph(1, 5)
    g = restrict_graph(base, np.array([0, 1, 3, 4]))
    assert g.num_components() == 2
    assert np.sum(np.abs(np.linalg.eigvalsh(laplacian(g))) < 1e-10) == 2


def test_edge_list_round_trip(tmp_path):
    base, _ = subsample_graph(build_grid_graph(5, 6), 7, seed=2)
    path = tmp_path / "g.txt"
    write_edge_list(base, path)
    lines = path.read_text().splitlines()
    assert lines[0] == str(base.n)
    assert len(lines) == 1 + base.num_edges
    again = read_edge_list(path)
    np.testing.assert_array_equal(again.adjacency, base.adjacency)


def test_edge_list_rejects_garbage(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("3\n0 1\n")
    with pytest.raises(FormatError):
        read_edge_list(path)
    path.write_text("2\n0 5 1.0\n")
    with pytest.raises(FormatError):
        read_edge_list(path)
