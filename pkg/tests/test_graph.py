import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sfa_lab.graph import (DatasetSplit, EmptyWindowsError, GraphSeries, SensorGraph, WindowSpec,
                           build_adjacency_from_distances, load_dataset, read_distances_csv,
                           read_positions_csv, read_speeds_csv, sliding_windows, split, window_count,
                           write_distances_csv, write_positions_csv, write_speeds_csv)


def line_graph(n):
    W = np.zeros((n, n))
    for i in range(n - 1):
        W[i, i + 1] = W[i + 1, i] = 1.0
    return SensorGraph(W)


class TestSensorGraph:
    def test_edges_follow_weights(self):
        g = line_graph(3)
        assert g.edges == {(0, 1), (1, 0), (1, 2), (2, 1)}
        assert g.n == 3

    def test_rejects_negative_and_diagonal(self):
        with pytest.raises(ValueError):
            SensorGraph(np.array([[0.0, -1.0], [1.0, 0.0]]))
        with pytest.raises(ValueError):
            SensorGraph(np.eye(2))

    def test_edge_mismatch(self):
        with pytest.raises(ValueError):
            SensorGraph(np.array([[0.0, 1.0], [1.0, 0.0]]), edges={(0, 1)})

    def test_positions_length(self):
        with pytest.raises(ValueError):
            SensorGraph(np.zeros((3, 3)), positions=np.zeros((2, 2)))

    def test_immutable(self):
        g = line_graph(3)
        with pytest.raises(ValueError):
            g.weights[0, 1] = 5.0


class TestWindows:
    def test_direct_slicing(self):
        vals = np.array([[1, 2, 3], [4, 5, 6], [7, 8, 9]], dtype=float)
        X, Y = sliding_windows(vals, WindowSpec(2, 1))
        assert X.shape == (1, 2, 3)
        np.testing.assert_array_equal(X[0], [[1, 2, 3], [4, 5, 6]])
        np.testing.assert_array_equal(Y[0], [[7, 8, 9]])

    def test_exact_fit_gives_one_window(self):
        spec = WindowSpec(4, 2)
        X, _ = sliding_windows(np.zeros((6, 2)), spec, range(0, 6))
        assert len(X) == 1

    def test_too_short_is_empty_error(self):
        with pytest.raises(EmptyWindowsError):
            sliding_windows(np.zeros((5, 2)), WindowSpec(4, 2))
        with pytest.raises(ValueError) as exc:
            sliding_windows(np.zeros((5, 2)), WindowSpec(4, 2), range(0, 9))
        assert not isinstance(exc.value, EmptyWindowsError)

    @given(L=st.integers(0, 60), N=st.integers(1, 8), dm=st.integers(0, 7), start=st.integers(0, 10))
    @settings(max_examples=80, deadline=None)
    def test_window_count_identity(self, L, N, dm, start):
        M = min(N, 1 + dm)
        spec = WindowSpec(N, M)
        vals = np.arange((start + L) * 2, dtype=float).reshape(start + L, 2)
        r = range(start, start + L)
        expected = max(0, L - N - M + 1)
        assert window_count(L, spec) == expected
        if expected == 0:
            with pytest.raises(EmptyWindowsError):
                sliding_windows(vals, spec, r)
            return
        X, Y = sliding_windows(vals, spec, r)
        assert len(X) == expected
        for k in (0, expected - 1):
            np.testing.assert_array_equal(X[k], vals[start + k:start + k + N])
            np.testing.assert_array_equal(Y[k], vals[start + k + N:start + k + N + M])

    def test_window_spec_bounds(self):
        with pytest.raises(ValueError):
            WindowSpec(2, 3)
        with pytest.raises(ValueError):
            WindowSpec(2, 0)


class TestSplit:
    @pytest.mark.parametrize("L,expected", [
        (100, (range(0, 70), range(70, 80), range(80, 100))),
        (10, (range(0, 7), range(7, 8), range(8, 10))),
    ])
    def test_examples(self, L, expected):
        assert split(L) == DatasetSplit(*expected)

    def test_bad_fractions(self):
        with pytest.raises(ValueError):
            split(100, (0.5, 0.5, 0.5))

    def test_too_short_for_spec(self):
        with pytest.raises(ValueError):
            split(44, spec=WindowSpec(12, 3))

    @given(L=st.integers(45, 5000))
    def test_disjoint_ordered_exhaustive(self, L):
        sp = split(L, spec=WindowSpec(12, 3))
        assert sp.train.start == 0 and sp.train.stop == sp.validation.start
        assert sp.validation.stop == sp.test.start and sp.test.stop == L
        assert len(sp.train) == math.floor(0.7 * L + 1e-9)


class TestAdjacency:
    def test_zero_distance_is_one(self):
        W = build_adjacency_from_distances([(0, 1, 0.0)], 2, sigma=1.0, kappa=0.1)
        assert W[0, 1] == 1.0 and W[1, 0] == 0.0

    def test_far_is_zero(self):
        W = build_adjacency_from_distances([(0, 1, 1e6)], 2, sigma=1.0, kappa=0.0)
        assert W[0, 1] == 0.0

    def test_sigma_distance(self):
        W = build_adjacency_from_distances([(0, 1, 2.5)], 2, sigma=2.5, kappa=0.1)
        assert W[0, 1] == pytest.approx(math.exp(-1.0), abs=1e-12)
        assert W[0, 1] == pytest.approx(0.3679, abs=1e-4)

    def test_threshold_and_diagonal(self):
        rows = [(0, 0, 0.0), (0, 1, 1.0), (1, 0, 1.0), (1, 2, 3.0)]
        W = build_adjacency_from_distances(rows, 3, sigma=1.0, kappa=0.1)
        assert W[0, 0] == 0.0
        assert W[1, 2] == 0.0  # exp(-9) < 0.1
        assert W[0, 1] == W[1, 0] == pytest.approx(np.exp(-1.0))

    def test_default_sigma_is_std(self):
        rows = [(0, 1, 1.0), (1, 0, 1.0), (1, 2, 3.0), (2, 1, 3.0)]
        W = build_adjacency_from_distances(rows, 3, kappa=0.0)
        sigma = np.std([1.0, 1.0, 3.0, 3.0])
        assert W[1, 2] == pytest.approx(math.exp(-(3.0 / sigma) ** 2))

    def test_symmetric_input_gives_symmetric_output(self):
        rng = np.random.default_rng(3)
        rows = []
        for i in range(6):
            for j in range(i + 1, 6):
                d = rng.uniform(0, 3)
                rows += [(i, j, d), (j, i, d)]
        W = build_adjacency_from_distances(rows, 6, sigma=1.0, kappa=0.1)
        np.testing.assert_array_equal(W, W.T)
        np.testing.assert_array_equal(W, build_adjacency_from_distances(rows, 6, sigma=1.0, kappa=0.1))

    def test_negative_distance(self):
        with pytest.raises(ValueError):
            build_adjacency_from_distances([(0, 1, -1.0)], 2, sigma=1.0)


def test_csv_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    rows = [(0, 1, 1.5), (1, 0, 1.5), (1, 2, 0.7), (2, 1, 0.7)]
    W = build_adjacency_from_distances(rows, 3, sigma=1.0, kappa=0.1)
    pos = rng.uniform(size=(3, 2))
    g = SensorGraph(W, positions=pos)
    series = GraphSeries(g, rng.uniform(0, 70, size=(20, 3)), 5.0)
    write_speeds_csv(tmp_path / "speeds.csv", series)
    write_distances_csv(tmp_path / "distances.csv", rows)
    write_positions_csv(tmp_path / "positions.csv", pos)
    vals, stamps, interval = read_speeds_csv(tmp_path / "speeds.csv")
    np.testing.assert_array_equal(vals, series.values)
    assert interval == 5.0
    assert read_distances_csv(tmp_path / "distances.csv") == rows
    np.testing.assert_array_equal(read_positions_csv(tmp_path / "positions.csv"), pos)
    loaded = load_dataset(tmp_path, sigma=1.0, kappa=0.1)
    np.testing.assert_array_equal(loaded.graph.weights, W)
    np.testing.assert_array_equal(loaded.values, series.values)


def test_speeds_csv_rejects_irregular_spacing(tmp_path):
    p = tmp_path / "speeds.csv"
    p.write_text("timestamp,s0\n2020-01-01T00:00:00,1\n2020-01-01T00:05:00,2\n2020-01-01T00:15:00,3\n")
    with pytest.raises(ValueError):
        read_speeds_csv(p)
