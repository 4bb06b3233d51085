import numpy as np
import pytest

from sfa_lab.graph import SensorGraph
from sfa_lab.weakness import (DESearchConfig, FilterConfig, WeaknessEvaluator, aggregate_weakness,
                              locate_cen, locate_ct, locate_de, locate_deg, subsample_windows, weakness_at)
from conftest import random_graph, small_model

UPPER = 90.0


def setup(model, B=6, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.uniform(30, 70, size=(B, model.spec.N, model.n))
    truth = rng.uniform(30, 70, size=(B, model.n))
    rho = rng.normal(0, 10, size=(model.spec.N, model.n))
    return X, truth, rho


def brute_count(model, x, truth, rho, j, theta):
    x = x.copy()
    for t in range(x.shape[0]):
        x[t, j] = min(max(x[t, j] + rho[t, j], 0.0), UPPER)
    pred = model.predict(x)
    count = 0
    for i in range(model.n):
        e = abs(float(pred[i]) - float(truth[i]))
        if e >= theta and e != 0.0:
            count += 1
    return count


@pytest.mark.parametrize("theta", [0.5, 3.0, 8.0])
def test_count_matches_recount(toy_model, theta):
    X, truth, rho = setup(toy_model)
    for j in range(toy_model.n):
        got = weakness_at(toy_model, X, truth, rho, j, FilterConfig(theta), UPPER)
        want = [brute_count(toy_model, X[b], truth[b], rho, j, theta) for b in range(X.shape[0])]
        assert got.tolist() == want
        assert weakness_at(toy_model, X[0], truth[0], rho, j, FilterConfig(theta), UPPER) == want[0]


def test_infinite_threshold_counts_nothing(toy_model):
    X, truth, rho = setup(toy_model)
    assert not weakness_at(toy_model, X, truth, rho, 1, FilterConfig(np.inf), UPPER).any()


def test_perfect_model_without_perturbation(toy_model):
    X, _, _ = setup(toy_model)
    truth = toy_model.predict(X)
    rho = np.zeros((toy_model.spec.N, toy_model.n))
    assert not weakness_at(toy_model, X, truth, rho, 2, FilterConfig(0.0), UPPER).any()


def test_missing_truth_raises(toy_model):
    X, _, rho = setup(toy_model)
    with pytest.raises(ValueError):
        weakness_at(toy_model, X, None, rho, 0, FilterConfig(), UPPER)


def test_aggregate_examples(toy_model):
    X, truth, rho = setup(toy_model, B=2)
    # theta = inf gives all-zero counts
    assert aggregate_weakness(toy_model, X, truth, rho, 0, FilterConfig(np.inf), UPPER).aggregate == 0.0
    one = aggregate_weakness(toy_model, X[:1], truth[:1], rho, 0, FilterConfig(1.0), UPPER)
    assert one.aggregate == one.counts[0]
    with pytest.raises(ValueError):
        aggregate_weakness(toy_model, X[:0], truth[:0], rho, 0, FilterConfig(), UPPER)


def test_aggregate_three_four_five(toy_model, monkeypatch):
    import sfa_lab.weakness as wk
    monkeypatch.setattr(wk, "weakness_at", lambda *a, **k: np.array([3, 4]))
    X, truth, rho = setup(toy_model, B=2)
    assert wk.aggregate_weakness(toy_model, X, truth, rho, 0, FilterConfig(), UPPER).aggregate == 5.0


def evaluator(model, seed=0, B=6, theta=4.0):
    X, truth, rho = setup(model, B, seed)
    return WeaknessEvaluator(model, X, truth, rho, FilterConfig(theta), UPPER)


def test_ct_is_argmax_by_enumeration(toy_model):
    ev = evaluator(toy_model)
    X, truth, rho = setup(toy_model)
    agg = []
    for j in range(toy_model.n):
        c = [brute_count(toy_model, X[b], truth[b], rho, j, 4.0) for b in range(X.shape[0])]
        agg.append(sum(v * v for v in c) ** 0.5)
    J = locate_ct(ev)
    assert agg[J] == max(agg)
    assert all(ev.value(J) >= ev.value(j) for j in range(toy_model.n))
    assert ev.evaluations == toy_model.n * X.shape[0]


def test_ct_single_sensor():
    m = small_model(n=1, hidden=3)
    assert locate_ct(evaluator(m)) == 0


def test_de_with_full_population_is_ct():
    m = small_model(n=5)
    ev = evaluator(m, seed=3)
    assert locate_de(ev, m.graph, DESearchConfig(s=5)) == locate_ct(evaluator(m, seed=3))


def test_de_argument_errors(toy_model):
    ev = evaluator(toy_model)
    with pytest.raises(ValueError):
        locate_de(ev, toy_model.graph, DESearchConfig(s=6))
    bare = SensorGraph(np.asarray(toy_model.graph.weights))
    with pytest.raises(ValueError):
        locate_de(ev, bare, DESearchConfig(s=4))
    with pytest.raises(ValueError):
        DESearchConfig(s=3)


@pytest.mark.parametrize("seed", range(3))
def test_de_never_costs_more_than_ct(seed):
    m = small_model(n=12, seed=seed)
    ev = evaluator(m, seed=seed)
    trace = []
    J = locate_de(ev, m.graph, DESearchConfig(s=4, g_max=5, seed=seed), trace=trace)
    assert ev.evaluations <= m.n * ev.windows.shape[0]
    assert J in trace[-1]
    assert all(len(set(c)) == 4 for c in trace)
    # elitist: best weakness in the population never decreases
    best = [max(ev.value(j) for j in c) for c in trace]
    assert best == sorted(best)


def test_de_is_seeded():
    m = small_model(n=12, seed=1)
    a, b = [], []
    locate_de(evaluator(m, 1), m.graph, DESearchConfig(s=4, seed=9), trace=a)
    locate_de(evaluator(m, 1), m.graph, DESearchConfig(s=4, seed=9), trace=b)
    assert a == b


def star(n=6, weights=None):
    W = np.zeros((n, n))
    w = np.ones(n - 1) if weights is None else np.asarray(weights)
    W[0, 1:] = W[1:, 0] = w
    return SensorGraph(W)


def test_star_hub_for_deg_and_cen():
    g = star()
    assert locate_deg(g) == locate_cen(g) == 0


def test_uniform_weights_agree():
    W = (random_graph(9, seed=4).weights > 0).astype(float)
    g = SensorGraph(W)
    assert locate_deg(g) == locate_cen(g)


def test_weighted_toy_deg_differs_from_cen():
    # sensor 0 has three light edges, sensor 4 one heavy edge
    W = np.zeros((6, 6))
    for k in (1, 2, 3):
        W[0, k] = W[k, 0] = 0.2
    W[4, 5] = W[5, 4] = 0.9
    W[4, 1] = W[1, 4] = 0.5
    g = SensorGraph(W)
    assert g.degree().tolist() == [3, 2, 1, 1, 2, 1]
    np.testing.assert_allclose(W.sum(axis=1), [0.6, 0.7, 0.2, 0.2, 1.4, 0.9])
    assert locate_deg(g) == 0
    assert locate_cen(g) == 4


def test_baseline_relative_variant(toy_model):
    X, truth, rho = setup(toy_model)
    ev = WeaknessEvaluator(toy_model, X, truth, np.zeros_like(rho), FilterConfig(0.0), UPPER,
                           baseline_relative=True)
    assert all(ev.value(j) == 0.0 for j in range(toy_model.n))


def test_subsample_windows_is_seeded_and_ordered():
    X = np.arange(40.0).reshape(10, 2, 2)
    Y = np.arange(10.0)
    a, ya = subsample_windows(X, Y, 4, seed=1)
    b, _ = subsample_windows(X, Y, 4, seed=1)
    assert np.array_equal(a, b)
    assert np.all(np.diff(ya) > 0)
    assert subsample_windows(X, Y, None, 0)[0] is X or np.array_equal(subsample_windows(X, Y, None, 0)[0], X)
