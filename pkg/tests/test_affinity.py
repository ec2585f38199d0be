import numpy as np
import pytest
from hypothesis import given, strategies as st

from approxsched.affinity import (
    ClassifierOracle,
    HistogramWindow,
    error_kernel,
    estimate_histogram,
    l2_error,
    predict,
    predict_levels,
)
from approxsched.catalog import Strategy
from approxsched.workload import AffinityModel, synthesize_prompt


def test_perfect_oracle_returns_truth(catalog, rng):
    for i in range(50):
        p = synthesize_prompt(rng, AffinityModel(), catalog, i)
        assert predict(ClassifierOracle(1.0), p, rng, catalog, Strategy.SM) == p.true_optimal[Strategy.SM]
        assert p.predicted_optimal[Strategy.SM] == p.true_optimal[Strategy.SM]


def test_always_faster_miss(rng):
    truth = np.arange(4).repeat(10)
    pred = predict_levels(ClassifierOracle(0.0, kernel="faster"), truth, 4, rng)
    assert np.array_equal(pred, np.minimum(truth + 1, 3))


def test_accuracy_concentration(rng):
    truth = rng.integers(0, 6, 10_000)
    pred = predict_levels(ClassifierOracle(0.8), truth, 6, rng)
    agree = np.mean(pred == truth)
    assert 0.78 <= agree <= 0.82


def test_adjacent_misses_are_neighbours(rng):
    truth = rng.integers(0, 6, 5000)
    pred = predict_levels(ClassifierOracle(0.0), truth, 6, rng)
    assert np.all(np.abs(pred - truth) == 1)


def test_drift_schedule(rng):
    o = ClassifierOracle(1.0, drift=((100.0, 0.0),))
    assert o.accuracy_at(50.0) == 1.0
    assert o.accuracy_at(150.0) == 0.0
    truth = np.zeros(100, dtype=int)
    times = np.r_[np.zeros(50), np.full(50, 200.0)]
    pred = predict_levels(ClassifierOracle(1.0, kernel="faster", drift=((100.0, 0.0),)), truth, 3, rng, times)
    assert np.all(pred[:50] == 0) and np.all(pred[50:] == 1)


def test_bad_accuracy_rejected():
    with pytest.raises(ValueError):
        ClassifierOracle(1.5)


@pytest.mark.parametrize("kind", ["adjacent", "uniform", "faster", "slower"])
def test_error_kernels_row_stochastic(kind):
    for k in (1, 2, 5):
        m = error_kernel(kind, k)
        assert np.allclose(m.sum(axis=1), 1.0)


@given(st.lists(st.integers(0, 5), max_size=300), st.floats(0, 1), st.sampled_from(["adjacent", "uniform"]))
def test_predictions_stay_in_range(truth, acc, kernel):
    pred = predict_levels(ClassifierOracle(acc, kernel), np.array(truth, dtype=int), 6, np.random.default_rng(0))
    assert np.all((pred >= 0) & (pred < 6))


def test_histogram_all_same():
    h = estimate_histogram(["a"] * 1000, ["a", "b", "c", "d"])
    assert h.probs == {"a": 1.0, "b": 0.0, "c": 0.0, "d": 0.0}


def test_histogram_half_half():
    h = estimate_histogram(["v0"] * 500 + ["v3"] * 500, ["v0", "v1", "v2", "v3"])
    assert h.probs["v0"] == 0.5 and h.probs["v3"] == 0.5


def test_histogram_uses_last_window():
    h = estimate_histogram(["a"] * 10 + ["b"] * 5, ["a", "b"], window_size=5)
    assert h.probs == {"a": 0.0, "b": 1.0}


def test_empty_window_falls_back_to_uniform():
    h = estimate_histogram([], ["a", "b"])
    assert h.fallback and h.probs == {"a": 0.5, "b": 0.5}


@given(st.lists(st.integers(0, 3), max_size=2500), st.integers(1, 1200))
def test_ring_buffer_matches_batch_estimate(levels, size):
    ids = ("a", "b", "c", "d")
    win = HistogramWindow(ids, size)
    for lv in levels:
        win.push(lv)
    snap = win.snapshot()
    ref = estimate_histogram([ids[i] for i in levels], ids, size)
    assert snap.vector(ids) == pytest.approx(ref.vector(ids), abs=1e-12)
    assert sum(snap.probs.values()) == pytest.approx(1.0)
    assert set(snap.probs) <= set(ids)


def test_stationary_l2_error(rng):
    target = {"v0": 0.35, "v1": 0.1, "v2": 0.15, "v3": 0.4}
    ids = list(target)
    draws = rng.choice(4, size=1000, p=list(target.values()))
    h = estimate_histogram([ids[i] for i in draws], ids)
    assert l2_error(h, target) <= 0.05
