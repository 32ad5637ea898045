import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from koopwatch.cluster import (
    ClusterConfig,
    ClusterError,
    correlation_distance,
    kmeans,
    misclassification_rate,
)
from koopwatch.detect import SparsityPattern


def test_correlation_examples():
    assert correlation_distance([1, 2, 3], [1, 2, 3]) == pytest.approx(0.0, abs=1e-15)
    assert correlation_distance([1, 2, 3], [3, 2, 1]) == pytest.approx(2.0)
    assert correlation_distance([1, 0, 1, 0], [0, 1, 0, 1]) == pytest.approx(2.0)


def test_tie_break_for_constant_vectors():
    assert correlation_distance([0, 0, 0], [0, 0, 0]) == 0.0
    assert correlation_distance([1, 1, 1], [0, 0, 0]) == 1.0
    assert correlation_distance([1, 1, 1], [0, 1, 0]) == 1.0


def test_correlation_against_numpy():
    rng = np.random.default_rng(0)
    for _ in range(50):
        u, v = rng.standard_normal((2, 9))
        assert correlation_distance(u, v) == pytest.approx(1 - np.corrcoef(u, v)[0, 1], abs=1e-12)


vec = st.lists(st.floats(-10, 10), min_size=3, max_size=12)


@settings(max_examples=200, deadline=None)
@given(data=st.data(), a=st.floats(0.1, 10), b=st.floats(-10, 10))
def test_positive_affine_invariance(data, a, b):
    rng = np.random.default_rng(data.draw(st.integers(0, 10_000)))
    n = data.draw(st.integers(3, 12))
    u, v = rng.standard_normal((2, n))
    assert correlation_distance(a * u + b, v) == pytest.approx(correlation_distance(u, v), abs=1e-9)


def _groups():
    a = np.array([1, 1, 0, 0, 1, 0, 0, 0], float)
    b = np.array([0, 0, 1, 1, 0, 1, 1, 0], float)
    return [a] * 4 + [b] * 3


def test_duplicate_groups_zero_inertia():
    res = kmeans(_groups(), ClusterConfig(k=2, seed=0))
    assert res.inertia == pytest.approx(0.0, abs=1e-12)
    assert len(set(res.assignment[:4])) == 1 and len(set(res.assignment[4:])) == 1
    assert res.assignment[0] != res.assignment[4]


def test_k_equals_n():
    rng = np.random.default_rng(1)
    X = rng.integers(0, 2, (6, 10))
    X[:, 0], X[:, 1] = 0, 1  # no constant rows
    res = kmeans(list(X), ClusterConfig(k=6))
    assert res.inertia == pytest.approx(0.0, abs=1e-12)
    assert sorted(res.assignment) == list(range(6))


def test_kmeans_deterministic():
    rng = np.random.default_rng(2)
    X = list(rng.standard_normal((30, 8)))
    a = kmeans(X, ClusterConfig(k=3, seed=4))
    b = kmeans(X, ClusterConfig(k=3, seed=4))
    assert np.array_equal(a.assignment, b.assignment)
    assert a.inertia == b.inertia


def test_inertia_history_monotone():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        X = list(rng.integers(0, 2, (40, 16)))
        res = kmeans(X, ClusterConfig(k=4, seed=seed, restarts=1))
        h = np.array(res.inertia_history)
        assert np.all(np.diff(h) <= 1e-9)


def test_accepts_patterns_and_constant_rows():
    pats = [SparsityPattern(np.zeros((2, 2), np.uint8))] * 2 + [
        SparsityPattern(np.array([[1, 0], [0, 1]], np.uint8))] * 2
    res = kmeans(pats, ClusterConfig(k=2))
    assert res.assignment[0] == res.assignment[1] != res.assignment[2] == res.assignment[3]
    assert res.inertia == 0.0


def test_kmeans_errors():
    with pytest.raises(ClusterError):
        kmeans([np.ones(3)], ClusterConfig(k=2))
    with pytest.raises(ClusterError):
        kmeans([np.ones(3), np.ones(4)], ClusterConfig(k=1))
    with pytest.raises(ClusterError):
        ClusterConfig(k=0)


def test_misclassification_examples():
    assert misclassification_rate([0, 0, 1, 1], ["a", "a", "b", "b"]) == 0.0
    assert misclassification_rate([1, 1, 0, 0], ["a", "a", "b", "b"]) == 0.0
    assert misclassification_rate([0, 1, 0, 1], ["a", "a", "b", "b"]) == 0.5
    labels = ["a"] * 10 + ["b"] * 10
    assign = [0] * 10 + [1] * 10
    for i in (0, 5, 12):
        assign[i] = 1 - assign[i]
    assert misclassification_rate(assign, labels) == pytest.approx(0.15)


def test_misclassification_unequal_counts():
    # three clusters, two labels: the smallest cluster cannot be matched
    assert misclassification_rate([0, 0, 1, 1, 2], list("aabbb")) == pytest.approx(0.2)
    assert misclassification_rate([0, 0, 0], list("abc")) == pytest.approx(2 / 3)
    with pytest.raises(ClusterError):
        misclassification_rate([0, 1], ["a"])


def _best_matching(conf):
    # bitmask DP over label subsets: exact maximum-weight matching
    n = conf.shape[0]
    best = {0: 0}
    for i in range(n):
        nxt = {}
        for mask, val in best.items():
            for j in range(n):
                if not mask >> j & 1:
                    m2 = mask | 1 << j
                    nxt[m2] = max(nxt.get(m2, -1), val + conf[i, j])
        best = nxt
    return max(best.values())


def test_misclassification_large_k_matches_dp():
    rng = np.random.default_rng(3)
    for _ in range(5):
        labels = rng.integers(0, 10, 60)
        assign = np.where(rng.random(60) < 0.7, (labels + 3) % 10, rng.integers(0, 10, 60))
        conf = np.zeros((10, 10), int)
        np.add.at(conf, (assign, labels), 1)
        assert misclassification_rate(assign, labels) == pytest.approx(
            1 - _best_matching(conf) / 60)


def test_misclassification_permutation_invariance():
    rng = np.random.default_rng(4)
    for _ in range(50):
        n, k = 15, 3
        assign = rng.integers(0, k, n)
        labels = rng.integers(0, k, n)
        base = misclassification_rate(assign, labels)
        for perm in itertools.permutations(range(k)):
            assert misclassification_rate(np.array(perm)[assign], labels) == base
        renamed = [f"L{x}" for x in (labels + 1) % k]
        assert misclassification_rate(assign, renamed) == base
