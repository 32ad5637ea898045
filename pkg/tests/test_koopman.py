import math

import numpy as np
import pytest

from koopwatch.koopman import (
    DegenerateDataError,
    Dictionary,
    KoopmanEstimate,
    SolverConfig,
    WindowTooSmallError,
    accumulate_moments,
    estimate_sequence,
    eval_dictionary,
    generate_centers,
    kkt_residual,
    lift,
    read_binary,
    solve_sparse,
    thin_plate,
    window_bounds,
    write_binary,
)
from koopwatch.timeseries import Dataset, slice_window

from _instances import random_moments, scalar_moments


def test_thin_plate_values():
    assert thin_plate(np.array([0.0]))[0] == 0.0
    assert thin_plate(np.array([1.0]))[0] == 0.0
    # r = e -> r^2 ln r = e^2
    assert thin_plate(np.array([math.e**2]))[0] == pytest.approx(math.e**2, rel=1e-14)


def test_dictionary_vanishes_at_own_center():
    rng = np.random.default_rng(0)
    d = Dictionary(rng.standard_normal((12, 3)))
    for i, c in enumerate(d.centers):
        assert eval_dictionary(d, c)[i] == 0.0
    assert np.allclose(lift(d, d.centers[:1])[0], eval_dictionary(d, d.centers[0]), rtol=1e-12)


def test_dictionary_validation():
    with pytest.raises(ValueError):
        Dictionary(np.zeros((3, 2)))
    with pytest.raises(ValueError):
        Dictionary(np.zeros((1, 2)))
    d = Dictionary(np.eye(2))
    with pytest.raises(ValueError):
        eval_dictionary(d, [1.0, 2.0, 3.0])


def _window(n=60, ch=3, seed=0):
    rng = np.random.default_rng(seed)
    return Dataset(tuple(f"c{i}" for i in range(ch)), 0.25, 0.5 + 0.1 * rng.standard_normal((n, ch)))


@pytest.mark.parametrize("seed", range(5))
def test_gram_is_psd(seed):
    ds = _window(seed=seed)
    d = generate_centers(ds, 15, 0.5, seed)
    m = accumulate_moments(d, ds)
    assert np.array_equal(m.G, m.G.T)
    ev = np.linalg.eigvalsh(m.G)
    assert ev.min() >= -1e-10 * ev.max()
    assert m.M == ds.num_samples - 1


def test_moments_need_two_samples():
    d = Dictionary(np.eye(3))
    with pytest.raises(WindowTooSmallError):
        accumulate_moments(d, _window(n=1))


def test_centers_deterministic_and_distinct():
    ds = _window()
    a = generate_centers(ds, 40, 0.3, 11)
    b = generate_centers(ds, 40, 0.3, 11)
    assert np.array_equal(a.centers, b.centers)
    assert len(np.unique(a.centers, axis=0)) == 40
    assert not np.array_equal(a.centers, generate_centers(ds, 40, 0.3, 12).centers)


def test_centers_degenerate():
    with pytest.raises(DegenerateDataError):
        generate_centers(Dataset(("a",), 1.0, np.ones(10)), 5, 0.0, 0)


def test_centers_std_spread():
    rng = np.random.default_rng(5)
    vals = rng.standard_normal((400, 2)) * [1.0, 3.0]
    ds = Dataset(("a", "b"), 1.0, vals)
    d = generate_centers(ds, 4000, 0.5, 0, reference="std")
    # centers = row + noise; var(center) = var(data) + (0.5 std)^2
    expected = np.sqrt(1.25) * vals.std(axis=0, ddof=0)
    assert np.allclose(d.centers.std(axis=0), expected, rtol=0.05)


# -- solver oracles -----------------------------------------------------------


def test_least_squares_oracle():
    rng = np.random.default_rng(0)
    for _ in range(10):
        D = int(rng.integers(2, 21))
        m = random_moments(rng, D)
        est = solve_sparse(m, 0.0, 0.0)
        ref = np.linalg.pinv(m.G) @ m.A
        assert np.linalg.norm(est.K - ref) <= 1e-6 * np.linalg.norm(ref)


@pytest.mark.parametrize("alpha", [0, 8, 24, 40, 48, 60])
def test_scalar_closed_form(alpha):
    # hand subgradient solution of (6 - 4k)^2 + alpha |k|
    expected = max(48 - alpha, 0) / 32
    est = solve_sparse(scalar_moments(6.0, 4.0), alpha)
    assert abs(est.K[0, 0] - expected) <= 1e-10


def test_large_beta_pulls_to_previous():
    rng = np.random.default_rng(1)
    m = random_moments(rng, 6)
    prev = rng.standard_normal((6, 6))
    est = solve_sparse(m, 0.0, 1e8, prev)
    assert np.allclose(est.K, prev, atol=1e-5)


def test_alpha_above_gradient_gives_zero():
    rng = np.random.default_rng(2)
    m = random_moments(rng, 8)
    alpha = 2.0 * np.abs(m.G.T @ m.A).max() * 1.0001
    assert not np.any(solve_sparse(m, alpha).K)


def test_beta_requires_previous():
    rng = np.random.default_rng(3)
    with pytest.raises(ValueError):
        solve_sparse(random_moments(rng, 3), 0.1, 0.5, None)


@pytest.mark.parametrize("rule", ["fixed", "backtracking"])
def test_history_non_increasing_and_kkt(rule):
    rng = np.random.default_rng(4)
    m = random_moments(rng, 10)
    prev = 0.1 * rng.standard_normal((10, 10))
    cfg = SolverConfig(step_rule=rule, record_history=True)
    est = solve_sparse(m, 0.05, 0.3, prev, cfg)
    h = np.array(est.history)
    assert np.all(np.diff(h) <= 1e-12 * np.abs(h[:-1]))
    assert est.kkt_residual <= 1e-4
    assert est.kkt_residual == pytest.approx(kkt_residual(m, est.K, 0.05, 0.3, prev))
    zero = solve_sparse(m, 0.05, 0.3, prev, SolverConfig(max_iterations=1))
    assert est.objective <= zero.objective


def test_objective_not_worse_than_anchors():
    rng = np.random.default_rng(6)
    m = random_moments(rng, 7)
    prev = rng.standard_normal((7, 7))
    est = solve_sparse(m, 0.2, 0.5, prev)
    def f(K):
        return (np.linalg.norm(m.A - m.G @ K) ** 2 + 0.2 * np.abs(K).sum()
                + 0.5 * np.linalg.norm(K - prev) ** 2)
    assert est.objective <= f(np.zeros((7, 7))) + 1e-12
    assert est.objective <= f(prev) + 1e-12
    assert est.objective == pytest.approx(f(est.K), rel=1e-12)


def test_sparsity_monotone_in_alpha():
    rng = np.random.default_rng(7)
    m = random_moments(rng, 12)
    nnz = [np.count_nonzero(solve_sparse(m, a).K) for a in (0.01, 0.05, 0.1, 0.5, 1.0)]
    assert nnz == sorted(nnz, reverse=True)


# -- windows ------------------------------------------------------------------


def test_window_bounds():
    assert window_bounds(11, 10, 5) == [(1, 11)]
    assert window_bounds(21, 10, 5) == [(1, 11), (6, 16), (11, 21)]
    with pytest.raises(WindowTooSmallError, match="window exceeds data"):
        window_bounds(10, 10, 5)


def test_single_window_when_data_is_exact():
    ds = _window(n=31)
    d = generate_centers(ds, 6, 0.5, 0)
    est = estimate_sequence(ds, d, 30, 5, 0.01, 0.0)
    assert len(est) == 1
    assert est[0].window == (1, 31)
    assert est[0].end_time == pytest.approx(ds.t0 + 30 * ds.dt)


def test_periodic_orbit_gives_equal_estimates():
    # period-21 rotation: every 21-step window holds the same transition pairs
    n = 200
    theta = 2 * math.pi / 21
    x = np.column_stack([np.cos(theta * np.arange(n)), np.sin(theta * np.arange(n))])
    ds = Dataset(("a", "b"), 1.0, x)
    d = generate_centers(slice_window(ds, 1, 22), 8, 0.5, 0)
    est = estimate_sequence(ds, d, 21, 21, 0.001, 0.0, warm_start=False)
    for e in est[1:]:
        assert np.allclose(e.K, est[0].K, atol=1e-6)


def test_chaining_stability():
    # identical consecutive windows: beta > 0 keeps K at least as steady as beta = 0
    n = 200
    theta = 2 * math.pi / 20
    rng = np.random.default_rng(0)
    x = np.column_stack([np.cos(theta * np.arange(n)), np.sin(theta * np.arange(n))])
    x += 1e-3 * rng.standard_normal(x.shape)
    ds = Dataset(("a", "b"), 1.0, x)
    d = generate_centers(slice_window(ds, 1, 21), 8, 0.5, 0)

    def drift(beta):
        est = estimate_sequence(ds, d, 60, 20, 0.01, beta)
        return max(np.linalg.norm(b.K - a.K) for a, b in zip(est, est[1:]))

    assert drift(0.5) <= drift(0.0) + 1e-9


# -- serialisation ------------------------------------------------------------


def test_binary_roundtrip(tmp_path):
    K = np.random.default_rng(0).standard_normal((4, 7))
    p = tmp_path / "k.bin"
    write_binary(K, p)
    raw = p.read_bytes()
    assert raw[:8] == b"KOOPEST1"
    assert len(raw) == 8 + 16 + 8 * 28
    assert np.array_equal(read_binary(p), K)


def test_binary_rejects_garbage(tmp_path):
    p = tmp_path / "x.bin"
    p.write_bytes(b"nope" * 10)
    with pytest.raises(ValueError):
        read_binary(p)


def test_json_roundtrip():
    rng = np.random.default_rng(1)
    e = KoopmanEstimate(rng.standard_normal((3, 3)), (1, 5), 0.1, 0.2, 1.5, 12, True, 1e-7, 2.0)
    back = KoopmanEstimate.from_json(e.to_json())
    assert np.array_equal(back.K, e.K)
    assert (back.window, back.alpha, back.beta, back.objective, back.end_time) == (
        (1, 5), 0.1, 0.2, 1.5, 2.0)
