import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from dimap.distortion import (
    MlpNet,
    analytic_bound,
    brute_force_all_budgets,
    brute_force_mask,
    check_bound,
    frobenius_gap,
    mlp_forward,
    random_bound_case,
    relu_lipschitz_gap,
    run_battery,
    spectral_norm,
    top_magnitude_mask,
    unit_sphere,
)
from dimap.errors import BoundViolated, DimMismatch, ShapeMismatch, TooLarge
from dimap.importance import layer_scores


def test_frobenius_gap_examples():
    assert frobenius_gap([1, 2], [0, 1]) == (1.0, 1.0)
    assert frobenius_gap([[1, 2], [3, 4]], np.ones((2, 2))) == (0.0, 0.0)
    with pytest.raises(ShapeMismatch):
        frobenius_gap([1, 2], [1])


def test_frobenius_identity_random(rng):
    for _ in range(1000):
        W = rng.normal(size=(8, 8))
        direct, closed = frobenius_gap(W, rng.integers(0, 2, size=(8, 8)))
        assert abs(direct - closed) < 1e-12 * np.linalg.norm(W)


def test_brute_force_examples():
    mask, dist = brute_force_mask([0.9, 0.5, 0.1], 2)
    assert mask.tolist() == [True, True, False]
    assert dist == pytest.approx(0.1, rel=1e-15)
    mask, dist = brute_force_mask([0.9, -0.5, 0.1], 0)
    assert not mask.any()
    assert dist == pytest.approx(math.sqrt(0.81 + 0.25 + 0.01))


def test_brute_force_against_itertools():
    # Second, slower enumeration via itertools.combinations over keep-sets.
    w = np.array([0.3, -1.2, 0.7, 0.05, -0.6])
    for s in range(w.size + 1):
        best = min(
            (sum(w[i] ** 2 for i in range(w.size) if i not in keep), keep)
            for k in range(s + 1)
            for keep in itertools.combinations(range(w.size), k)
        )
        mask, dist = brute_force_mask(w, s)
        assert sorted(np.flatnonzero(mask).tolist()) == sorted(best[1])
        assert dist == pytest.approx(math.sqrt(best[0]))


def test_brute_force_tie_break_keeps_lower_indices():
    mask, _ = brute_force_mask([1.0, 1.0, 1.0], 1)
    assert mask.tolist() == [True, False, False]
    mask, _ = brute_force_mask([0.0, 2.0, 0.0], 3)
    assert mask.tolist() == [True, True, True]


def test_brute_force_limits():
    with pytest.raises(TooLarge):
        brute_force_mask(np.ones(17), 3)
    with pytest.raises(ValueError):
        brute_force_mask([1.0], 2)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-10, 10, allow_nan=False)))
def test_optimum_is_top_magnitude_all_budgets(w):
    for s, best in enumerate(brute_force_all_budgets(w)):
        # With ties or zeros several masks are optimal; the distortions agree.
        d_best = frobenius_gap(w, best)[1]
        d_top = frobenius_gap(w, top_magnitude_mask(w, s))[1]
        assert d_best == pytest.approx(d_top, abs=1e-12)
        if len(set(np.square(w).tolist())) == w.size:
            assert np.array_equal(best, top_magnitude_mask(w, s))


def test_mlp_forward_examples():
    assert mlp_forward(MlpNet([[[2.0]]]), [1.0]).tolist() == [2.0]
    assert mlp_forward(MlpNet([[[-1.0]], [[5.0]]]), [1.0]).tolist() == [0.0]
    with pytest.raises(DimMismatch):
        mlp_forward(MlpNet([[[1.0, 2.0]]]), [1.0])
    with pytest.raises(DimMismatch):
        MlpNet([np.ones((2, 3)), np.ones((2, 3))])


def test_mlp_forward_matches_straight_line(rng):
    for _ in range(20):
        W1, W2, W3 = rng.normal(size=(5, 4)), rng.normal(size=(6, 5)), rng.normal(size=(3, 6))
        x = rng.normal(size=4)
        h1 = [max(0.0, sum(W1[i, j] * x[j] for j in range(4))) for i in range(5)]
        h2 = [max(0.0, sum(W2[i, j] * h1[j] for j in range(5))) for i in range(6)]
        out = [sum(W3[i, j] * h2[j] for j in range(6)) for i in range(3)]
        got = mlp_forward(MlpNet([W1, W2, W3]), x)
        assert np.allclose(got, out, rtol=0, atol=1e-12)
        batch = mlp_forward(MlpNet([W1, W2, W3]), np.stack([x, 2 * x], axis=1))
        assert np.allclose(batch[:, 0], got) and np.allclose(batch[:, 1], 2 * got)


def test_unit_sphere(rng):
    x = unit_sphere(100, 7, rng)
    assert np.allclose(np.linalg.norm(x, axis=0), 1.0)


def test_single_layer_bound_is_tight():
    rep = check_bound(MlpNet([[[2.0]]]), 0, [[0]], samples=10, seed=0)
    assert rep.empirical_sup == 2.0
    assert rep.analytic_bound == 2.0
    assert rep.tightness == 1.0


def test_no_pruning_gives_zero_gap(rng):
    net = MlpNet.random([6, 5, 4], rng)
    rep = check_bound(net, 1, np.ones((4, 5)), samples=50, seed=1)
    assert rep.empirical_sup == 0.0 and rep.analytic_bound == 0.0


def test_bound_inputs_validated(rng):
    net = MlpNet.random([6, 5, 4], rng)
    with pytest.raises(DimMismatch):
        check_bound(net, 2, np.ones((4, 5)), 10, 0)
    with pytest.raises(DimMismatch):
        check_bound(net, 0, np.ones((4, 5)), 10, 0)


def test_corrupted_bound_raises(rng):
    net, l, mask = random_bound_case(0, 0)
    with pytest.raises(BoundViolated):
        check_bound(net, l, mask, 200, 0, bound_scale=1e-6)


def test_bound_monte_carlo():
    for k in range(100):
        net, l, mask = random_bound_case(11, k)
        rep = check_bound(net, l, mask, 1000, seed=k)
        assert 0 <= rep.tightness <= 1
        assert rep.sample_count == 1000


def test_bound_reproducible():
    net, l, mask = random_bound_case(3, 3)
    assert check_bound(net, l, mask, 100, 5) == check_bound(net, l, mask, 100, 5)


def test_spectral_examples():
    assert spectral_norm(np.eye(3)) == pytest.approx(1.0, abs=1e-15)
    assert np.linalg.norm(np.eye(3)) == pytest.approx(math.sqrt(3))
    u, v = np.array([1.0, 2.0, -2.0]), np.array([3.0, 4.0])
    s = spectral_norm(np.outer(u, v), iterations=5)
    assert s == pytest.approx(np.linalg.norm(np.outer(u, v)), rel=1e-12)
    assert s == pytest.approx(15.0, rel=1e-12)
    assert spectral_norm(np.zeros((3, 2))) == 0.0


def test_spectral_against_svd_and_frobenius(rng):
    for k in range(500):
        W = rng.normal(size=tuple(rng.integers(1, 10, size=2)))
        s = spectral_norm(W, 200, seed=k)
        assert s <= np.linalg.norm(W) + 1e-9
        assert s == pytest.approx(np.linalg.svd(W, compute_uv=False)[0], rel=1e-4)


def test_relu_lipschitz(rng):
    for _ in range(1000):
        a, b = rng.normal(size=(2, 10))
        lhs, rhs = relu_lipschitz_gap(a, b)
        assert lhs <= rhs


def test_lowest_score_weight_gives_smallest_bound(rng):
    for _ in range(30):
        net = MlpNet.random([5, 6, 4], rng)
        l = int(rng.integers(0, 2))
        W = net.layers[l]
        scores = layer_scores(W).reshape(W.shape)
        lowest = np.unravel_index(np.argmin(scores), W.shape)

        def single_removal_bound(idx):
            m = np.ones(W.shape)
            m[idx] = 0
            return analytic_bound(net, l, m)

        b_low = single_removal_bound(lowest)
        for idx in np.ndindex(W.shape):
            if scores[idx] > scores[lowest]:
                assert b_low <= single_removal_bound(idx)


def test_battery_passes_and_scales():
    results, rows = run_battery(seed=2, trials=5, samples=100)
    assert all(r.passed for r in results)
    assert [r.cases for r in results if r.name == "frobenius_identity"] == [50]
    assert len(rows) == 5
    results, _ = run_battery(seed=2, trials=5, samples=100, bound_scale=1e-6)
    assert not next(r for r in results if r.name == "module_bound").passed
    with pytest.raises(ValueError):
        run_battery(trials=0)
