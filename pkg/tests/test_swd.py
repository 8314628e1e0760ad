import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dacad import _kernels
from dacad.numerics import DimensionError
from dacad.swd import (ProjectionSet, SampleSizeError, StaleEstimateError, SwdConfig,
                       mc_convergence_probe, sample_unit_directions, sliced_wasserstein,
                       swd_backward, swd_estimate, wasserstein_1d)

from conftest import brute_force_matching, central_difference, max_rel_err


def test_directions_are_unit(rng):
    P = sample_unit_directions(50, 7, seed=3)
    np.testing.assert_allclose(np.linalg.norm(P.directions, axis=1), 1.0, atol=1e-9)


def test_directions_in_one_dimension_are_signs():
    P = sample_unit_directions(40, 1, seed=0)
    assert set(np.unique(P.directions)) <= {-1.0, 1.0}


def test_directions_deterministic():
    a = sample_unit_directions(8, 3, seed=11).directions
    b = sample_unit_directions(8, 3, seed=11).directions
    assert a.tobytes() == b.tobytes()


def test_directions_reject_zero_dimension():
    with pytest.raises(DimensionError):
        sample_unit_directions(4, 0, seed=0)


def test_directions_roughly_uniform():
    # mean of uniform directions on the sphere is 0; second moment is I/f
    d = sample_unit_directions(20000, 3, seed=5).directions
    np.testing.assert_allclose(d.mean(axis=0), 0.0, atol=0.03)
    np.testing.assert_allclose(d.T @ d / len(d), np.eye(3) / 3, atol=0.02)


def test_wasserstein_1d_examples():
    assert wasserstein_1d([1, 2, 3], [1, 2, 3]) == 0.0
    assert wasserstein_1d([0], [2]) == 4.0
    assert wasserstein_1d([1, 2], [3, 5]) == pytest.approx(6.5)
    assert wasserstein_1d([1, 2], [3, 5], normalization="sum") == pytest.approx(13.0)
    assert wasserstein_1d([2, 1], [5, 3]) == pytest.approx(6.5)


def test_wasserstein_1d_matches_exhaustive_matching(rng):
    for _ in range(50):
        n = int(rng.integers(1, 7))
        a, b = rng.standard_normal(n), rng.standard_normal(n) * 2
        for p in (1.0, 2.0, 3.0):
            assert wasserstein_1d(a, b, p) == pytest.approx(brute_force_matching(a, b, p), abs=1e-9)


def test_wasserstein_1d_rejects_unequal_sizes():
    with pytest.raises(SampleSizeError):
        wasserstein_1d([1, 2], [1])


def test_swd_identical_sets_any_order(rng):
    x = rng.standard_normal((30, 4))
    est = swd_estimate(x, x[rng.permutation(30)], SwdConfig(num_projections=64))
    assert est.value == pytest.approx(0.0, abs=1e-12)


def test_swd_symmetric_under_shared_projections(rng):
    xs, xt = rng.standard_normal((20, 3)), rng.standard_normal((20, 3)) + 1
    P = sample_unit_directions(32, 3, seed=1)
    cfg = SwdConfig()
    assert swd_estimate(xs, xt, cfg, P).value == pytest.approx(swd_estimate(xt, xs, cfg, P).value,
                                                               abs=1e-12)


def test_swd_one_dimension_collapses_to_1d_distance(rng):
    xs, xt = rng.standard_normal((15, 1)), rng.standard_normal((15, 1)) * 3
    ref = wasserstein_1d(xs, xt)
    for L in (1, 5, 33):
        assert swd_estimate(xs, xt, SwdConfig(num_projections=L, seed=L)).value == \
            pytest.approx(ref, abs=1e-12)


def test_swd_scale_behavior(rng):
    xs, xt = rng.standard_normal((25, 3)), rng.standard_normal((25, 3)) + 0.5
    P = sample_unit_directions(16, 3, seed=2)
    base = swd_estimate(xs, xt, SwdConfig(), P).value
    assert swd_estimate(3 * xs, 3 * xt, SwdConfig(), P).value == pytest.approx(9 * base, rel=1e-12)


def test_swd_sum_mode_is_n_times_mean(rng):
    xs, xt = rng.standard_normal((12, 2)), rng.standard_normal((12, 2))
    P = sample_unit_directions(10, 2, seed=0)
    mean = swd_estimate(xs, xt, SwdConfig(normalization="mean"), P).value
    total = swd_estimate(xs, xt, SwdConfig(normalization="sum"), P).value
    assert total == pytest.approx(12 * mean, rel=1e-12)


def test_swd_permutations_are_bijections(rng):
    est = swd_estimate(rng.standard_normal((9, 3)), rng.standard_normal((9, 3)), SwdConfig(num_projections=5))
    for order in (est.source_order, est.target_order):
        assert np.all(np.sort(order, axis=1) == np.arange(9))


def test_swd_errors(rng):
    with pytest.raises(SampleSizeError):
        swd_estimate(np.zeros((3, 2)), np.zeros((4, 2)), SwdConfig())
    with pytest.raises(SampleSizeError):
        swd_estimate(np.zeros((0, 2)), np.zeros((0, 2)), SwdConfig())
    with pytest.raises(DimensionError):
        swd_estimate(np.zeros((3, 2)), np.zeros((3, 2)), SwdConfig(),
                     sample_unit_directions(4, 3, seed=0))


def test_swd_config_validation():
    with pytest.raises(ValueError):
        SwdConfig(num_projections=0)
    with pytest.raises(ValueError):
        SwdConfig(p=0)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_swd_nonnegative_and_permutation_invariant(n, f, seed):
    r = np.random.default_rng(seed)
    xs, xt = r.standard_normal((n, f)), r.standard_normal((n, f))
    P = sample_unit_directions(8, f, seed)
    cfg = SwdConfig()
    v = swd_estimate(xs, xt, cfg, P).value
    assert v >= 0
    assert swd_estimate(xs[r.permutation(n)], xt[r.permutation(n)], cfg, P).value == \
        pytest.approx(v, abs=1e-12)


def test_backward_zero_for_identical_inputs(rng):
    x = rng.standard_normal((10, 3))
    cfg = SwdConfig(num_projections=8)
    est = swd_estimate(x, x, cfg)
    gs, gt = swd_backward(est, x, x, cfg)
    assert np.all(gs == 0) and np.all(gt == 0)


@pytest.mark.parametrize("p,normalization", [(2.0, "mean"), (2.0, "sum"), (3.0, "mean"), (1.5, "sum")])
def test_backward_matches_finite_differences(rng, p, normalization):
    xs, xt = rng.standard_normal((8, 3)), rng.standard_normal((8, 3)) + 1
    cfg = SwdConfig(num_projections=6, p=p, normalization=normalization)
    P = sample_unit_directions(6, 3, seed=9)
    est = swd_estimate(xs, xt, cfg, P)
    gs, gt = swd_backward(est, xs, xt, cfg)
    fs = central_difference(lambda a: swd_estimate(a, xt, cfg, P).value, xs)
    ft = central_difference(lambda b: swd_estimate(xs, b, cfg, P).value, xt)
    assert max_rel_err(gs, fs) < 1e-5
    assert max_rel_err(gt, ft) < 1e-5


def test_backward_explicit_formula(rng):
    xs, xt = rng.standard_normal((5, 2)), rng.standard_normal((5, 2))
    cfg = SwdConfig(num_projections=3)
    P = sample_unit_directions(3, 2, seed=4)
    est = swd_estimate(xs, xt, cfg, P)
    gs, _ = swd_backward(est, xs, xt, cfg)
    ref = np.zeros_like(xs)
    for l, g in enumerate(P.directions):
        for i in range(5):
            si, ti = est.source_order[l, i], est.target_order[l, i]
            ref[si] += 2 / (3 * 5) * (g @ xs[si] - g @ xt[ti]) * g
    np.testing.assert_allclose(gs, ref, atol=1e-14)


def test_backward_gradients_cancel(rng):
    xs, xt = rng.standard_normal((11, 4)), rng.standard_normal((11, 4))
    _, gs, gt = sliced_wasserstein(xs, xt, SwdConfig(num_projections=20))
    np.testing.assert_allclose(gs.sum(axis=0), -gt.sum(axis=0), atol=1e-12)


def test_backward_rejects_stale_estimate(rng):
    cfg = SwdConfig(num_projections=4)
    est = swd_estimate(rng.standard_normal((6, 2)), rng.standard_normal((6, 2)), cfg)
    with pytest.raises(StaleEstimateError):
        swd_backward(est, np.zeros((7, 2)), np.zeros((7, 2)), cfg)


def test_probe_zero_spread_for_identical_inputs(rng):
    x = rng.standard_normal((20, 2))
    assert np.all(mc_convergence_probe(x, x, [1, 10, 100], n_seeds=10) == 0)


def test_probe_rate(rng):
    xs = rng.standard_normal((200, 2))
    xt = rng.standard_normal((200, 2)) * [1.0, 2.0] + [1.0, 0.0]
    std = mc_convergence_probe(xs, xt, [10, 100, 1000], n_seeds=50, seed=0)
    assert 1 / 20 <= std[2] / std[0] <= 1 / 5
    assert std[0] > std[1] > std[2]


def test_probe_validation(rng):
    x = rng.standard_normal((5, 2))
    with pytest.raises(ValueError):
        mc_convergence_probe(x, x, [10], n_seeds=5)
    with pytest.raises(ValueError):
        mc_convergence_probe(x, x, [100, 10], n_seeds=10)


@pytest.mark.skipif(not _kernels.HAVE_NUMBA, reason="numba not installed")
def test_numba_and_numpy_kernels_agree(rng):
    ps, pt = rng.standard_normal((16, 40)), rng.standard_normal((16, 40))
    ps[:, 5] = ps[:, 6]  # exercise tie-breaking
    for p in (2.0, 1.5):
        c1, s1, t1 = _kernels.sorted_costs_numpy(ps, pt, p)
        c2, s2, t2 = _kernels.sorted_costs_numba(ps, pt, p)
        np.testing.assert_array_equal(s1, s2)
        np.testing.assert_array_equal(t1, t2)
        np.testing.assert_allclose(c1, c2, rtol=1e-13)
        g1 = _kernels.scatter_coeffs_numpy(ps, pt, s1, t1, p, 0.01)
        g2 = _kernels.scatter_coeffs_numba(ps, pt, s2, t2, p, 0.01)
        for a, b in zip(g1, g2):
            np.testing.assert_allclose(a, b, rtol=1e-13, atol=0)


def test_stable_sort_breaks_ties_by_index():
    x = np.zeros((4, 1))
    est = swd_estimate(x, x, SwdConfig(num_projections=2))
    np.testing.assert_array_equal(est.source_order, [[0, 1, 2, 3]] * 2)
