"""Unit tests for forecast distributions and scoring rules."""

import numpy as np
import pytest

import enspost.autodiff as ad
from enspost import dist
from enspost.errors import DomainError
from oracles import (bernstein_quantile_ref, crps_ensemble_exact,
                     crps_ensemble_pairwise, crps_tlogis_mp,
                     crps_tlogis_quad, pinball_ref)


# ---------------------------------------------------------------------------
# Distribution types
# ---------------------------------------------------------------------------


def test_trunc_logistic_validates_scale():
    with pytest.raises(DomainError):
        dist.TruncLogistic(1.0, 0.0)
    with pytest.raises(DomainError):
        dist.TruncLogistic(1.0, -2.0)


def test_bernstein_quantile_requires_monotone_alpha():
    dist.BernsteinQuantile(np.array([0.0, 0.0, 1.0]))   # ties allowed
    with pytest.raises(DomainError):
        dist.BernsteinQuantile(np.array([0.0, 1.0, 0.5]))
    with pytest.raises(DomainError):
        dist.BernsteinQuantile(np.array([0.0, np.inf]))


def test_quantile_levels_equidistant_grid():
    levels = dist.QuantileLevels.equidistant(99)
    assert len(levels) == 99
    assert levels.levels[0] == pytest.approx(0.01)
    assert levels.levels[-1] == pytest.approx(0.99)
    with pytest.raises(DomainError):
        dist.QuantileLevels(np.array([0.2, 0.2]))
    with pytest.raises(DomainError):
        dist.QuantileLevels(np.array([0.0, 0.5]))


# ---------------------------------------------------------------------------
# Bernstein machinery
# ---------------------------------------------------------------------------


def test_bernstein_basis_partition_of_unity_and_oracle():
    p = np.linspace(0.0, 1.0, 21)
    basis = dist.bernstein_basis(12, p)
    np.testing.assert_allclose(basis.sum(axis=-1), 1.0, atol=1e-12)
    alpha = np.sort(np.random.default_rng(0).normal(0, 2, 13))
    bq = dist.BernsteinQuantile(alpha)
    for pi in (0.0, 0.013, 0.5, 0.87, 1.0):
        assert float(dist.bqn_quantile(bq, pi)) == pytest.approx(
            bernstein_quantile_ref(alpha, pi), abs=1e-12)


def test_bqn_coefficients_monotone_and_batched():
    rng = np.random.default_rng(1)
    theta = rng.normal(0, 3, size=(50, 13))
    alpha = dist.bqn_coefficients(theta)
    assert alpha.shape == (50, 13)
    assert np.all(np.diff(alpha, axis=-1) >= 0)
    np.testing.assert_allclose(alpha[:, 0], theta[:, 0])


def test_quantile_score_mean_matches_pinball_oracle():
    alpha = np.array([0.0, 1.0, 3.0])
    bq = dist.BernsteinQuantile(alpha)
    levels = dist.QuantileLevels(np.array([0.25, 0.5, 0.75]))
    y = 1.2
    expected = np.mean([2.0 * pinball_ref(
        bernstein_quantile_ref(alpha, p), y, p) for p in levels.levels])
    assert dist.quantile_score_mean(bq, y, levels) == pytest.approx(expected)


# ---------------------------------------------------------------------------
# Truncated logistic CRPS against quadrature oracles
# ---------------------------------------------------------------------------


def test_crps_tlogis_matches_quadrature_moderate_regime():
    rng = np.random.default_rng(2)
    for _ in range(25):
        mu = rng.uniform(-3, 12)
        sigma = rng.uniform(0.1, 5)
        y = rng.uniform(-2, 15)
        ours = dist.crps_tlogis(dist.TruncLogistic(mu, sigma), y)
        assert ours == pytest.approx(crps_tlogis_quad(mu, sigma, y),
                                     abs=1e-9)


def test_crps_tlogis_stable_under_heavy_truncation():
    # standardized truncation points from mild to far past the deep-regime
    # switch; the textbook closed form loses all digits here
    cases = [(-14.9, 7e-4, 23.5), (-47.6, 6.6e-4, 53.0), (-1e4, 1e-3, 5.0),
             (-500.0, 0.01, -2.0), (-16.35, 1.0, 3.0), (-32.0, 1.0, 1.0),
             (5.0, 1e-5, 5.2), (299.0, 1.0, 310.0), (301.0, 1.0, 310.0)]
    for mu, sigma, y in cases:
        ours = dist.crps_tlogis(dist.TruncLogistic(mu, sigma), y)
        ref = crps_tlogis_mp(mu, sigma, y)
        assert ours == pytest.approx(ref, rel=1e-10), (mu, sigma, y)


def test_crps_tlogis_observation_below_bound_adds_linear_penalty():
    d = dist.TruncLogistic(2.0, 1.0, lower=0.0)
    base = dist.crps_tlogis(d, 0.0)
    below = dist.crps_tlogis(d, -3.0)
    assert below == pytest.approx(base + 3.0)


def test_crps_tlogis_differentiable_core_matches_numpy_core():
    rng = np.random.default_rng(3)
    mu = rng.normal(5, 3, size=8)
    sigma = rng.uniform(0.2, 3, size=8)
    y = rng.normal(5, 4, size=8)
    plain = dist.crps_tlogis_core(mu, sigma, y, 0.0)
    tens = dist.crps_tlogis_core(ad.constant(mu), ad.constant(sigma),
                                 ad.constant(y), 0.0, ops=dist.TENSOR_OPS)
    np.testing.assert_allclose(tens.value, plain, rtol=1e-14)


def test_tlogis_cdf_quantile_roundtrip():
    d = dist.TruncLogistic(1.5, 0.7)
    p = np.linspace(0.01, 0.99, 25)
    x = dist.tlogis_quantile(d, p)
    np.testing.assert_allclose(dist.tlogis_cdf(d, x), p, atol=1e-12)
    assert np.all(np.asarray(x) >= 0.0)
    with pytest.raises(DomainError):
        dist.tlogis_quantile(d, 0.0)


def test_tlogis_map_softplus_scale():
    d = dist.tlogis_map(np.array([3.0, -40.0]))
    assert d.location == 3.0
    assert d.scale == pytest.approx(dist.SCALE_FLOOR, rel=1e-6)


# ---------------------------------------------------------------------------
# Ensemble CRPS
# ---------------------------------------------------------------------------


def test_crps_sample_matches_exact_ecdf_integral():
    rng = np.random.default_rng(4)
    for _ in range(50):
        m = int(rng.integers(2, 11))
        members = np.sort(rng.normal(0, 3, m))
        y = rng.normal(0, 3)
        ours = dist.crps_sample(members, y)
        assert ours == pytest.approx(crps_ensemble_exact(members, y),
                                     abs=1e-12)
        assert ours == pytest.approx(crps_ensemble_pairwise(members, y),
                                     abs=1e-12)


def test_crps_sample_batch_matches_scalar():
    rng = np.random.default_rng(5)
    values = np.sort(rng.normal(0, 2, size=(20, 7)), axis=1)
    y = rng.normal(0, 2, size=20)
    batch = dist.crps_sample_batch(values, y)
    scalar = [dist.crps_sample(row, yi) for row, yi in zip(values, y)]
    np.testing.assert_allclose(batch, scalar, rtol=1e-13)


def test_crps_sample_degenerate_singleton_is_absolute_error():
    assert dist.crps_sample(np.array([2.0]), 5.0) == pytest.approx(3.0)
    with pytest.raises(DomainError):
        dist.crps_sample(np.array([]), 1.0)


# ---------------------------------------------------------------------------
# PIT
# ---------------------------------------------------------------------------


def test_pit_tlogis_is_cdf():
    d = dist.TruncLogistic(2.0, 1.0)
    rng = np.random.default_rng(6)
    assert dist.pit(d, 2.0, rng) == pytest.approx(dist.tlogis_cdf(d, 2.0))


def test_pit_bernstein_inverts_quantile_function():
    alpha = np.array([0.0, 0.5, 1.5, 4.0])
    bq = dist.BernsteinQuantile(alpha)
    rng = np.random.default_rng(7)
    for p in (0.1, 0.42, 0.9):
        y = float(dist.bqn_quantile(bq, p))
        assert dist.pit(bq, y, rng) == pytest.approx(p, abs=1e-6)
    assert dist.pit(bq, -1.0, rng) == 0.0
    assert dist.pit(bq, 9.0, rng) == 1.0


def test_pit_bernstein_flat_segment_randomizes_uniformly():
    # a degenerate (constant) quantile function maps its single support
    # point to uniform draws over the whole unit interval
    alpha = np.array([1.0, 1.0, 1.0, 1.0])
    bq = dist.BernsteinQuantile(alpha)
    rng = np.random.default_rng(8)
    draws = np.array([dist.pit(bq, 1.0, rng) for _ in range(200)])
    assert draws.std() > 0.05          # actually randomized
    assert draws.min() >= 0.0 and draws.max() <= 1.0


def test_pit_calibrated_tlogis_sample_is_uniform():
    d = dist.TruncLogistic(3.0, 1.2)
    rng = np.random.default_rng(9)
    y = dist.tlogis_quantile(d, rng.uniform(size=2000))
    pits = dist.tlogis_cdf(d, y)
    hist, _ = np.histogram(pits, bins=10, range=(0, 1))
    assert hist.min() > 140 and hist.max() < 260
