import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from cosda import diffmath as dm
from cosda.errors import ConfigError, DataError, DimensionError, DomainError
from cosda.mixup import (MixupConfig, centroid_shrink_report, covariance_shrink_ratio,
                         expected_shrink_factor, mix_batch, sample_lambda, sample_truncated_beta,
                         theorem1_equivalents, theorem1_oracle, theta_bar_empirical, theta_bar_printed)


def test_config_validation():
    with pytest.raises(ConfigError):
        MixupConfig(a=0.0)


def test_sample_lambda_deterministic():
    a = [sample_lambda(MixupConfig(), np.random.default_rng(5)) for _ in range(2)]
    assert a[0] == a[1] and 0.0 <= a[0] <= 1.0


def test_beta22_moments():
    draws = np.random.default_rng(0).beta(2.0, 2.0, 1_000_000)
    assert abs(draws.mean() - 0.5) <= 0.001
    assert abs(draws.var() - 0.05) <= 0.002


def test_a1_draws_uniform():
    r = np.random.default_rng(1)
    draws = np.array([sample_lambda(MixupConfig(a=1.0), r) for _ in range(20_000)])
    big = r.beta(1.0, 1.0, 1_000_000)
    assert stats.kstest(draws, "uniform").pvalue > 1e-3
    assert stats.kstest(big, "uniform").pvalue > 1e-3


def test_forced_lambda_one_is_identity(rng):
    x, p = rng.standard_normal((6, 3)), dm.softmax(rng.standard_normal((6, 4)))
    mb = mix_batch(x, p, MixupConfig(), rng, lam=1.0)
    np.testing.assert_array_equal(mb.x_mixed, x)
    np.testing.assert_array_equal(mb.p_mixed, p)


def test_forced_half_swap_gives_midpoint():
    x = np.array([[0.0, 2.0], [4.0, 6.0]])
    p = np.array([[1.0, 0.0], [0.0, 1.0]])
    mb = mix_batch(x, p, MixupConfig(), np.random.default_rng(0), lam=0.5, perm=[1, 0])
    np.testing.assert_array_equal(mb.x_mixed, [[2.0, 4.0], [2.0, 4.0]])
    np.testing.assert_array_equal(mb.p_mixed, [[0.5, 0.5], [0.5, 0.5]])


def test_row_mismatch():
    with pytest.raises(DimensionError):
        mix_batch(np.ones((3, 2)), np.ones((4, 2)) / 2, MixupConfig(), np.random.default_rng(0))


def test_per_batch_default_and_per_row_option(rng):
    x, p = rng.standard_normal((8, 2)), dm.softmax(rng.standard_normal((8, 3)))
    mb = mix_batch(x, p, MixupConfig(), rng)
    assert np.unique(mb.lambdas).size == 1
    mb = mix_batch(x, p, MixupConfig(), rng, per_row=True)
    assert np.unique(mb.lambdas).size == 8
    assert sorted(mb.perm) == list(range(8))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 40), st.booleans())
def test_mixed_batch_invariants(seed, b, per_row):
    r = np.random.default_rng(seed)
    x, p = r.standard_normal((b, 3)), dm.softmax(3 * r.standard_normal((b, 5)))
    mb = mix_batch(x, p, MixupConfig(), r, per_row=per_row)
    lam = mb.lambdas[:, None]
    np.testing.assert_allclose(mb.x_mixed, lam * x + (1 - lam) * x[mb.perm], atol=1e-12)
    np.testing.assert_allclose(mb.p_mixed, lam * p + (1 - lam) * p[mb.perm], atol=1e-12)
    assert np.all(mb.p_mixed >= 0)
    np.testing.assert_allclose(mb.p_mixed.sum(axis=1), 1.0, atol=1e-12)
    # mixing commutes with affine feature maps for fixed lambda and pairing
    a, c = r.standard_normal((3, 3)), r.standard_normal(3)
    mb2 = mix_batch(x @ a + c, p, MixupConfig(), r, lam=mb.lambdas, perm=mb.perm)
    np.testing.assert_allclose(mb2.x_mixed, mb.x_mixed @ a + c, atol=1e-12)


def test_covariance_shrink_factor():
    assert expected_shrink_factor(2.0) == pytest.approx(0.6, abs=1e-15)
    r = np.random.default_rng(2)
    x = r.standard_normal((100_000, 3)) * [1.0, 2.0, 0.5]
    assert abs(covariance_shrink_ratio(x, 2.0, r) / 0.6 - 1) <= 0.02


def test_theta_bar_printed_examples():
    assert theta_bar_printed(2.0) == pytest.approx(2 / 3, abs=1e-15)
    assert theta_bar_printed(1.0) == 2.0
    assert theta_bar_printed(3.0) == pytest.approx(-0.4, abs=1e-15)
    with pytest.raises(DomainError):
        theta_bar_printed(0.5)


def test_theta_bar_empirical_examples():
    assert theta_bar_empirical(1.0) == pytest.approx(0.75, abs=1e-14)
    assert theta_bar_empirical(2.0) == pytest.approx(11 / 16, abs=1e-12)
    for a in (0.7, 2.0, 3.5):
        assert abs(theta_bar_empirical(a, 64) - theta_bar_empirical(a, 128)) < 1e-10


def test_theta_bar_empirical_against_scipy_truncated_mean():
    for a in (0.6, 1.5, 2.0, 5.0):
        dist = stats.beta(a, a)
        num = dist.expect(lambda t: t, lb=0.5, ub=1.0, conditional=True)
        assert theta_bar_empirical(a) == pytest.approx(num, abs=1e-9)


def test_truncated_sampler():
    draws = sample_truncated_beta(2.0, 200_000, np.random.default_rng(4))
    assert draws.min() >= 0.5
    assert abs(draws.mean() - 11 / 16) < 3 * draws.std() / np.sqrt(draws.size)


def test_theorem1_equivalents_examples(rng):
    x, p = rng.standard_normal((5, 2)), dm.softmax(rng.standard_normal((5, 3)))
    np.testing.assert_allclose(theorem1_equivalents(x, p, 1.0).x_squeezed, x, atol=1e-15)
    rep = theorem1_equivalents(x, p, 0.0)
    np.testing.assert_allclose(rep.x_squeezed, np.tile(x.mean(0), (5, 1)), atol=1e-15)
    rep = theorem1_equivalents([[0.0], [3.0]], [[1.0, 0.0], [0.0, 1.0]], 2 / 3)
    np.testing.assert_allclose(rep.centroid_x, [1.5])
    np.testing.assert_allclose(rep.x_squeezed, [[0.5], [2.5]], atol=1e-15)
    assert rep.theta_bar_used == 2 / 3
    with pytest.raises(DataError):
        theorem1_equivalents(np.zeros((0, 2)), np.zeros((0, 2)), 0.5)


def test_theorem1_oracle_small():
    r = np.random.default_rng(6)
    x, p = r.standard_normal((4, 2)), dm.softmax(r.standard_normal((4, 3)))
    rep = theorem1_oracle(x, p, 2.0, 200_000, r)
    assert rep.delta_within_clt and rep.epsilon_within_clt
    assert rep.theta_bar_empirical == pytest.approx(0.6875, abs=1e-12)
    assert rep.trials == 200_000
    rec = rep.to_json_record()
    json.dumps(rec)
    for key in ("theta_bar_printed", "theta_bar_empirical", "x_squeezed", "p_squeezed", "delta_mean_norm",
                "epsilon_mean_norm", "centroid_x", "centroid_p", "trials"):
        assert key in rec


def test_centroid_shrink_report_examples():
    r = np.random.default_rng(8)
    pts = r.standard_normal((500, 2))
    rep = centroid_shrink_report(pts, pts.copy(), 2.0, 1000, r)
    assert rep.centroid_distance_before == 0.0
    rep = centroid_shrink_report(pts, pts + 3.0, 2.0, 100_000, r)
    assert abs(rep.source_rms_after / rep.source_rms_before / np.sqrt(0.6) - 1) <= 0.03
    assert rep.centroids_preserved
    assert "centroid distance" in rep.to_table()
    with pytest.raises(DataError):
        centroid_shrink_report(np.zeros((0, 2)), pts, 2.0, 10, r)


def test_identical_clouds_mixed_centroid_distance_is_sampling_noise():
    r = np.random.default_rng(9)
    pts = r.standard_normal((300, 2))
    rep = centroid_shrink_report(pts, pts, 2.0, 100_000, r)
    # each side is mixed with its own draws, so only Monte-Carlo noise separates them
    assert rep.centroid_distance_after < 6 * np.sqrt(0.6 * 2 / 100_000) * 2
