import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowsurprise.errors import InvalidArgument, UndefinedCorrelation
from flowsurprise.numerics import (
    Rng,
    average_ranks,
    error_stats,
    isotropic_gaussian_logpdf,
    sample_rademacher,
    spearman_permutation_test,
    spearman_rho,
)


class TestRademacher:
    def test_support(self):
        v = sample_rademacher(4, Rng(7))
        assert set(np.unique(v)) <= {-1.0, 1.0}

    @pytest.mark.parametrize("seed", [0, 1, 2, 123456789, 2**63])
    def test_mean_within_three_sigma(self, seed):
        n = 10_000
        v = sample_rademacher(n, Rng(seed, 5))
        assert abs(v.mean()) <= 3 / math.sqrt(n)

    def test_deterministic(self):
        a = sample_rademacher(50, Rng(3, 9))
        b = sample_rademacher(50, Rng(3, 9))
        np.testing.assert_array_equal(a, b)

    def test_streams_differ(self):
        a = sample_rademacher(64, Rng(3, 1))
        b = sample_rademacher(64, Rng(3, 2))
        assert not np.array_equal(a, b)
        c = sample_rademacher(64, Rng(3).child(1))
        d = sample_rademacher(64, Rng(3).child(2))
        assert not np.array_equal(c, d)

    def test_zero_length_rejected(self):
        with pytest.raises(InvalidArgument):
            sample_rademacher(0, Rng())


class TestGaussianLogpdf:
    def test_mode_2d(self):
        assert isotropic_gaussian_logpdf([0.0, 0.0], 1.0) == pytest.approx(-math.log(2 * math.pi))
        assert isotropic_gaussian_logpdf([0.0, 0.0], 1.0) == pytest.approx(-1.837877, abs=1e-6)

    def test_norm_two(self):
        z = [1.0, -1.0]
        assert isotropic_gaussian_logpdf(z, 1.0) == pytest.approx(-1 - math.log(2 * math.pi))

    def test_sigma_max(self):
        assert isotropic_gaussian_logpdf([0.0], 80.0) == pytest.approx(-0.5 * math.log(2 * math.pi * 6400))
        assert isotropic_gaussian_logpdf([0.0], 80.0) == pytest.approx(-5.300965, abs=1e-6)

    def test_bad_sigma(self):
        with pytest.raises(InvalidArgument):
            isotropic_gaussian_logpdf([0.0], 0.0)

    @pytest.mark.parametrize("sigma", [0.5, 1.0, 80.0])
    def test_integrates_to_one(self, sigma):
        # stratified Monte Carlo: one uniform draw per cell over [-6 sigma, 6 sigma]
        n = 100_000
        u = Rng(11).generator().random(n)
        x = -6 * sigma + (np.arange(n) + u) * (12 * sigma / n)
        mass = 12 * sigma * np.mean(np.exp(isotropic_gaussian_logpdf(x[:, None], sigma)))
        assert mass == pytest.approx(1.0, abs=1e-3)


class TestSpearman:
    def test_identical(self):
        assert spearman_rho([1, 2, 3], [10, 20, 30]) == pytest.approx(1.0)

    def test_reversed(self):
        assert spearman_rho([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)

    def test_hand_value(self):
        # 1 - 6 * sum(d^2) / (n (n^2 - 1)) with d = (0, 1, 1)
        assert spearman_rho([1, 2, 3], [1, 3, 2]) == pytest.approx(0.5)

    def test_ties_get_midranks(self):
        np.testing.assert_array_equal(average_ranks([3, 1, 3, 2]), [3.5, 1, 3.5, 2])

    def test_errors(self):
        with pytest.raises(InvalidArgument):
            spearman_rho([1, 2], [1, 2])
        with pytest.raises(InvalidArgument):
            spearman_rho([1, 2, 3], [1, 2])
        with pytest.raises(UndefinedCorrelation):
            spearman_rho([1, 1, 1], [1, 2, 3])

    @settings(max_examples=50, deadline=None)
    @given(
        st.lists(st.integers(-100, 100), min_size=3, max_size=30),
        st.integers(0, 2**32),
    )
    def test_monotone_invariance(self, xs, seed):
        xs = np.array(xs, dtype=float)
        ys = Rng(seed).generator().normal(size=len(xs))
        if np.ptp(xs) == 0:
            return
        base = spearman_rho(xs, ys)
        assert spearman_rho(np.exp(xs / 50), ys) == pytest.approx(base, abs=1e-12)
        assert spearman_rho(xs, np.tanh(ys) * 3 + 1) == pytest.approx(base, abs=1e-12)

    def test_permutation_test_self(self):
        x = np.arange(40.0)
        rho, p = spearman_permutation_test(x, x**2, 2000, Rng(1))
        assert rho == pytest.approx(1.0)
        assert p < 0.01

    def test_permutation_test_null(self):
        g = Rng(5).generator()
        ps = []
        for i in range(20):
            a, b = g.normal(size=(2, 60))
            ps.append(spearman_permutation_test(a, b, 500, Rng(5, i))[1])
        # p-values under the null are roughly uniform
        assert 0.25 < np.mean(ps) < 0.75


class TestErrorStats:
    def test_zero(self):
        s = error_stats([1.0, 2.0], [1.0, 2.0])
        assert s.mae_normalized == 0 and s.me_normalized == 0

    def test_constant_bias(self):
        ref = np.array([1.0, -2.0, 3.0])
        s = error_stats(ref + 0.3, ref)
        assert s.me_normalized > 0
        assert s.mae_normalized == pytest.approx(s.me_normalized)

    def test_hand_value(self):
        s = error_stats([1.1, 0.9], [1.0, 1.0])
        assert s.mae_normalized == pytest.approx(0.1)
        assert s.me_normalized == pytest.approx(0.0, abs=1e-15)

    def test_all_zero_reference(self):
        with pytest.raises(InvalidArgument):
            error_stats([1.0], [0.0])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3)), min_size=1, max_size=20))
    def test_me_bounded_by_mae(self, pairs):
        est, ref = np.array(pairs).T
        if np.all(ref == 0):
            return
        s = error_stats(est, ref)
        assert s.mae_normalized >= 0
        assert abs(s.me_normalized) <= s.mae_normalized + 1e-12
