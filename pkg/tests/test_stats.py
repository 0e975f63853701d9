import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import special, stats

from pln_sandwich.stats import (
    kolmogorov_sf,
    ks_pvalue_std_normal,
    ks_statistic_std_normal,
    normal_quantile,
    two_sided_quantile,
)


class TestNormalQuantile:
    def test_975(self):
        assert normal_quantile(0.975) == pytest.approx(1.959963984540054, abs=1e-12)
        assert two_sided_quantile(0.95) == pytest.approx(1.959964, abs=1e-6)
        assert two_sided_quantile(0.99) == pytest.approx(2.5758293, abs=1e-6)

    @settings(max_examples=200, deadline=None)
    @given(st.floats(1e-300, 1 - 1e-16, exclude_min=True))
    def test_matches_ndtri(self, prob):
        assert abs(normal_quantile(prob) - special.ndtri(prob)) <= 1e-9 * max(1.0, abs(special.ndtri(prob)))

    def test_symmetry(self):
        for prob in (1e-5, 0.01, 0.3):
            assert normal_quantile(prob) == pytest.approx(-normal_quantile(1 - prob), abs=1e-10)

    @pytest.mark.parametrize("bad", [0.0, 1.0, -0.1, float("nan")])
    def test_domain(self, bad):
        with pytest.raises(ValueError):
            normal_quantile(bad)


class TestKolmogorov:
    def test_half(self):
        # alternating series to four terms
        series = 2 * sum((-1) ** (k - 1) * math.exp(-2 * k * k * 0.25) for k in range(1, 5))
        assert kolmogorov_sf(0.5) == pytest.approx(0.9639, abs=1e-4)
        assert kolmogorov_sf(0.5) == pytest.approx(series, abs=1e-3)

    @pytest.mark.parametrize("lam", [0.05, 0.2, 0.5, 0.8, 1.0, 1.36, 2.0, 4.0])
    def test_matches_scipy(self, lam):
        assert kolmogorov_sf(lam) == pytest.approx(stats.kstwobign.sf(lam), abs=1e-12)

    def test_limits(self):
        assert kolmogorov_sf(0.0) == 1.0
        assert kolmogorov_sf(10.0) == 0.0 or kolmogorov_sf(10.0) < 1e-80


class TestKS:
    def test_single_zero(self):
        D, p = ks_pvalue_std_normal([0.0])
        assert D == 0.5
        lam = (1 + 0.12 + 0.11) * 0.5
        assert p == pytest.approx(kolmogorov_sf(lam), abs=1e-15)
        assert ks_statistic_std_normal([0.0]) == 0.5

    def test_exact_quantiles(self):
        n = 100
        z = special.ndtri((np.arange(1, n + 1) - 0.5) / n)
        D, p = ks_pvalue_std_normal(z)
        # F_n straddles Phi by exactly 1/(2n) at every jump
        assert D == pytest.approx(0.005, abs=1e-12) and p > 0.999

    def test_statistic_matches_scipy(self):
        z = np.random.default_rng(0).normal(size=300)
        D, _ = ks_pvalue_std_normal(z)
        assert D == pytest.approx(stats.kstest(z, "norm").statistic, abs=1e-14)

    def test_empty_and_nonfinite(self):
        with pytest.raises(ValueError):
            ks_pvalue_std_normal([])
        with pytest.raises(ValueError):
            ks_pvalue_std_normal([0.0, float("inf")])

    def test_calibrated_under_null(self):
        passes = sum(
            ks_pvalue_std_normal(np.random.default_rng(seed).standard_normal(10_000))[1] > 0.01
            for seed in range(100)
        )
        assert passes >= 95

    def test_detects_shift(self):
        z = np.random.default_rng(1).normal(0.5, 1.0, size=200)
        assert ks_pvalue_std_normal(z)[1] < 1e-3
