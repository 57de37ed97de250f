import numpy as np
import pytest
from scipy import stats

from src.errors import TooFewPairs
from src.stats import exact_p_value, wilcoxon_signed_rank


class TestExact:
    def test_all_positive(self):
        result = wilcoxon_signed_rank([2, 3, 4, 5, 6], [1, 1, 1, 1, 1])
        assert result.statistic == 0.0
        assert result.p_value == pytest.approx(2 / 32)
        assert result.n_effective == 5
        assert result.method == "exact"

    @pytest.mark.parametrize(
        "differences",
        [
            [1.0, -2.0, 3.0, 4.0, 5.0, 6.0],
            [0.5, -1.5, 2.5, -3.5, 4.5, 5.5, 6.5, -7.5],
            [3.1, 1.2, -0.4, 2.2, 5.9, -4.4, 0.7, 1.8, 2.9, -3.3],
        ],
    )
    def test_agrees_with_scipy_without_ties(self, differences):
        d = np.asarray(differences)
        ours = wilcoxon_signed_rank(d, np.zeros_like(d))
        theirs = stats.wilcoxon(d, method="exact")
        assert ours.statistic == pytest.approx(theirs.statistic)
        assert ours.p_value == pytest.approx(theirs.pvalue, rel=1e-9)

    def test_ties_are_symmetric(self):
        d = np.array([1.0, 1.0, 2.0, -3.0, 4.0, -4.0, 2.0])
        assert exact_p_value(d) == pytest.approx(exact_p_value(-d))
        assert 0.0 < exact_p_value(d) <= 1.0

    def test_zero_differences_dropped(self):
        x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]
        y = [1.0, 2.0, 2.0, 3.0, 4.0, 5.0, 6.0]
        result = wilcoxon_signed_rank(x, y)
        assert result.n_effective == 5
        assert result.p_value == pytest.approx(2 / 32)

    def test_forced_exact_beyond_limit(self, rng):
        d = rng.normal(size=21)
        with pytest.raises(ValueError):
            wilcoxon_signed_rank(d, np.zeros(21), method="exact")

    def test_forced_exact_medium_n(self, rng):
        d = rng.normal(size=15)
        result = wilcoxon_signed_rank(d, np.zeros(15), method="exact")
        assert result.method == "exact"
        assert result.p_value == pytest.approx(
            stats.wilcoxon(d, method="exact").pvalue, rel=1e-9
        )


class TestNormal:
    def test_auto_switches_above_twelve(self, rng):
        d = rng.normal(size=13)
        assert wilcoxon_signed_rank(d, np.zeros(13)).method == "normal"
        assert wilcoxon_signed_rank(d[:12], np.zeros(12)).method == "exact"

    def test_close_to_exact_at_twelve(self, rng):
        for _ in range(100):
            d = rng.normal(size=12)
            exact = wilcoxon_signed_rank(d, np.zeros(12), method="exact")
            normal = wilcoxon_signed_rank(d, np.zeros(12), method="normal")
            assert normal.statistic == exact.statistic
            assert abs(normal.p_value - exact.p_value) <= 0.02

    def test_agrees_with_scipy(self, rng):
        x = rng.normal(0.3, 1.0, size=40)
        y = rng.normal(0.0, 1.0, size=40)
        ours = wilcoxon_signed_rank(x, y)
        theirs = stats.wilcoxon(x, y, correction=True, method="approx")
        assert ours.method == "normal"
        assert ours.statistic == pytest.approx(theirs.statistic)
        assert ours.p_value == pytest.approx(theirs.pvalue, rel=1e-6)

    def test_ties_reduce_variance(self):
        d = np.array([1.0] * 10 + [-2.0] * 5 + [3.0] * 10)
        result = wilcoxon_signed_rank(d, np.zeros_like(d))
        theirs = stats.wilcoxon(d, correction=True, method="approx")
        assert result.p_value == pytest.approx(theirs.pvalue, rel=1e-6)


class TestInputs:
    def test_too_few_pairs(self):
        with pytest.raises(TooFewPairs):
            wilcoxon_signed_rank([1, 2, 3, 4], [0, 0, 0, 0])

    def test_all_differences_zero(self):
        with pytest.raises(TooFewPairs):
            wilcoxon_signed_rank([1, 2, 3, 4, 5], [1, 2, 3, 4, 5])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            wilcoxon_signed_rank([1, 2, 3, 4, 5], [1, 2, 3, 4])
