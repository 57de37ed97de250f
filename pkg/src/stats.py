"""Paired Wilcoxon signed-rank test."""

import itertools
import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass
from functools import cache
from typing import Literal

import numpy as np
from scipy import stats

from .errors import TooFewPairs

logger = logging.getLogger("volprint")

MIN_PAIRS = 5
EXACT_MAX_N = 12
EXACT_ENUMERATION_LIMIT = 20


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float  # min(W+, W-)
    p_value: float  # two-sided
    n_effective: int
    method: str


@cache
def _sign_patterns(n: int) -> np.ndarray:
    return np.array(list(itertools.product((0, 1), repeat=n)), dtype=np.int64)


def exact_p_value(differences: np.ndarray) -> float:
    """Two-sided p from all 2**n sign assignments of the observed ranks."""
    ranks = stats.rankdata(np.abs(differences))
    # Average ranks are multiples of 1/2, so doubled ranks compare exactly.
    doubled = np.rint(2 * ranks).astype(np.int64)
    observed = int(doubled[differences > 0].sum())
    null = _sign_patterns(differences.size) @ doubled
    lower = np.count_nonzero(null <= observed) / null.size
    upper = np.count_nonzero(null >= observed) / null.size
    return min(1.0, 2.0 * min(lower, upper))


def normal_p_value(differences: np.ndarray) -> float:
    """Two-sided p by normal approximation, tie and continuity corrected."""
    n = differences.size
    ranks = stats.rankdata(np.abs(differences))
    w_plus = float(ranks[differences > 0].sum())
    mean = n * (n + 1) / 4.0
    _, tie_sizes = np.unique(np.abs(differences), return_counts=True)
    tie_term = float(np.sum(tie_sizes**3 - tie_sizes)) / 48.0
    variance = n * (n + 1) * (2 * n + 1) / 24.0 - tie_term
    if variance <= 0:
        return 1.0
    z = max(abs(w_plus - mean) - 0.5, 0.0) / math.sqrt(variance)
    return float(min(1.0, 2.0 * stats.norm.sf(z)))


def wilcoxon_signed_rank(
    x: Sequence[float],
    y: Sequence[float],
    method: Literal["auto", "exact", "normal"] = "auto",
) -> WilcoxonResult:
    """Paired two-sided test; zero differences are dropped before ranking."""
    a = np.asarray(x, dtype=np.float64)
    b = np.asarray(y, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"Paired samples differ in shape: {a.shape} vs {b.shape}")
    if a.size < MIN_PAIRS:
        raise TooFewPairs(f"Need at least {MIN_PAIRS} pairs, got {a.size}")

    differences = a - b
    differences = differences[differences != 0]
    n = int(differences.size)
    if n == 0:
        raise TooFewPairs("All paired differences are zero")

    ranks = stats.rankdata(np.abs(differences))
    w_plus = float(ranks[differences > 0].sum())
    w_minus = float(ranks[differences < 0].sum())

    use_exact = method == "exact" or (method == "auto" and n <= EXACT_MAX_N)
    if use_exact and n > EXACT_ENUMERATION_LIMIT:
        raise ValueError(
            f"Exact enumeration is limited to n <= {EXACT_ENUMERATION_LIMIT}"
        )
    if use_exact:
        p_value = exact_p_value(differences)
    else:
        p_value = normal_p_value(differences)
    logger.debug(
        f"Wilcoxon n={n} W+={w_plus} W-={w_minus} p={p_value:.4g} "
        f"({'exact' if use_exact else 'normal'})"
    )
    return WilcoxonResult(
        statistic=min(w_plus, w_minus),
        p_value=p_value,
        n_effective=n,
        method="exact" if use_exact else "normal",
    )
