"""Wilcoxon signed-rank test with exact null distribution for small samples."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats as sps

EXACT_MAX_N = 20


class UndefinedTestError(ValueError):
    pass


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float  # W: sum of ranks of positive differences
    n: int  # non-zero differences
    p_greater: float
    p_less: float
    p_two_sided: float
    method: str  # "exact" or "normal"

    def p(self, alternative: str = "greater") -> float:
        return {"greater": self.p_greater, "less": self.p_less, "two-sided": self.p_two_sided}[alternative]


def _tail_counts(doubled_ranks: np.ndarray, w2: int) -> tuple[int, int]:
    """Number of sign patterns with 2W >= w2 and with 2W <= w2, by subset-sum counting."""
    total = int(doubled_ranks.sum())
    counts = np.zeros(total + 1, dtype=object)
    counts[0] = 1
    for r in doubled_ranks:
        r = int(r)
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    return int(counts[w2:].sum()), int(counts[: w2 + 1].sum())


def wilcoxon_signed_rank(x, y=None) -> WilcoxonResult:
    """Signed-rank test on ``x - y`` (or on ``x`` alone).

    Zero differences are dropped and tied magnitudes share their average
    rank. For at most 20 non-zero differences the p-values count all 2^n sign
    assignments exactly; beyond that a tie-corrected normal approximation
    with continuity correction is used.
    """
    d = np.asarray(x, dtype=np.float64)
    if y is not None:
        y = np.asarray(y, dtype=np.float64)
        if y.shape != d.shape:
            raise ValueError("x and y must have equal length")
        d = d - y
    if d.ndim != 1 or len(d) == 0:
        raise ValueError("need a non-empty 1-D sample")
    d = d[d != 0]
    n = len(d)
    if n == 0:
        raise UndefinedTestError("all differences are zero; the signed-rank test is undefined")
    ranks = sps.rankdata(np.abs(d))  # average ranks for ties
    w = float(ranks[d > 0].sum())
    if n <= EXACT_MAX_N:
        doubled = np.rint(2 * ranks).astype(np.int64)
        ge, le = _tail_counts(doubled, int(round(2 * w)))
        total = 2**n
        p_greater, p_less = ge / total, le / total
        method = "exact"
    else:
        mean = n * (n + 1) / 4
        _, tie_counts = np.unique(ranks, return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24 - (tie_counts**3 - tie_counts).sum() / 48
        sd = math.sqrt(var)
        p_greater = float(sps.norm.sf((w - mean - 0.5) / sd))
        p_less = float(sps.norm.cdf((w - mean + 0.5) / sd))
        method = "normal"
    p_two = min(1.0, 2 * min(p_greater, p_less))
    return WilcoxonResult(w, n, p_greater, p_less, p_two, method)
