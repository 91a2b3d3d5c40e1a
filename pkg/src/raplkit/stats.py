"""Nonparametric statistics for overhead analysis.

All functions are pure. Quantiles use linear interpolation between order
statistics (type 7, the NumPy and R default).
"""

from __future__ import annotations

import math
import statistics
from dataclasses import dataclass
from typing import Iterator, Literal, Sequence

from .errors import UsageError

EXACT_MAX_TOTAL = 16
IQR_FENCE = 3.0
ALPHA = 0.05


@dataclass(frozen=True)
class IqrFilterResult:
    kept: list[float]
    removed: list[float]
    q1: float
    q3: float
    too_few: bool = False

    def __iter__(self) -> Iterator[list[float]]:
        yield self.kept
        yield self.removed

    @property
    def bounds(self) -> tuple[float, float]:
        iqr = self.q3 - self.q1
        return self.q1 - IQR_FENCE * iqr, self.q3 + IQR_FENCE * iqr


def quartiles(values: Sequence[float]) -> tuple[float, float]:
    """Type-7 first and third quartiles."""
    q1, _, q3 = statistics.quantiles(values, n=4, method="inclusive")
    return q1, q3


def iqr_filter(values: Sequence[float]) -> IqrFilterResult:
    """Split ``values`` into those inside ``[q1 - 3 IQR, q3 + 3 IQR]`` and the rest.

    Input order is preserved in both parts. Fewer than four values are
    returned unfiltered with ``too_few`` set.
    """
    values = list(values)
    if len(values) < 4:
        return IqrFilterResult(values, [], math.nan, math.nan, too_few=True)
    q1, q3 = quartiles(values)
    result = IqrFilterResult([], [], q1, q3)
    lo, hi = result.bounds
    for v in values:
        (result.kept if lo <= v <= hi else result.removed).append(v)
    return result


# --- Wilcoxon rank-sum --------------------------------------------------------

@dataclass(frozen=True)
class RankSumResult:
    statistic: float
    """Sum of the ranks of ``x`` in the pooled sample."""
    pvalue: float
    method: Literal["exact", "normal"]


def rank(values: Sequence[float]) -> list[float]:
    """1-based ranks with ties given their average rank."""
    order = sorted(range(len(values)), key=values.__getitem__)
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        avg = (i + j) / 2 + 1
        for k in range(i, j + 1):
            ranks[order[k]] = avg
        i = j + 1
    return ranks


def _tie_sizes(values: Sequence[float]) -> list[int]:
    counts: dict[float, int] = {}
    for v in values:
        counts[v] = counts.get(v, 0) + 1
    return [c for c in counts.values() if c > 1]


def rank_sum_counts(n: int, total: int) -> list[int]:
    """How many ``n``-subsets of ranks ``1..total`` have each possible rank sum.

    Index ``s`` of the result counts subsets with rank sum ``s``.
    """
    max_sum = sum(range(total - n + 1, total + 1))
    # ways[k][s]: k-subsets of the ranks seen so far with sum s
    ways = [[0] * (max_sum + 1) for _ in range(n + 1)]
    ways[0][0] = 1
    for r in range(1, total + 1):
        for k in range(min(r, n), 0, -1):
            row, prev = ways[k], ways[k - 1]
            for s in range(max_sum, r - 1, -1):
                if prev[s - r]:
                    row[s] += prev[s - r]
    return ways[n]


def _exact_upper_tail(w: int, n: int, total: int) -> float:
    counts = rank_sum_counts(n, total)
    return sum(counts[w:]) / math.comb(total, n)


def _normal_upper_tail(w: float, n: int, m: int, ties: list[int]) -> float:
    total = n + m
    u = w - n * (n + 1) / 2
    mean = n * m / 2
    tie_term = sum(t**3 - t for t in ties) / (total * (total - 1))
    var = n * m / 12 * ((total + 1) - tie_term)
    if var <= 0:
        return 1.0
    z = (u - mean - 0.5) / math.sqrt(var)
    return 0.5 * math.erfc(z / math.sqrt(2))


def wilcoxon_rank_sum_one_sided(
    x: Sequence[float],
    y: Sequence[float],
    alternative: Literal["greater"] = "greater",
    method: Literal["auto", "exact", "normal"] = "auto",
) -> RankSumResult:
    """One-sided rank-sum test of "x is stochastically greater than y".

    ``auto`` uses the exact null distribution when the pooled sample has at
    most 16 values and no ties, and the tie- and continuity-corrected normal
    approximation otherwise.

    Raises:
        UsageError: either sample has fewer than two values, an unsupported
            alternative, or ``exact`` requested on tied data.
    """
    if alternative != "greater":
        raise UsageError(f"unsupported alternative {alternative!r}")
    if len(x) < 2 or len(y) < 2:
        raise UsageError("each sample needs at least two values")
    pooled = list(x) + list(y)
    n, m = len(x), len(y)
    ranks = rank(pooled)
    w = sum(ranks[:n])
    ties = _tie_sizes(pooled)
    if method == "auto":
        method = "exact" if n + m <= EXACT_MAX_TOTAL and not ties else "normal"
    if method == "exact":
        if ties:
            raise UsageError("the exact test needs tie-free data")
        return RankSumResult(w, _exact_upper_tail(int(w), n, n + m), "exact")
    if method == "normal":
        return RankSumResult(w, _normal_upper_tail(w, n, m, ties), "normal")
    raise UsageError(f"unknown method {method!r}")


def holm_bonferroni(pvalues: Sequence[float]) -> list[float]:
    """Step-down Holm adjustment, returned in input order."""
    for p in pvalues:
        if not 0.0 <= p <= 1.0:
            raise UsageError(f"p-value outside [0, 1]: {p}")
    m = len(pvalues)
    order = sorted(range(m), key=pvalues.__getitem__)
    adjusted = [0.0] * m
    running = 0.0
    for j, idx in enumerate(order):
        running = max(running, min(1.0, (m - j) * pvalues[idx]))
        adjusted[idx] = running
    return adjusted


def location_shift(x: Sequence[float], y: Sequence[float]) -> float:
    """Hodges-Lehmann estimate: median of all pairwise differences ``x_i - y_j``."""
    if not x or not y:
        raise UsageError("both samples must be non-empty")
    return statistics.median(a - b for a in x for b in y)
