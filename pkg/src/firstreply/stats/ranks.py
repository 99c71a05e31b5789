"""Wilcoxon signed-rank and Spearman rank correlation."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import stats as sps

EXACT_MAX_N = 25


@dataclass
class TestResult:
    statistic: float
    p_value: float
    n: int
    method: str
    p_exact: Optional[float] = None
    p_normal: Optional[float] = None

    __test__ = False  # not a pytest class


class UndefinedStatistic(ValueError):
    pass


def signed_ranks(diffs: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    """Midranks of |d| over the non-zero differences, and their signs."""
    d = np.asarray(diffs, dtype=float)
    d = d[d != 0]
    return sps.rankdata(np.abs(d)), np.sign(d)


def _exact_tail(doubled_ranks: np.ndarray, t2: int) -> float:
    """P(min(W+, W-) <= T) under random signs; ranks and T are doubled to be integral."""
    total = int(doubled_ranks.sum())
    counts = np.zeros(total + 1, dtype=object)
    counts[0] = 1
    reach = 0
    for r in doubled_ranks.astype(int):
        counts[r : reach + r + 1] = counts[r : reach + r + 1] + counts[: reach + 1]
        reach += r
    hits = sum(int(counts[w]) for w in range(total + 1) if min(w, total - w) <= t2)
    return hits / 2 ** len(doubled_ranks)


def _normal_p(ranks: np.ndarray, t: float) -> float:
    n = len(ranks)
    mean = n * (n + 1) / 4.0
    _, ties = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - (ties**3 - ties).sum() / 48.0
    if var <= 0:
        return 1.0
    z = max(0.0, mean - t - 0.5) / math.sqrt(var)
    return float(min(1.0, 2.0 * sps.norm.sf(z)))


def wilcoxon_signed_rank(diffs: Sequence[float], method: str = "auto") -> TestResult:
    """Two-sided Wilcoxon signed-rank test with T = min(W+, W-).

    Zero differences are dropped and tied |d| get midranks. ``method="auto"``
    uses the exact null distribution up to n=25 and the tie- and
    continuity-corrected normal approximation above it; both p-values are
    kept on the result whenever the exact one is computed.
    """
    if method not in ("auto", "exact", "normal"):
        raise ValueError(f"unknown method {method!r}")
    ranks, signs = signed_ranks(diffs)
    n = len(ranks)
    if n == 0:
        return TestResult(0.0, 1.0, 0, "degenerate")
    w_plus = float(ranks[signs > 0].sum())
    w_minus = float(ranks[signs < 0].sum())
    t = min(w_plus, w_minus)
    p_normal = _normal_p(ranks, t)
    p_exact = None
    if method == "exact" or (method == "auto" and n <= EXACT_MAX_N):
        doubled = np.rint(2 * ranks).astype(int)
        p_exact = _exact_tail(doubled, int(round(2 * t)))
    if p_exact is not None and method != "normal":
        return TestResult(t, p_exact, n, "exact", p_exact, p_normal)
    return TestResult(t, p_normal, n, "normal", p_exact, p_normal)


def spearman(x: Sequence[float], y: Sequence[float]) -> TestResult:
    """Spearman's rho (Pearson on midranks) with a t-approximation p-value."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-d and of equal length")
    n = len(x)
    if n < 3:
        raise ValueError("need at least 3 observations")
    rx, ry = sps.rankdata(x), sps.rankdata(y)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = math.sqrt((rx @ rx) * (ry @ ry))
    if denom == 0:
        raise UndefinedStatistic("rank correlation undefined for a constant vector")
    r = float(np.clip((rx @ ry) / denom, -1.0, 1.0))
    if abs(r) == 1.0:
        p = 0.0
    else:
        tstat = r * math.sqrt((n - 2) / (1 - r * r))
        p = float(2 * sps.t.sf(abs(tstat), n - 2))
    return TestResult(r, p, n, "t-approximation")
