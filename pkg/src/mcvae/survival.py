"""Survival evaluation and model-comparison statistics."""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy import stats


class NoComparablePairs(ValueError):
    """No (i, j) pair is comparable, so the concordance index is undefined."""


class UntestableComparison(ValueError):
    """Too few non-zero paired differences for a signed-rank test."""


class IncompleteBlock(ValueError):
    """A results matrix has missing cells where a complete block design is required."""


def comparable_pairs(times: np.ndarray, events: np.ndarray) -> np.ndarray:
    """Boolean matrix P[i, j]: patient i had the event first and j outlived (or was
    censored at the same time as) i."""
    t = np.asarray(times, dtype=float)
    e = np.asarray(events).astype(bool)
    earlier = t[:, None] < t[None, :]
    tied_censored = (t[:, None] == t[None, :]) & ~e[None, :]
    return e[:, None] & (earlier | tied_censored)


def concordance(risks: np.ndarray, times: np.ndarray, events: np.ndarray) -> tuple[float, int]:
    """Return (concordant + ties/2, number of comparable pairs)."""
    r = np.asarray(risks, dtype=float)
    pairs = comparable_pairs(times, events)
    n_pairs = int(pairs.sum())
    diff = r[:, None] - r[None, :]
    score = (diff > 0).astype(float) + 0.5 * (diff == 0)
    return float((score * pairs).sum()), n_pairs


def c_index(risks, times, events) -> float:
    """Harrell's C: share of comparable pairs ranked correctly, higher risk dying first."""
    concordant, n_pairs = concordance(risks, times, events)
    if n_pairs == 0:
        raise NoComparablePairs("c_index: no comparable pairs")
    r = np.asarray(risks, dtype=float)
    if r.size and np.all(r == r[0]):
        warnings.warn("c_index: all risk scores are tied", RuntimeWarning, stacklevel=2)
    return concordant / n_pairs


@dataclass
class BreslowEstimate:
    """Cumulative baseline hazard as a right-continuous step function."""

    times: np.ndarray
    cumulative_hazard: np.ndarray

    def baseline(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.times, t, side="right")
        padded = np.concatenate([[0.0], self.cumulative_hazard])
        return padded[idx]

    def survival(self, t, log_hazard) -> np.ndarray:
        """S(t | f) = exp(-H0(t) exp(f)); broadcast as (patients, times)."""
        h0 = self.baseline(t)
        f = np.asarray(log_hazard, dtype=float)
        return np.exp(-np.multiply.outer(np.exp(f), h0))


def breslow_baseline(log_hazards, times, events) -> BreslowEstimate:
    f = np.asarray(log_hazards, dtype=float)
    t = np.asarray(times, dtype=float)
    e = np.asarray(events).astype(bool)
    if not e.any():
        raise ValueError("breslow_baseline: no events")
    event_times = np.unique(t[e])
    risk = np.exp(f)
    jumps = np.empty(event_times.size)
    for i, s in enumerate(event_times):
        deaths = np.count_nonzero(e & (t == s))
        jumps[i] = deaths / risk[t >= s].sum()
    return BreslowEstimate(event_times, np.cumsum(jumps))


# ---------------------------------------------------------------------------
# rank tests across configurations


def _complete(results) -> np.ndarray:
    x = np.asarray(results, dtype=float)
    if x.ndim != 2:
        raise ValueError(f"results must be a (blocks, treatments) matrix, got shape {x.shape}")
    if np.isnan(x).any():
        raise IncompleteBlock("results matrix has missing cells")
    if x.shape[0] < 2 or x.shape[1] < 2:
        raise ValueError(f"need >= 2 blocks and >= 2 treatments, got shape {x.shape}")
    return x


def average_ranks(results) -> np.ndarray:
    """Mean within-row rank of each column (rank 1 = highest C-index)."""
    x = _complete(results)
    ranks = np.apply_along_axis(stats.rankdata, 1, -x)
    return ranks.mean(axis=0)


@dataclass
class FriedmanResult:
    statistic: float
    pvalue: float
    average_ranks: np.ndarray


def friedman_test(results) -> FriedmanResult:
    """Friedman chi-square with average ranks for ties and the usual tie correction."""
    x = _complete(results)
    n, k = x.shape
    ranks = np.apply_along_axis(stats.rankdata, 1, -x)
    rank_sums = ranks.sum(axis=0)
    ties = 0.0
    for row in x:
        _, counts = np.unique(row, return_counts=True)
        ties += float(np.sum(counts**3 - counts))
    denom = 1.0 - ties / (n * k * (k * k - 1))
    if denom <= 0:
        return FriedmanResult(0.0, 1.0, rank_sums / n)
    chi2 = (12.0 / (n * k * (k + 1)) * np.sum(rank_sums**2) - 3.0 * n * (k + 1)) / denom
    chi2 = max(chi2, 0.0)
    return FriedmanResult(float(chi2), float(stats.chi2.sf(chi2, k - 1)), rank_sums / n)


# Studentized range quantiles at alpha = 0.05 divided by sqrt(2), k = 2..10.
NEMENYI_Q05 = {2: 1.960, 3: 2.343, 4: 2.569, 5: 2.728, 6: 2.850, 7: 2.949, 8: 3.031, 9: 3.102, 10: 3.164}


def nemenyi_critical_difference(k: int, n: int) -> float:
    if k not in NEMENYI_Q05:
        raise ValueError(f"critical difference tabulated for 2 <= k <= 10, got k={k}")
    return NEMENYI_Q05[k] * math.sqrt(k * (k + 1) / (6.0 * n))


@dataclass
class NemenyiResult:
    pvalues: np.ndarray
    rank_differences: np.ndarray
    critical_difference: float | None


def nemenyi_posthoc(results) -> NemenyiResult:
    x = _complete(results)
    n, k = x.shape
    avg = average_ranks(x)
    diffs = np.abs(avg[:, None] - avg[None, :])
    se = math.sqrt(k * (k + 1) / (6.0 * n))
    q = diffs / se * math.sqrt(2.0)
    p = np.ones((k, k))
    for i, j in itertools.combinations(range(k), 2):
        pij = 1.0 if q[i, j] == 0 else float(stats.studentized_range.sf(q[i, j], k, np.inf))
        p[i, j] = p[j, i] = min(max(pij, 0.0), 1.0)
    cd = nemenyi_critical_difference(k, n) if k in NEMENYI_Q05 else None
    return NemenyiResult(p, diffs, cd)


# ---------------------------------------------------------------------------
# paired one-sided comparisons


EXACT_MAX_N = 25


@dataclass
class SignedRankResult:
    statistic: float
    pvalue: float
    n: int
    method: str


def signed_rank_test(deltas, alternative: str = "greater") -> SignedRankResult:
    """Wilcoxon signed-rank on paired differences, zeros discarded.

    Exact null distribution for n <= 25 non-zero differences, normal approximation
    with continuity correction above.
    """
    d = np.asarray(deltas, dtype=float)
    d = d[d != 0]
    if d.size == 0:
        raise UntestableComparison("all paired differences are zero")
    if d.size < 5:
        raise UntestableComparison(f"only {d.size} non-zero paired differences (need >= 5)")
    method = "exact" if d.size <= EXACT_MAX_N else "approx"
    kwargs = {"correction": True} if method == "approx" else {}
    res = stats.wilcoxon(d, alternative=alternative, method=method, **kwargs)
    return SignedRankResult(float(res.statistic), float(res.pvalue), int(d.size), method)


def holm_adjust(pvalues: Sequence[float]) -> np.ndarray:
    """Holm step-down adjusted p-values, returned in input order."""
    p = np.asarray(pvalues, dtype=float)
    m = p.size
    order = np.argsort(p, kind="stable")
    adjusted = np.empty(m)
    running = 0.0
    for rank, idx in enumerate(order):
        running = max(running, min(1.0, (m - rank) * p[idx]))
        adjusted[idx] = running
    return adjusted


@dataclass
class ComparisonResult:
    name: str
    n: int
    raw_p: float | None
    adjusted_p: float | None
    note: str = ""


def wilcoxon_holm(deltas: Mapping[str, Sequence[float]], alternative: str = "greater") -> list[ComparisonResult]:
    """One-sided signed-rank test per comparison, Holm-adjusted across the testable ones."""
    out: list[ComparisonResult] = []
    testable: list[int] = []
    for name, d in deltas.items():
        try:
            res = signed_rank_test(d, alternative)
        except UntestableComparison as exc:
            out.append(ComparisonResult(name, int(np.count_nonzero(np.asarray(d))), None, None, str(exc)))
            continue
        testable.append(len(out))
        out.append(ComparisonResult(name, res.n, res.pvalue, None, res.method))
    if testable:
        adj = holm_adjust([out[i].raw_p for i in testable])
        for i, a in zip(testable, adj):
            out[i].adjusted_p = float(a)
    return out
