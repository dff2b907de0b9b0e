import itertools
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from mcvae.nn import make_rng
from mcvae.survival import (
    IncompleteBlock,
    NoComparablePairs,
    UntestableComparison,
    breslow_baseline,
    c_index,
    friedman_test,
    holm_adjust,
    nemenyi_critical_difference,
    nemenyi_posthoc,
    signed_rank_test,
    wilcoxon_holm,
)

from oracles import cindex_bruteforce, exact_signed_rank_p, survival_times


def test_cindex_examples():
    t = [1.0, 2.0, 3.0]
    assert c_index([3, 2, 1], t, [1, 1, 1]) == 1.0
    assert c_index([1, 2, 3], t, [1, 1, 1]) == 0.0
    assert c_index([2, 1, 3], t, [1, 0, 1]) == 0.5


def test_cindex_all_tied_warns():
    with pytest.warns(RuntimeWarning, match="tied"):
        assert c_index(np.zeros(4), [1, 2, 3, 4], [1, 1, 0, 1]) == 0.5


def test_cindex_no_comparable_pairs():
    with pytest.raises(NoComparablePairs):
        c_index([1, 2], [1.0, 2.0], [0, 0])


def test_cindex_equal_time_censored_partner_is_comparable():
    # i dies at t=2, j censored at t=2: j is known to outlive i
    assert c_index([2.0, 1.0], [2.0, 2.0], [1, 0]) == 1.0


def test_cindex_matches_bruteforce():
    rng = make_rng(20)
    checked, worst = 0, 0.0
    while checked < 200:
        n = int(rng.integers(2, 13))
        t, d = survival_times(rng, n, ties=checked % 2 == 0)
        r = rng.integers(0, 4, size=n).astype(float) if checked % 3 == 0 else rng.normal(size=n)
        ref = cindex_bruteforce(r.tolist(), t.tolist(), d.tolist())
        if ref is None:
            continue
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            worst = max(worst, abs(c_index(r, t, d) - ref))
        checked += 1
    assert worst <= 1e-10


def test_breslow_examples():
    est = breslow_baseline([0.0], [4.0], [1])
    assert est.baseline(3.9) == 0.0 and est.baseline(4.0) == 1.0
    n = 5
    est = breslow_baseline(np.zeros(n), np.arange(1.0, n + 1), np.ones(n))
    np.testing.assert_allclose(np.diff(np.r_[0, est.cumulative_hazard]), 1 / np.arange(n, 0, -1))
    assert np.all(est.survival(0.0, [-1.0, 0.0, 2.0]) == 1.0)


def test_friedman_identical_columns():
    x = np.tile(make_rng(0).normal(size=(10, 1)), (1, 3))
    res = friedman_test(x)
    assert res.statistic == 0.0 and res.pvalue == 1.0


def test_friedman_dominating_column_matches_bruteforce():
    rng = make_rng(1)
    x = rng.normal(size=(10, 3))
    x[:, 1] = x.max(axis=1) + 1.0
    n, k = x.shape
    ranks = np.array([[1 + sum(row[j] > row[i] for j in range(k)) for i in range(k)] for row in x], float)
    R = ranks.sum(axis=0)
    ref = 12 / (n * k * (k + 1)) * np.sum(R**2) - 3 * n * (k + 1)
    res = friedman_test(x)
    assert res.average_ranks[1] == 1.0
    assert res.statistic == pytest.approx(ref, abs=1e-12)
    assert res.statistic == pytest.approx(stats.friedmanchisquare(*x.T).statistic, abs=1e-12)
    assert friedman_test(x[:, [2, 0, 1]]).statistic == pytest.approx(res.statistic, abs=1e-12)


def test_friedman_ties_match_scipy():
    x = make_rng(2).integers(0, 3, size=(12, 4)).astype(float)
    ours, ref = friedman_test(x), stats.friedmanchisquare(*x.T)
    assert ours.statistic == pytest.approx(ref.statistic, rel=1e-12)
    assert ours.pvalue == pytest.approx(ref.pvalue, rel=1e-10)


def test_friedman_rejects_missing_cells():
    x = np.ones((4, 3))
    x[1, 2] = np.nan
    with pytest.raises(IncompleteBlock):
        friedman_test(x)


def test_nemenyi_identical_and_symmetry():
    x = np.tile(make_rng(3).normal(size=(10, 1)), (1, 4))
    res = nemenyi_posthoc(x)
    assert np.allclose(res.pvalues, 1.0)
    y = make_rng(4).normal(size=(10, 4))
    p = nemenyi_posthoc(y).pvalues
    assert np.array_equal(p, p.T) and np.all(np.diag(p) == 1.0) and np.all((p >= 0) & (p <= 1))


def test_nemenyi_rank_differences_bruteforce():
    x = make_rng(5).normal(size=(10, 3))
    ranks = np.array([[1 + sum(r[j] > r[i] for j in range(3)) for i in range(3)] for r in x], float)
    avg = ranks.mean(axis=0)
    np.testing.assert_allclose(nemenyi_posthoc(x).rank_differences, np.abs(avg[:, None] - avg[None, :]))


def test_nemenyi_table_agrees_with_distribution():
    for k in range(2, 11):
        q = stats.studentized_range.ppf(0.95, k, np.inf) / np.sqrt(2)
        cd = nemenyi_critical_difference(k, 15)
        assert cd == pytest.approx(q * np.sqrt(k * (k + 1) / 90), rel=2e-3)


def test_wilcoxon_exact_all_positive():
    res = signed_rank_test(np.arange(1, 11) * 0.01, "greater")
    assert res.method == "exact"
    assert res.pvalue == pytest.approx(exact_signed_rank_p(10), abs=1e-15)
    assert res.pvalue == pytest.approx(1 / 1024) and abs(res.pvalue - 0.00098) < 1e-5


def test_wilcoxon_small_n_untestable():
    with pytest.raises(UntestableComparison):
        signed_rank_test([0.1, 0.2, 0.0, 0.0, 0.3, 0.4], "greater")
    with pytest.raises(UntestableComparison, match="all paired differences are zero"):
        signed_rank_test(np.zeros(15))


def test_wilcoxon_holm_mixes_untestable():
    out = wilcoxon_holm({"a": np.arange(1, 11), "b": np.zeros(10), "c": -np.arange(1, 16)}, "greater")
    assert out[1].adjusted_p is None and "zero" in out[1].note
    assert out[0].adjusted_p == pytest.approx(min(1, 2 * out[0].raw_p))
    assert out[2].adjusted_p >= out[0].adjusted_p


def test_holm_single_is_identity():
    assert holm_adjust([0.037])[0] == 0.037


@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=12))
def test_holm_monotone_and_order_preserving(p):
    p = np.array(p)
    adj = holm_adjust(p)
    assert np.all(adj >= p) and np.all(adj <= 1.0)
    for i, j in itertools.permutations(range(p.size), 2):
        if p[i] < p[j]:
            assert adj[i] <= adj[j]
