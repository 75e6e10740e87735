import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from dgvae import evaluator as ev


# -- independent brute-force oracle ------------------------------------------

def brute_rank(scores, exclude, k):
    """Full sort by (score desc, index asc) with a Python key, no numpy ranking."""
    cand = [(-float(s), i) for i, s in enumerate(scores) if i not in set(int(e) for e in exclude)]
    cand.sort()
    return [i for _, i in cand[:k]]


def brute_metrics(score_mat, excludes, truths, k):
    recalls, ndcgs = [], []
    for s, ex, tr in zip(score_mat, excludes, truths):
        if len(tr) == 0:
            continue
        ranked = brute_rank(s, ex, k)
        hits = [1 if i in set(tr.tolist()) else 0 for i in ranked]
        recalls.append(sum(hits) / len(tr))
        dcg = sum(h / math.log2(p + 2) for p, h in enumerate(hits))
        idcg = sum(1 / math.log2(p + 2) for p in range(min(len(tr), k)))
        ndcgs.append(dcg / idcg)
    return sum(recalls) / len(recalls), sum(ndcgs) / len(ndcgs)


def random_instance(rng):
    m, n = int(rng.integers(1, 21)), int(rng.integers(2, 51))
    # coarse scores produce ties on purpose
    scores = rng.integers(0, 6, size=(m, n)).astype(float)
    excludes, truths = [], []
    for _ in range(m):
        perm = rng.permutation(n)
        n_ex = int(rng.integers(0, n // 2 + 1))
        n_tr = int(rng.integers(1, n - n_ex + 1))
        excludes.append(np.sort(perm[:n_ex]))
        truths.append(np.sort(perm[n_ex : n_ex + n_tr]))
    return scores, excludes, truths


def test_metrics_match_brute_force_200_instances():
    rng = np.random.default_rng(12345)
    for _ in range(200):
        scores, excludes, truths = random_instance(rng)
        k = int(rng.integers(1, 25))
        rankings = ev.rank_users(lambda u: scores[u], np.arange(len(scores)), excludes, k, threads=1)
        r, n = brute_metrics(scores, excludes, truths, k)
        assert ev.recall_at_k(rankings, truths, k) == r
        assert ev.ndcg_at_k(rankings, truths, k) == n


def test_top_k_tie_break_and_exclusion():
    scores = np.array([1.0, 3.0, 3.0, 2.0, 3.0])
    np.testing.assert_array_equal(ev.top_k(scores, np.array([2]), 3), [1, 4, 3])
    # fewer candidates than k
    np.testing.assert_array_equal(ev.top_k(scores, np.array([0, 1, 2]), 10), [4, 3])


def test_ndcg_closed_forms():
    # single relevant item at rank 2
    assert ev.ndcg_at_k([np.array([5, 7])], [np.array([7])], 2) == pytest.approx(1 / math.log2(3), abs=1e-10)
    assert ev.ndcg_at_k([np.array([5, 7])], [np.array([7])], 2) == pytest.approx(0.6309, abs=5e-5)
    # two relevant items at ranks 1 and 3
    value = ev.ndcg_at_k([np.array([1, 9, 2])], [np.array([1, 2])], 3)
    closed = (1 + 1 / math.log2(4)) / (1 + 1 / math.log2(3))
    assert value == pytest.approx(closed, abs=1e-10)
    assert value == pytest.approx(0.9197207891481876, abs=1e-12)


def test_recall_examples():
    assert ev.recall_at_k([np.array([0, 1])], [np.array([1, 2])], 2) == 0.5
    assert ev.recall_at_k([np.array([3])], [np.array([3])], 1) == 1.0


def test_empty_truth_users_skipped(caplog):
    value = ev.recall_at_k([np.array([0]), np.array([1])], [np.array([0]), np.array([], dtype=int)], 1)
    assert value == 1.0
    assert "excluded" in caplog.text


def test_no_users_raises():
    with pytest.raises(ValueError):
        ev.recall_at_k([np.array([0])], [np.array([], dtype=int)], 1)


def test_parallel_equals_sequential(monkeypatch):
    rng = np.random.default_rng(3)
    scores = rng.normal(size=(700, 40))
    excludes = [rng.choice(40, size=3, replace=False) for _ in range(700)]
    fn = lambda u: scores[u]
    seq = ev.rank_users(fn, np.arange(700), excludes, 20, threads=1)
    par = ev.rank_users(fn, np.arange(700), excludes, 20, threads=4)
    assert all(np.array_equal(a, b) for a, b in zip(seq, par))
    monkeypatch.setenv("DGVAE_THREADS", "3")
    env = ev.rank_users(fn, np.arange(700), excludes, 20)
    assert all(np.array_equal(a, b) for a, b in zip(seq, env))


def test_thread_count_env(monkeypatch):
    monkeypatch.setenv("DGVAE_THREADS", "6")
    assert ev.thread_count() == 6
    monkeypatch.setenv("DGVAE_THREADS", "junk")
    assert ev.thread_count() == 1


def test_popularity_scores():
    from dgvae.numerics import SparseMatrix
    train = SparseMatrix.from_triples(3, 4, [0, 1, 2, 2], [1, 1, 1, 3])
    s = ev.popularity_score_fn(train)(np.array([0, 2]))
    np.testing.assert_array_equal(s, [[0, 3, 0, 1], [0, 3, 0, 1]])


# -- reporting ---------------------------------------------------------------

def test_improvement_report_table_values():
    assert ev.improvement_report(0.0636, 0.0564) == 12.77
    assert ev.improvement_report(0.1127, 0.1008) == 11.81
    assert ev.improvement_report(0.5, 0.5) == 0.0
    with pytest.raises(ValueError):
        ev.improvement_report(0.1, 0.0)


def test_ttest_against_textbook_and_scipy():
    rng = np.random.default_rng(0)
    for _ in range(20):
        a = rng.normal(0.1, 0.02, size=5)
        b = rng.normal(0.09, 0.02, size=5)
        res = ev.paired_ttest(a, b)
        d = a - b
        t = d.mean() / (d.std(ddof=1) / math.sqrt(len(d)))
        assert res.t == pytest.approx(t, rel=1e-12)
        ref = stats.ttest_rel(a, b)
        assert res.t == pytest.approx(ref.statistic, rel=1e-10)
        assert res.p == pytest.approx(ref.pvalue, rel=1e-10)
        assert res.df == 4 and not res.degenerate


def test_ttest_identical_pairs_degenerate():
    res = ev.paired_ttest([0.1, 0.2, 0.3], [0.1, 0.2, 0.3])
    assert res.degenerate and res.t == 0.0 and res.p == 1.0


def test_ttest_input_errors():
    with pytest.raises(ValueError):
        ev.paired_ttest([0.1], [0.2])
    with pytest.raises(ValueError):
        ev.paired_ttest([0.1, 0.2], [0.2])


@given(st.lists(st.floats(0, 1, allow_nan=False), min_size=2, max_size=30))
@settings(max_examples=50, deadline=None)
def test_metrics_bounded(values):
    scores = np.array(values)
    truth = [np.array([0])]
    ranking = [ev.top_k(scores, np.array([], dtype=int), 5)]
    assert 0.0 <= ev.recall_at_k(ranking, truth, 5) <= 1.0
    assert 0.0 <= ev.ndcg_at_k(ranking, truth, 5) <= 1.0


def test_evaluate_excludes_train(tmp_path):
    from dgvae.ingestion import DatasetSplit
    split = DatasetSplit(["a", "b"], ["x", "y", "z"],
                         np.array([[0, 0], [1, 1]]), np.empty((0, 2), np.int64), np.array([[0, 1], [1, 2]]))
    # item 0 scores highest but is a train item for user 0
    fn = lambda u: np.tile([3.0, 2.0, 1.0], (len(u), 1))
    report, rankings, users = ev.evaluate(fn, split, "test", (1,), threads=1)
    assert rankings[0].tolist() == [1] and rankings[1].tolist() == [0]
    assert report.metrics["recall@1"] == 0.5
