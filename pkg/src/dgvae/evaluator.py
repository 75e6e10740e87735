"""Top-K ranking, Recall/NDCG, improvement percentages and paired t-tests."""
from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats

log = logging.getLogger(__name__)

CHUNK = 256


def thread_count() -> int:
    try:
        return max(1, int(os.environ.get("DGVAE_THREADS", "1")))
    except ValueError:
        return 1


def top_k(scores: np.ndarray, exclude: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` best scores, excluded positions removed, ties by index."""
    s = np.array(scores, dtype=np.float64, copy=True)
    s[exclude] = -np.inf
    avail = s.size - len(np.unique(exclude))
    order = np.argsort(-s, kind="stable")
    return order[: min(k, avail)]


def rank_users(
    score_fn: Callable[[np.ndarray], np.ndarray],
    users: Sequence[int],
    exclude: Sequence[np.ndarray],
    k: int,
    threads: int | None = None,
) -> list[np.ndarray]:
    """Rank items for ``users`` in fixed chunks of users.

    ``score_fn`` maps an array of user indices to a (len, N) score matrix.
    Chunk boundaries do not depend on the thread count, so parallel and
    sequential runs produce identical rankings.
    """
    users = np.asarray(users, dtype=np.int64)
    chunks = [users[i : i + CHUNK] for i in range(0, len(users), CHUNK)]

    def run(chunk):
        scores = score_fn(chunk)
        return [top_k(scores[j], exclude[u], k) for j, u in enumerate(chunk)]

    threads = thread_count() if threads is None else threads
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    return [r for part in parts for r in part]


def model_score_fn(model, train_matrix) -> Callable[[np.ndarray], np.ndarray]:
    def fn(users):
        return model.item_log_probs(train_matrix.select_rows(users))

    return fn


def popularity_score_fn(train_matrix) -> Callable[[np.ndarray], np.ndarray]:
    counts = np.bincount(train_matrix.indices, minlength=train_matrix.cols).astype(np.float64)

    def fn(users):
        return np.broadcast_to(counts, (len(users), counts.size))

    return fn


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def _user_pairs(rankings, truths):
    for ranked, truth in zip(rankings, truths):
        if len(truth) == 0:
            continue
        yield ranked, set(int(t) for t in truth)


def recall_per_user(rankings, truths, k: int) -> list[float]:
    out = []
    for ranked, truth in _user_pairs(rankings, truths):
        hits = sum(1 for i in ranked[:k] if int(i) in truth)
        out.append(hits / len(truth))
    return out


def ndcg_per_user(rankings, truths, k: int) -> list[float]:
    out = []
    for ranked, truth in _user_pairs(rankings, truths):
        dcg = 0.0
        for pos, i in enumerate(ranked[:k], start=1):
            if int(i) in truth:
                dcg += 1.0 / math.log2(pos + 1)
        idcg = sum(1.0 / math.log2(pos + 1) for pos in range(1, min(len(truth), k) + 1))
        out.append(dcg / idcg)
    return out


def _mean(values: list[float]) -> float:
    if not values:
        raise ValueError("no users with test interactions")
    total = 0.0
    for v in values:
        total += v
    return total / len(values)


def recall_at_k(rankings, truths, k: int) -> float:
    skipped = sum(1 for t in truths if len(t) == 0)
    if skipped:
        log.warning("%d users without held-out items excluded", skipped)
    return _mean(recall_per_user(rankings, truths, k))


def ndcg_at_k(rankings, truths, k: int) -> float:
    return _mean(ndcg_per_user(rankings, truths, k))


@dataclass
class EvalReport:
    metrics: dict[str, float]
    n_users: int
    part: str = "test"
    per_seed: dict[str, list[float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"part": self.part, "n_users": self.n_users, "metrics": self.metrics,
                "per_seed": self.per_seed}


def evaluate_rankings(rankings, truths, ks: Sequence[int] = (10, 20), part: str = "test") -> EvalReport:
    metrics = {}
    for k in ks:
        metrics[f"recall@{k}"] = recall_at_k(rankings, truths, k)
    for k in ks:
        metrics[f"ndcg@{k}"] = ndcg_at_k(rankings, truths, k)
    n = sum(1 for t in truths if len(t))
    return EvalReport(metrics, n, part)


def evaluate(score_fn, split, part: str = "test", ks: Sequence[int] = (10, 20),
             threads: int | None = None) -> tuple[EvalReport, list[np.ndarray], np.ndarray]:
    """Score users holding ``part`` interactions; train items are excluded."""
    train_items = split.user_items("train")
    truth_all = split.user_items(part)
    users = np.array([u for u in range(split.n_users) if len(truth_all[u])], dtype=np.int64)
    if len(users) == 0:
        raise ValueError(f"split has no {part} interactions")
    rankings = rank_users(score_fn, users, train_items, max(ks), threads)
    truths = [truth_all[u] for u in users]
    return evaluate_rankings(rankings, truths, ks, part), rankings, users


# ---------------------------------------------------------------------------
# reporting
# ---------------------------------------------------------------------------

def improvement_report(ours: float, baseline: float) -> float:
    """Relative improvement in percent, rounded to two decimals."""
    if baseline <= 0:
        raise ValueError("baseline must be positive")
    return round(100.0 * (ours - baseline) / baseline, 2)


@dataclass
class TTestResult:
    t: float
    p: float
    df: int
    degenerate: bool


def paired_ttest(a: Sequence[float], b: Sequence[float]) -> TTestResult:
    """Two-sided paired t-test; zero-variance differences are flagged degenerate."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired samples must be 1-D and equal length")
    n = a.size
    if n < 2:
        raise ValueError("need at least two pairs")
    diff = a - b
    mean = float(np.mean(diff))
    sd = float(np.std(diff, ddof=1))
    if sd == 0.0:
        return TTestResult(0.0, 1.0, n - 1, True)
    t = mean / (sd / math.sqrt(n))
    p = float(2.0 * stats.t.sf(abs(t), df=n - 1))
    return TTestResult(t, p, n - 1, False)
