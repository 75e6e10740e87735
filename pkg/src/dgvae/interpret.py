"""Interpretability exports: prototype top words, item memberships, explanations."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .model import DGVAE

TIE_TOL = 1e-12


@dataclass
class PrototypeWordReport:
    user: int
    words: dict[int, list[tuple[str, float]]]   # prototype -> ranked (word, score)

    def to_dict(self) -> dict:
        return {"user": self.user,
                "prototypes": {str(k): [[w, s] for w, s in v] for k, v in self.words.items()}}


@dataclass
class ItemMembership:
    item: int
    prototype: int
    memberships: list[float]
    ambiguous: bool


@dataclass
class Explanation:
    user: int
    item: int
    prototype_weights: list[float]
    item_prototype: int
    overlap: dict[int, list[str]] = field(default_factory=dict)
    item_has_tokens: bool = True

    def to_dict(self) -> dict:
        d = asdict(self)
        d["overlap"] = {str(k): v for k, v in self.overlap.items()}
        return d


def word_scores(model: DGVAE, word_row: np.ndarray, k_proto: int) -> np.ndarray:
    """Word-branch decoder probabilities at z = mu with only ``k_proto`` active.

    Other prototype columns of the word assignment are zeroed; the remaining
    scores C[w, k] * exp(cos(mu_k, h_w) / tau) are renormalized over words.
    """
    if not model.cfg.word_branch:
        raise ValueError("word branch disabled")
    if not 0 <= k_proto < model.cfg.n_prototypes:
        raise ValueError(f"prototype {k_proto} out of range")
    row = np.asarray(word_row, dtype=np.float64).reshape(1, -1)
    assign = model.assignment("word")
    mu, _ = model.encode("word", row, assign)
    c_k = assign.probs.data[:, k_proto]
    if not np.any(c_k > 0):
        raise ValueError(f"prototype {k_proto} has no assignment mass left")
    z = mu.data[k_proto, 0]
    h = model.params["word_emb"].data
    cos = (h @ z) / (np.linalg.norm(h, axis=1) * max(np.linalg.norm(z), 1e-12))
    with np.errstate(divide="ignore"):
        logits = np.log(c_k) + cos / model.cfg.tau
    return np.exp(logits - logsumexp(logits))


def top_words(model: DGVAE, word_row, k_proto: int, n_words: int, vocab: Sequence[str]) -> list[tuple[str, float]]:
    scores = word_scores(model, word_row, k_proto)
    if len(vocab) != scores.size:
        raise ValueError("vocabulary size does not match the word branch")
    order = np.argsort(-scores, kind="stable")[: min(n_words, scores.size)]
    return [(vocab[i], float(scores[i])) for i in order]


def prototype_word_report(model: DGVAE, user: int, word_row, n_words: int, vocab) -> PrototypeWordReport:
    return PrototypeWordReport(
        user, {k: top_words(model, word_row, k, n_words, vocab) for k in range(model.cfg.n_prototypes)}
    )


def item_prototype(c_row) -> ItemMembership:
    row = np.asarray(c_row, dtype=np.float64)
    best = int(np.argmax(row))
    ties = np.flatnonzero(row >= row[best] - TIE_TOL)
    return ItemMembership(-1, best, [float(x) for x in row], len(ties) > 1)


def item_memberships(model: DGVAE) -> list[ItemMembership]:
    out = []
    for i, row in enumerate(model.item_assignment()):
        m = item_prototype(row)
        m.item = i
        out.append(m)
    return out


def user_prototype_weights(item_assignment: np.ndarray, train_items: Sequence[int]) -> np.ndarray:
    """Renormalized mean of the assignment rows of the user's train items."""
    items = np.asarray(train_items, dtype=np.int64)
    if items.size == 0:
        raise ValueError("user has no train items")
    w = item_assignment[items].mean(axis=0)
    return w / w.sum()


def explain(model: DGVAE, user: int, item: int, train_items, word_row, vocab,
            item_doc: Sequence[str] | None, n_words: int = 10) -> Explanation:
    c = model.item_assignment()
    if not 0 <= item < c.shape[0]:
        raise ValueError(f"item {item} not in catalog")
    weights = user_prototype_weights(c, train_items)
    membership = item_prototype(c[item])
    exp = Explanation(user, item, [float(x) for x in weights], membership.prototype)
    if not item_doc:
        exp.item_has_tokens = False
        return exp
    doc = set(item_doc)
    vocab_set = set(vocab)
    for k in range(model.cfg.n_prototypes):
        words = [w for w, _ in top_words(model, word_row, k, n_words, vocab)]
        exp.overlap[k] = [w for w in words if w in doc and w in vocab_set]
    return exp


def frequency_table(report: PrototypeWordReport) -> str:
    """TSV of (prototype, word, score) for external word-cloud tools."""
    lines = ["prototype\tword\tscore"]
    for k, ranked in sorted(report.words.items()):
        lines.extend(f"{k}\t{w}\t{s!r}" for w, s in ranked)
    return "\n".join(lines) + "\n"
