"""Synthetic multimodal datasets with planted prototypes."""
from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .ingestion import ItemTokens, RawInteractions, save_embeddings, save_tokens


@dataclass
class SynthConfig:
    n_users: int = 300
    n_items: int = 200
    n_words: int = 150
    n_prototypes: int = 3
    interactions_per_user: int = 12
    tokens_per_item: int = 8
    visual_tokens_per_item: int = 5
    noise: float = 0.1               # eta
    seed: int = 0
    emb_dim: int = 16
    emb_noise: float = 0.2
    one_hot_prob: float = 0.5
    dirichlet_alpha: float = 1.0

    def validate(self) -> "SynthConfig":
        k = self.n_prototypes
        if k < 2:
            raise ValueError("n_prototypes must be >= 2")
        if not 0.0 <= self.noise < 1.0:
            raise ValueError("noise must lie in [0, 1)")
        if self.interactions_per_user < 5:
            raise ValueError("interactions_per_user must be >= 5")
        if self.interactions_per_user > self.n_items:
            raise ValueError("more interactions per user than items")
        if self.n_items < k or self.n_words < k:
            raise ValueError("need at least one item and one word per prototype")
        pool = self.n_words // k
        if max(self.tokens_per_item, self.visual_tokens_per_item) > pool:
            raise ValueError(f"tokens per item exceed the per-prototype word pool ({pool})")
        if self.emb_dim < k:
            raise ValueError("emb_dim must be >= n_prototypes for orthogonal centroids")
        return self


@dataclass
class SynthTruth:
    item_ids: list[str]
    item_labels: np.ndarray     # (N,)
    words: list[str]
    word_labels: np.ndarray     # (W,)
    user_ids: list[str]
    user_mixtures: np.ndarray   # (M, K)

    def labels_for(self, item_ids) -> np.ndarray:
        pos = {iid: k for k, iid in enumerate(self.item_ids)}
        return self.item_labels[[pos[i] for i in item_ids]]

    def word_label_map(self) -> dict[str, int]:
        return {w: int(l) for w, l in zip(self.words, self.word_labels)}

    def to_dict(self) -> dict:
        return {
            "item_labels": {i: int(l) for i, l in zip(self.item_ids, self.item_labels)},
            "word_labels": self.word_label_map(),
            "user_mixtures": {u: [float(x) for x in m] for u, m in zip(self.user_ids, self.user_mixtures)},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SynthTruth":
        items = list(d["item_labels"])
        words = list(d["word_labels"])
        users = list(d["user_mixtures"])
        return cls(
            items, np.array([d["item_labels"][i] for i in items], dtype=np.int64),
            words, np.array([d["word_labels"][w] for w in words], dtype=np.int64),
            users, np.array([d["user_mixtures"][u] for u in users], dtype=np.float64),
        )


@dataclass
class SynthDataset:
    config: SynthConfig
    interactions: RawInteractions
    visual: np.ndarray
    textual: np.ndarray
    tokens: ItemTokens
    truth: SynthTruth


def _sample_without(rng, candidates: np.ndarray, taken: set[int]) -> int | None:
    free = [int(c) for c in candidates if int(c) not in taken]
    if not free:
        return None
    return free[int(rng.integers(len(free)))]


def _repair_item_counts(rng, users: list[str], items: list[str], item_ids, item_labels, core: int) -> None:
    """Swap interactions onto items below ``core`` so 5-core filtering is a no-op.

    Best effort: sparse configs that cannot cover every item are left as is.
    Each swap replaces a same-label item held by a user who lacks the rare
    item, so per-user counts and prototype composition are unchanged.
    """
    label = dict(zip(item_ids, item_labels.tolist()))
    count = {i: 0 for i in item_ids}
    held: dict[str, set[str]] = {}
    for u, i in zip(users, items):
        count[i] += 1
        held.setdefault(u, set()).add(i)
    for rare in item_ids:
        while count[rare] < core:
            rows = [r for r in range(len(items))
                    if label[items[r]] == label[rare] and count[items[r]] > core and rare not in held[users[r]]]
            if not rows:
                break
            r = rows[int(rng.integers(len(rows)))]
            old = items[r]
            held[users[r]].discard(old)
            held[users[r]].add(rare)
            count[old] -= 1
            count[rare] += 1
            items[r] = rare


def generate(cfg: SynthConfig) -> SynthDataset:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    k, n, w, m = cfg.n_prototypes, cfg.n_items, cfg.n_words, cfg.n_users

    item_labels = rng.permutation(np.arange(n) % k)
    word_labels = (np.arange(w) * k) // w
    pools = [np.flatnonzero(word_labels == j) for j in range(k)]
    members = [np.flatnonzero(item_labels == j) for j in range(k)]
    words = [f"w{j:03d}" for j in range(w)]
    item_ids = [f"i{j:04d}" for j in range(n)]
    user_ids = [f"u{j:04d}" for j in range(m)]

    centroids = np.eye(k, cfg.emb_dim)
    visual = centroids[item_labels] + rng.normal(0.0, cfg.emb_noise, (n, cfg.emb_dim))
    textual = centroids[item_labels] + rng.normal(0.0, cfg.emb_noise, (n, cfg.emb_dim))

    def draw_tokens(label: int, count: int) -> list[str]:
        out = []
        for _ in range(count):
            pool = np.arange(w) if rng.random() < cfg.noise else pools[label]
            out.append(words[int(pool[rng.integers(len(pool))])])
        return out

    text_tokens = [draw_tokens(int(item_labels[i]), cfg.tokens_per_item) for i in range(n)]
    visual_tokens = [draw_tokens(int(item_labels[i]), cfg.visual_tokens_per_item) for i in range(n)]

    mixtures = np.zeros((m, k))
    users, items = [], []
    all_items = np.arange(n)
    for u in range(m):
        if rng.random() < cfg.one_hot_prob:
            mixtures[u, rng.integers(k)] = 1.0
        else:
            mixtures[u] = rng.dirichlet(np.full(k, cfg.dirichlet_alpha))
        taken: set[int] = set()
        while len(taken) < cfg.interactions_per_user:
            if rng.random() < cfg.noise:
                pick = _sample_without(rng, all_items, taken)
            else:
                proto = int(rng.choice(k, p=mixtures[u]))
                pick = _sample_without(rng, members[proto], taken)
                if pick is None:
                    pick = _sample_without(rng, all_items, taken)
            taken.add(pick)
            users.append(user_ids[u])
            items.append(item_ids[pick])

    _repair_item_counts(rng, users, items, item_ids, item_labels, core=5)
    truth = SynthTruth(item_ids, item_labels, words, word_labels, user_ids, mixtures)
    return SynthDataset(cfg, RawInteractions(users, items), visual, textual,
                        ItemTokens(item_ids, text_tokens, visual_tokens), truth)


def write_dataset(ds: SynthDataset, out_dir) -> dict[str, Path]:
    """Write ingestion-format files; returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "interactions": out / "interactions.tsv",
        "visual": out / "visual.txt",
        "textual": out / "textual.txt",
        "tokens": out / "tokens.jsonl",
        "truth": out / "truth.json",
        "config": out / "synth_config.json",
    }
    with open(paths["interactions"], "w", encoding="utf-8") as fh:
        for u, i in ds.interactions.pairs():
            fh.write(f"{u}\t{i}\n")
    save_embeddings(paths["visual"], ds.visual)
    save_embeddings(paths["textual"], ds.textual)
    save_tokens(paths["tokens"], ds.tokens)
    paths["truth"].write_text(json.dumps(ds.truth.to_dict(), sort_keys=True) + "\n", encoding="utf-8")
    paths["config"].write_text(json.dumps(asdict(ds.config), sort_keys=True) + "\n", encoding="utf-8")
    return paths


def load_truth(path) -> SynthTruth:
    return SynthTruth.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def prototype_purity(learned, truth_labels, n_prototypes: int | None = None) -> float:
    """Best fraction of items whose learned prototype matches the planted one
    over all relabelings.

    ``learned`` is either an (N, K) assignment matrix or an (N,) label vector.
    """
    learned = np.asarray(learned)
    truth_labels = np.asarray(truth_labels, dtype=np.int64)
    k_true = int(n_prototypes if n_prototypes is not None else truth_labels.max() + 1)
    if learned.ndim == 2:
        if learned.shape[1] != k_true:
            raise ValueError(f"learned K={learned.shape[1]} differs from planted K={k_true}")
        labels = np.argmax(learned, axis=1)
    else:
        labels = learned.astype(np.int64)
        if labels.size and labels.max() >= k_true:
            raise ValueError("learned labels exceed the planted prototype count")
    if labels.shape != truth_labels.shape:
        raise ValueError("learned and planted label counts differ")
    if k_true > 8:
        raise ValueError("permutation search limited to K <= 8")
    confusion = np.zeros((k_true, k_true), dtype=np.int64)
    np.add.at(confusion, (labels, truth_labels), 1)
    best = max(sum(confusion[p[j], j] for j in range(k_true)) for p in itertools.permutations(range(k_true)))
    return best / len(labels)


def interaction_purity(ds: SynthDataset) -> float:
    """Fraction of interactions whose item carries the user's dominant label."""
    item_pos = {iid: j for j, iid in enumerate(ds.truth.item_ids)}
    user_pos = {uid: j for j, uid in enumerate(ds.truth.user_ids)}
    dominant = np.argmax(ds.truth.user_mixtures, axis=1)
    hits = sum(
        ds.truth.item_labels[item_pos[i]] == dominant[user_pos[u]] for u, i in ds.interactions.pairs()
    )
    return hits / len(ds.interactions)
