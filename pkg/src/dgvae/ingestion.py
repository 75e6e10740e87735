"""Loading, filtering and splitting interaction data; user-word TF-IDF."""
from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .numerics import SparseMatrix

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


@dataclass
class RawInteractions:
    users: list[str]
    items: list[str]

    def __len__(self) -> int:
        return len(self.users)

    def pairs(self):
        return zip(self.users, self.items)


@dataclass
class DatasetSplit:
    user_ids: list[str]
    item_ids: list[str]
    train: np.ndarray  # (n, 2) int64 (user_idx, item_idx)
    val: np.ndarray
    test: np.ndarray
    protocol: str = "random"
    cold_items: dict[str, list[int]] = field(default_factory=dict)

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    def part(self, name: str) -> np.ndarray:
        if name not in SPLITS:
            raise KeyError(name)
        return getattr(self, name)

    def matrix(self, name: str = "train") -> SparseMatrix:
        pairs = self.part(name)
        return SparseMatrix.from_triples(self.n_users, self.n_items, pairs[:, 0], pairs[:, 1])

    def user_items(self, name: str) -> list[np.ndarray]:
        pairs = self.part(name)
        out: list[list[int]] = [[] for _ in range(self.n_users)]
        for u, i in pairs:
            out[u].append(int(i))
        return [np.array(sorted(x), dtype=np.int64) for x in out]

    def n_interactions(self) -> int:
        return int(len(self.train) + len(self.val) + len(self.test))


@dataclass
class ModalityEmbeddings:
    modality: str
    matrix: np.ndarray

    def __post_init__(self):
        if self.matrix.ndim != 2 or self.matrix.shape[1] == 0:
            raise ValueError(f"{self.modality}: embeddings must be a non-empty 2-D matrix")
        if not np.all(np.isfinite(self.matrix)):
            raise ValueError(f"{self.modality}: embeddings contain non-finite values")


@dataclass
class ItemTokens:
    item_ids: list[str]
    text_tokens: list[list[str]]
    visual_tokens: list[list[str]]

    def index(self) -> dict[str, int]:
        return {iid: k for k, iid in enumerate(self.item_ids)}


@dataclass
class UserWordMatrix:
    matrix: SparseMatrix
    vocab: list[str]

    @property
    def word_index(self) -> dict[str, int]:
        return {w: k for k, w in enumerate(self.vocab)}


# ---------------------------------------------------------------------------
# file loaders
# ---------------------------------------------------------------------------

def load_interactions(path) -> RawInteractions:
    """Read ``user<TAB>item[<TAB>...]`` lines, dropping repeated pairs."""
    users, items = [], []
    seen: set[tuple[str, str]] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) < 2 or not parts[0] or not parts[1]:
                raise ValueError(f"{path}:{lineno}: expected user_id<TAB>item_id")
            key = (parts[0], parts[1])
            if key in seen:
                continue
            seen.add(key)
            users.append(parts[0])
            items.append(parts[1])
    if not users:
        raise ValueError(f"{path}: no interactions")
    return RawInteractions(users, items)


def load_embeddings(path, modality: str) -> ModalityEmbeddings:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise ValueError(f"{path}: header must be 'N d'")
        n, d = int(header[0]), int(header[1])
        body = np.loadtxt(fh, dtype=np.float64, ndmin=2) if n else np.zeros((0, d))
    if body.shape != (n, d):
        raise ValueError(f"{path}: expected {n}x{d} values, found {body.shape[0]}x{body.shape[1]}")
    return ModalityEmbeddings(modality, body)


def save_embeddings(path, emb: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{emb.shape[0]} {emb.shape[1]}\n")
        for row in emb:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def _clean(tokens) -> list[str]:
    out = []
    for t in tokens:
        t = str(t).strip().lower()
        if t:
            out.append(t)
    return out


def load_tokens(path) -> ItemTokens:
    ids, text, visual = [], [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                ids.append(str(obj["item_id"]))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad token record ({exc})") from None
            text.append(_clean(obj.get("text_tokens", [])))
            visual.append(_clean(obj.get("visual_tokens", [])))
    return ItemTokens(ids, text, visual)


def save_tokens(path, tokens: ItemTokens) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for iid, t, v in zip(tokens.item_ids, tokens.text_tokens, tokens.visual_tokens):
            fh.write(json.dumps({"item_id": iid, "text_tokens": t, "visual_tokens": v}) + "\n")


def align_rows(matrix: np.ndarray, catalog: Sequence[str], item_ids: Sequence[str]) -> np.ndarray:
    """Reorder catalog-ordered rows into the split's item index order."""
    pos = {iid: k for k, iid in enumerate(catalog)}
    missing = [iid for iid in item_ids if iid not in pos]
    if missing:
        raise KeyError(f"{len(missing)} items missing from catalog, e.g. {missing[0]!r}")
    return matrix[[pos[iid] for iid in item_ids]]


# ---------------------------------------------------------------------------
# filtering and splitting
# ---------------------------------------------------------------------------

def five_core_filter(r: RawInteractions, core: int = 5) -> RawInteractions:
    users, items = list(r.users), list(r.items)
    while True:
        uc = Counter(users)
        ic = Counter(items)
        keep = [uc[u] >= core and ic[i] >= core for u, i in zip(users, items)]
        if all(keep):
            return RawInteractions(users, items)
        users = [u for u, k in zip(users, keep) if k]
        items = [i for i, k in zip(items, keep) if k]


def _reindex(r: RawInteractions):
    uidx: dict[str, int] = {}
    iidx: dict[str, int] = {}
    pairs = np.empty((len(r), 2), dtype=np.int64)
    for n, (u, i) in enumerate(r.pairs()):
        pairs[n, 0] = uidx.setdefault(u, len(uidx))
        pairs[n, 1] = iidx.setdefault(i, len(iidx))
    return list(uidx), list(iidx), pairs


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_counts(n: int, ratios: Sequence[float] = (0.8, 0.1, 0.1)) -> tuple[int, int, int]:
    """Per-user train/val/test sizes: rounded train and val, test takes the rest.

    For n >= 2 the test share is forced to at least one interaction (taken
    from validation first, then train) and train is kept nonempty.
    """
    if n <= 0:
        return 0, 0, 0
    if n == 1:
        return 1, 0, 0
    n_train = min(_round_half_up(ratios[0] * n), n)
    n_val = min(_round_half_up(ratios[1] * n), n - n_train)
    n_test = n - n_train - n_val
    if n_test < 1:
        if n_val > 0:
            n_val -= 1
        else:
            n_train -= 1
        n_test += 1
    if n_train < 1:
        n_train, n_val = 1, n_val - 1
    return n_train, n_val, n_test


def _group_by(pairs: np.ndarray, col: int, n: int) -> list[np.ndarray]:
    groups: list[list[int]] = [[] for _ in range(n)]
    for row, key in enumerate(pairs[:, col]):
        groups[key].append(row)
    return [np.array(g, dtype=np.int64) for g in groups]


def random_split(
    r: RawInteractions,
    ratios: Sequence[float] = (0.8, 0.1, 0.1),
    seed: int = 0,
    strict: bool = False,
) -> DatasetSplit:
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError(f"ratios must be three nonnegative numbers summing to 1, got {ratios}")
    user_ids, item_ids, pairs = _reindex(r)
    rng = np.random.default_rng(seed)
    parts = {name: [] for name in SPLITS}
    for u, rows in enumerate(_group_by(pairs, 0, len(user_ids))):
        if strict and len(rows) < 3:
            raise ValueError(f"user {user_ids[u]!r} has {len(rows)} interactions (< 3)")
        rows = rows[rng.permutation(len(rows))]
        n_tr, n_va, _ = split_counts(len(rows), ratios)
        parts["train"].append(rows[:n_tr])
        parts["val"].append(rows[n_tr : n_tr + n_va])
        parts["test"].append(rows[n_tr + n_va :])
    sel = {k: pairs[np.concatenate(v)] if v else np.empty((0, 2), np.int64) for k, v in parts.items()}
    return DatasetSplit(user_ids, item_ids, sel["train"], sel["val"], sel["test"], "random")


def cold_start_split(
    r: RawInteractions,
    item_fraction: float = 0.2,
    keep_per_item: int = 2,
    seed: int = 0,
) -> DatasetSplit:
    """Item cold-start split; ``keep_per_item=0`` gives the zero-shot variant.

    ``floor(item_fraction * N)`` items are drawn; each keeps ``keep_per_item``
    random interactions in train. The first half of the drawn items sends its
    remaining interactions to validation, the second half to test.
    """
    if keep_per_item not in (0, 2):
        raise ValueError("keep_per_item must be 0 or 2")
    if not 0.0 < item_fraction < 1.0:
        raise ValueError("item_fraction must lie in (0, 1)")
    user_ids, item_ids, pairs = _reindex(r)
    n_items = len(item_ids)
    rng = np.random.default_rng(seed)
    by_item = _group_by(pairs, 1, n_items)
    drawn = rng.permutation(n_items)[: int(math.floor(item_fraction * n_items))]
    sampled = []
    for i in drawn:
        if len(by_item[i]) < keep_per_item:
            log.warning("cold-start: item %s has %d interactions, skipped", item_ids[i], len(by_item[i]))
            continue
        sampled.append(int(i))
    n_val_items = len(sampled) // 2
    val_items, test_items = sampled[:n_val_items], sampled[n_val_items:]
    role = np.zeros(n_items, dtype=np.int64)  # 0 train, 1 val, 2 test
    role[val_items] = 1
    role[test_items] = 2

    train_rows, val_rows, test_rows = [], [], []
    for i in range(n_items):
        rows = by_item[i]
        if role[i] == 0:
            train_rows.append(rows)
            continue
        rows = rows[rng.permutation(len(rows))]
        train_rows.append(rows[:keep_per_item])
        (val_rows if role[i] == 1 else test_rows).append(rows[keep_per_item:])

    def take(chunks):
        if not chunks:
            return np.empty((0, 2), np.int64)
        idx = np.sort(np.concatenate(chunks))
        return pairs[idx]

    protocol = "cold-start" if keep_per_item else "zero-shot"
    return DatasetSplit(
        user_ids,
        item_ids,
        take(train_rows),
        take(val_rows),
        take(test_rows),
        protocol,
        {"val": sorted(val_items), "test": sorted(test_items)},
    )


def save_split(path, split: DatasetSplit) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("#user_idx\titem_idx\tsplit\n")
        for name in SPLITS:
            for u, i in split.part(name):
                fh.write(f"{u}\t{i}\t{name}\n")


def load_split(path, user_ids: list[str], item_ids: list[str], protocol: str = "random") -> DatasetSplit:
    parts = {name: [] for name in SPLITS}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.startswith("#") or not line.strip():
                continue
            u, i, name = line.rstrip("\n").split("\t")
            if name not in parts:
                raise ValueError(f"{path}:{lineno}: unknown split {name!r}")
            parts[name].append((int(u), int(i)))
    arr = {k: np.array(v, dtype=np.int64).reshape(-1, 2) for k, v in parts.items()}
    return DatasetSplit(user_ids, item_ids, arr["train"], arr["val"], arr["test"], protocol)


# ---------------------------------------------------------------------------
# documents and TF-IDF
# ---------------------------------------------------------------------------

def merge_visual_tokens(tokens: ItemTokens, top_v: int = 5) -> list[list[str]]:
    if top_v < 0:
        raise ValueError("top_v must be >= 0")
    return [list(t) + list(v[:top_v]) for t, v in zip(tokens.text_tokens, tokens.visual_tokens)]


def build_user_word_matrix(
    docs: Sequence[Sequence[str]],
    split: DatasetSplit,
    min_df: int = 2,
    max_df_ratio: float = 0.5,
) -> UserWordMatrix:
    """TF-IDF over user documents built from train interactions only.

    tf is the raw count in the user's concatenated document, idf(w) =
    ln(M / df(w)) over the M user documents; words outside the document
    frequency bounds or with zero idf are dropped; rows are L2-normalized.
    """
    if len(docs) != split.n_items:
        raise ValueError(f"{len(docs)} item documents for {split.n_items} items")
    m = split.n_users
    counts: list[Counter] = [Counter() for _ in range(m)]
    for u, items in enumerate(split.user_items("train")):
        for i in items:
            counts[u].update(docs[i])
    df = Counter()
    for c in counts:
        df.update(c.keys())
    vocab = sorted(
        w for w, n in df.items() if n >= min_df and n / m <= max_df_ratio and math.log(m / n) > 0
    )
    if not vocab:
        raise ValueError("empty vocabulary after document-frequency filtering")
    index = {w: k for k, w in enumerate(vocab)}
    idf = {w: math.log(m / df[w]) for w in vocab}
    rows, cols, vals = [], [], []
    for u, c in enumerate(counts):
        entries = sorted((index[w], tf * idf[w]) for w, tf in c.items() if w in index)
        norm = math.sqrt(sum(v * v for _, v in entries))
        for k, v in entries:
            rows.append(u)
            cols.append(k)
            vals.append(v / norm)
    return UserWordMatrix(SparseMatrix.from_triples(m, len(vocab), rows, cols, vals), vocab)


def save_user_word_matrix(prefix, uw: UserWordMatrix) -> None:
    prefix = Path(prefix)
    with open(prefix.with_suffix(".vocab"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(uw.vocab) + "\n")
    r, c, v = uw.matrix.triples()
    with open(prefix.with_suffix(".tsv"), "w", encoding="utf-8") as fh:
        fh.write(f"#{uw.matrix.rows}\t{uw.matrix.cols}\n")
        for a, b, x in zip(r, c, v):
            fh.write(f"{a}\t{b}\t{float(x)!r}\n")


def load_user_word_matrix(prefix) -> UserWordMatrix:
    prefix = Path(prefix)
    vocab = prefix.with_suffix(".vocab").read_text(encoding="utf-8").split("\n")[:-1]
    with open(prefix.with_suffix(".tsv"), encoding="utf-8") as fh:
        m, w = (int(x) for x in fh.readline()[1:].split("\t"))
        data = np.loadtxt(fh, ndmin=2) if m else np.zeros((0, 3))
    if data.size == 0:
        data = np.zeros((0, 3))
    return UserWordMatrix(
        SparseMatrix.from_triples(m, w, data[:, 0].astype(np.int64), data[:, 1].astype(np.int64), data[:, 2]),
        vocab,
    )


def sparsity_percent(n_users: int, n_items: int, n_interactions: int) -> str:
    return f"{100.0 * (1.0 - n_interactions / (n_users * n_items)):.2f}%"


def dataset_stats(split: DatasetSplit) -> dict:
    m, n, k = split.n_users, split.n_items, split.n_interactions()
    return {
        "users": m,
        "items": n,
        "interactions": k,
        "sparsity": 1.0 - k / (m * n),
        "sparsity_pct": sparsity_percent(m, n, k),
        "train": int(len(split.train)),
        "val": int(len(split.val)),
        "test": int(len(split.test)),
    }


def user_documents(docs: Sequence[Sequence[str]], split: DatasetSplit) -> list[list[str]]:
    out = []
    for items in split.user_items("train"):
        doc: list[str] = []
        for i in items:
            doc.extend(docs[i])
        out.append(doc)
    return out

