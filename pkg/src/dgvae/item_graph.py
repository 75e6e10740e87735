"""Frozen multimodal item-item graph: kNN binarization, normalization, fusion."""
from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .numerics import SparseMatrix

log = logging.getLogger(__name__)

MAGIC = b"DGVGRAPH"
VERSION = 1
_ENTRY = np.dtype([("row", "<u4"), ("col", "<u4"), ("val", "<f8")])


@dataclass(frozen=True)
class ModalityGraph:
    modality: str
    matrix: SparseMatrix


@dataclass(frozen=True)
class ItemGraph:
    """Fused adjacency; frozen dataclass over read-only CSR arrays."""

    matrix: SparseMatrix
    modalities: tuple[str, ...]
    weights: tuple[float, ...]
    k: int

    @property
    def n_items(self) -> int:
        return self.matrix.rows

    def checksum(self) -> str:
        r, c, v = self.matrix.triples()
        h = hashlib.sha256()
        for arr in (r.astype("<u4"), c.astype("<u4"), v.astype("<f8")):
            h.update(arr.tobytes())
        return h.hexdigest()


def _unit_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.sqrt(np.einsum("ij,ij->i", x, x))
    zero = norms == 0.0
    safe = np.where(zero, 1.0, norms)
    return x / safe[:, None], zero


def cosine_similarity(x: np.ndarray) -> np.ndarray:
    """Dense cosine similarity; for small inputs and tests only."""
    unit, _ = _unit_rows(np.asarray(x, dtype=np.float64))
    return unit @ unit.T


def knn_binarize(x: np.ndarray, k: int, block_size: int = 1024) -> SparseMatrix:
    """Per row, a 1 at each of the ``k`` most cosine-similar columns.

    The diagonal takes part (an item is its own nearest neighbour). Ties go
    to the lower column index. Similarities are computed ``block_size`` rows
    at a time so the full N x N matrix never exists at once.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > n:
        log.warning("k=%d exceeds item count %d; clamped", k, n)
        k = n
    unit, zero = _unit_rows(x)
    if zero.any():
        log.warning("%d items have zero-norm embeddings and get no edges", int(zero.sum()))
    rows, cols = [], []
    for lo in range(0, n, block_size):
        hi = min(lo + block_size, n)
        sims = unit[lo:hi] @ unit.T
        top = np.argsort(-sims, axis=1, kind="stable")[:, :k]
        for off in range(hi - lo):
            if zero[lo + off]:
                continue
            rows.append(np.full(k, lo + off))
            cols.append(top[off])
    if not rows:
        return SparseMatrix.from_triples(n, n, [], [])
    return SparseMatrix.from_triples(n, n, np.concatenate(rows), np.concatenate(cols))


def symmetric_normalize(s: SparseMatrix) -> SparseMatrix:
    """D^-1/2 S D^-1/2 with D the row-degree matrix; empty rows stay empty."""
    r, c, v = s.triples()
    if np.any(v < 0):
        raise ValueError("adjacency entries must be nonnegative")
    deg = s.row_sums()
    return SparseMatrix.from_triples(s.rows, s.cols, r, c, v / np.sqrt(deg[r] * deg[c]))


def modality_graph(modality: str, x: np.ndarray, k: int, block_size: int = 1024) -> ModalityGraph:
    return ModalityGraph(modality, symmetric_normalize(knn_binarize(x, k, block_size)))


def fuse_modalities(
    graphs: Sequence[ModalityGraph],
    alpha_v: float | None = 0.1,
    weights: Sequence[float] | None = None,
    k: int = 0,
) -> ItemGraph:
    """Weighted sum of modality graphs.

    With exactly a visual and a textual graph, ``alpha_v`` sets the visual
    weight and the textual one is ``1 - alpha_v``; otherwise pass explicit
    ``weights`` summing to one.
    """
    if not graphs:
        raise ValueError("need at least one modality graph")
    n = graphs[0].matrix.rows
    if any(g.matrix.shape != (n, n) for g in graphs):
        raise ValueError("modality graphs differ in size")
    names = tuple(g.modality for g in graphs)
    if weights is None:
        if len(graphs) == 1:
            weights = (1.0,)
        elif set(names) == {"visual", "textual"} and alpha_v is not None:
            if not 0.0 <= alpha_v <= 1.0:
                raise ValueError("alpha_v must lie in [0, 1]")
            weights = tuple(alpha_v if m == "visual" else 1.0 - alpha_v for m in names)
        else:
            raise ValueError("explicit weights required for these modalities")
    weights = tuple(float(w) for w in weights)
    if len(weights) != len(graphs) or abs(sum(weights) - 1.0) > 1e-12 or min(weights) < 0:
        raise ValueError(f"modality weights must be nonnegative and sum to 1, got {weights}")
    parts_k, parts_v = [], []
    for g, w in zip(graphs, weights):
        r, c, v = g.matrix.triples()
        parts_k.append(r * n + c)
        parts_v.append(w * v)
    keys = np.concatenate(parts_k)
    acc = np.concatenate(parts_v)
    # duplicates summed in modality order by from_triples (stable lexsort)
    fused = SparseMatrix.from_triples(n, n, keys // n, keys % n, acc)
    return ItemGraph(fused, names, weights, int(k))


def build_item_graph(
    embeddings: dict[str, np.ndarray], k: int = 10, alpha_v: float = 0.1, block_size: int = 1024
) -> ItemGraph:
    order = sorted(embeddings, key=lambda m: (m != "visual", m))
    graphs = [modality_graph(m, embeddings[m], k, block_size) for m in order]
    n = graphs[0].matrix.rows
    return fuse_modalities(graphs, alpha_v=alpha_v, k=min(k, n))


def save_graph(path, g: ItemGraph) -> None:
    r, c, v = g.matrix.triples()
    entries = np.empty(len(v), dtype=_ENTRY)
    entries["row"], entries["col"], entries["val"] = r, c, v
    names = "\x1f".join(g.modalities).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IIII", VERSION, g.n_items, g.k, len(g.weights)))
        fh.write(struct.pack(f"<{len(g.weights)}d", *g.weights))
        fh.write(struct.pack("<I", len(names)))
        fh.write(names)
        fh.write(struct.pack("<Q", len(v)))
        fh.write(entries.tobytes())


def load_graph(path) -> ItemGraph:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not an item graph file (bad magic)")
    off = len(MAGIC)
    try:
        version, n, k, n_w = struct.unpack_from("<IIII", blob, off)
        if version != VERSION:
            raise ValueError(f"{path}: graph format version {version}, expected {VERSION}")
        off += 16
        weights = struct.unpack_from(f"<{n_w}d", blob, off)
        off += 8 * n_w
        (name_len,) = struct.unpack_from("<I", blob, off)
        off += 4
        names = blob[off : off + name_len].decode("utf-8")
        off += name_len
        (nnz,) = struct.unpack_from("<Q", blob, off)
        off += 8
    except struct.error as exc:
        raise ValueError(f"{path}: truncated graph header") from exc
    if len(blob) - off != nnz * _ENTRY.itemsize:
        raise ValueError(f"{path}: corrupt graph body")
    entries = np.frombuffer(blob, dtype=_ENTRY, count=nnz, offset=off)
    m = SparseMatrix.from_triples(n, n, entries["row"].astype(np.int64), entries["col"].astype(np.int64), entries["val"])
    return ItemGraph(m, tuple(names.split("\x1f")) if names else (), tuple(weights), k)
