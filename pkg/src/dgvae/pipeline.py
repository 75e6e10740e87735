"""In-memory glue from raw files (or a synthetic dataset) to trainer inputs."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ingestion as ing
from .item_graph import ItemGraph, build_item_graph


@dataclass
class PreparedData:
    split: ing.DatasetSplit
    words: ing.UserWordMatrix
    docs: list[list[str]]              # per item, split item order
    embeddings: dict[str, np.ndarray]  # per modality, split item order
    stats: dict


def prepare(raw: ing.RawInteractions, tokens: ing.ItemTokens, embeddings: dict[str, np.ndarray],
            seed: int = 0, core: int = 5, top_v: int = 5, min_df: int = 2, max_df_ratio: float = 0.5,
            ratios=(0.8, 0.1, 0.1), cold_start: int | None = None, cold_fraction: float = 0.2) -> PreparedData:
    """Filter, split, align catalog rows and build the user-word matrix.

    ``embeddings`` rows follow the token catalog order.
    """
    filtered = ing.five_core_filter(raw, core)
    if len(filtered) == 0:
        raise ValueError(f"no interactions survive the {core}-core filter")
    if cold_start is None:
        split = ing.random_split(filtered, ratios, seed=seed)
    else:
        split = ing.cold_start_split(filtered, cold_fraction, cold_start, seed=seed)
    merged = ing.merge_visual_tokens(tokens, top_v)
    pos = tokens.index()
    missing = [iid for iid in split.item_ids if iid not in pos]
    if missing:
        raise KeyError(f"{len(missing)} items have no token record, e.g. {missing[0]!r}")
    docs = [merged[pos[iid]] for iid in split.item_ids]
    aligned = {m: ing.align_rows(x, tokens.item_ids, split.item_ids) for m, x in embeddings.items()}
    words = ing.build_user_word_matrix(docs, split, min_df, max_df_ratio)
    stats = ing.dataset_stats(split)
    stats["words"] = len(words.vocab)
    return PreparedData(split, words, docs, aligned, stats)


def graph_for(data: PreparedData, k: int = 10, alpha_v: float = 0.1) -> ItemGraph:
    return build_item_graph(data.embeddings, k=k, alpha_v=alpha_v)
