"""Small deterministic fixtures for gradient checks and smoke runs."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .item_graph import build_item_graph
from .model import DGVAE, ModelConfig
from .numerics import GradcheckReport, SparseMatrix, Tensor, gradcheck
from .trainer import TrainConfig, loss_terms


@dataclass
class TinyFixture:
    model: DGVAE
    item_rows: np.ndarray
    word_rows: np.ndarray
    eps_item: np.ndarray
    eps_word: np.ndarray
    train_cfg: TrainConfig
    graph: SparseMatrix

    def loss(self) -> Tensor:
        return loss_terms(self.model, self.item_rows, self.word_rows,
                          self.eps_item, self.eps_word, self.train_cfg)["total"]


def tiny_fixture(seed: int = 0, n_users: int = 6, n_items: int = 8, n_words: int = 10,
                 k: int = 3, d: int = 4, layers: int = 2, graph_k: int = 3) -> TinyFixture:
    rng = np.random.default_rng(seed)
    items = (rng.random((n_users, n_items)) < 0.4).astype(np.float64)
    items[np.arange(n_users), rng.integers(n_items, size=n_users)] = 1.0  # no empty rows
    words = rng.random((n_users, n_words)) * (rng.random((n_users, n_words)) < 0.5)
    words[np.arange(n_users), rng.integers(n_words, size=n_users)] += 0.5
    words /= np.linalg.norm(words, axis=1, keepdims=True)
    graph = build_item_graph(
        {"visual": rng.normal(size=(n_items, 5)), "textual": rng.normal(size=(n_items, 5))}, k=graph_k
    ).matrix
    cfg = ModelConfig(n_prototypes=k, latent_dim=d, gcn_layers=layers)
    model = DGVAE(cfg, n_items, n_words, graph, rng=rng)
    eps_i = rng.standard_normal((k, n_users, d))
    eps_w = rng.standard_normal((k, n_users, d))
    tcfg = TrainConfig(mi_weight=0.2, kl_weight=0.1)
    return TinyFixture(model, items, words, eps_i, eps_w, tcfg, graph)


def full_loss_gradcheck(seed: int = 0, h: float = 1e-5, tol: float = 1e-4) -> GradcheckReport:
    fx = tiny_fixture(seed)
    return gradcheck(fx.loss, fx.model.parameter_list(), h=h, tol=tol)
