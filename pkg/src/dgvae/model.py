"""Disentangled graph VAE: prototype assignment, graph encoder, decoder.

The same encoder/decoder pair is instantiated for two branches, ``item``
(interaction rows over N items, propagated on the frozen item graph) and
``word`` (TF-IDF rows over W words, identity propagation). Both branches
share the prototype latents.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .numerics import SparseMatrix, Tensor
from .numerics import tensor as T
from .numerics.sparse import dense_sparse_matmul

LOG_FLOOR = math.log(1e-12)
BRANCHES = ("item", "word")


@dataclass
class ModelConfig:
    n_prototypes: int = 4
    latent_dim: int = 64
    gcn_layers: int = 2
    tau: float = 0.1
    sigma0: float = 0.1
    word_branch: bool = True

    def validate(self) -> "ModelConfig":
        if self.n_prototypes < 2:
            raise ValueError("n_prototypes must be >= 2")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if self.gcn_layers < 0:
            raise ValueError("gcn_layers must be >= 0")
        if self.tau <= 0 or self.sigma0 <= 0:
            raise ValueError("tau and sigma0 must be positive")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PrototypeAssignment:
    logits: Tensor      # (n, K)  h m^T / tau
    probs: Tensor       # (n, K)  row softmax
    log_probs: Tensor   # (n, K)


@dataclass
class DisentangledLatent:
    mu: Tensor          # (K, B, d), unit rows
    sigma: Tensor       # (K, B, d), positive
    z: Tensor           # (K, B, d)


def xavier_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

def prototype_assign(h, m, tau: float) -> PrototypeAssignment:
    if tau <= 0:
        raise ValueError("tau must be positive")
    logits = T.matmul(h, T.transpose(m)) * (1.0 / tau)
    log_probs = T.log_softmax(logits, axis=1)
    return PrototypeAssignment(logits, T.exp(log_probs), log_probs)


def res_gcn(e, graph: SparseMatrix | None, layers: int) -> Tensor:
    """Propagate rows ``layers`` times through ``graph`` and add the input back.

    ``graph=None`` stands for the identity adjacency.
    """
    e = T.as_tensor(e)
    out = e
    if graph is not None:
        for _ in range(layers):
            out = dense_sparse_matmul(out, graph)
    return e + out


def encode(rows: np.ndarray, assign: PrototypeAssignment, graph: SparseMatrix | None,
           weight: Tensor, bias: Tensor, cfg: ModelConfig) -> tuple[Tensor, Tensor]:
    """Per-prototype Gaussian posterior parameters for a batch of rows.

    Returns ``mu`` and ``sigma`` shaped (K, B, d).
    """
    rows = np.asarray(rows, dtype=np.float64)
    b, n = rows.shape
    k, d = cfg.n_prototypes, cfg.latent_dim
    if assign.probs.shape[0] != n or weight.shape[0] != n:
        raise ValueError(f"row length {n} does not match entity count {assign.probs.shape[0]}")
    # (K, 1, n) * (1, B, n): mask each row by every prototype's column of C
    masks = T.reshape(T.transpose(assign.probs), (k, 1, n))
    e = T.reshape(masks * rows[None, :, :], (k * b, n))
    e = T.l2_normalize(e, axis=1)
    e = res_gcn(e, graph, cfg.gcn_layers)
    out = T.reshape(T.matmul(e, weight) + bias, (k, b, 2 * d))
    a = out[:, :, :d]
    log_scale = out[:, :, d:]
    mu = T.l2_normalize(a, axis=-1)
    sigma = T.exp(log_scale * -0.5) * cfg.sigma0
    return mu, sigma


def reparameterize(mu, sigma, eps) -> Tensor:
    if eps is None:
        return T.as_tensor(mu)
    return mu + T.as_tensor(eps) * sigma


def decode(z, assign: PrototypeAssignment, h, tau: float) -> Tensor:
    """Log-probabilities (B, n) of the prototype-mixed multinomial decoder.

    score_i = sum_k C[i, k] * exp(cos(z_k, h_i) / tau), normalized over i;
    evaluated in the log domain.
    """
    z = T.as_tensor(z)
    zn = T.l2_normalize(z, axis=-1)                    # (K, B, d)
    hn = T.l2_normalize(h, axis=1)                      # (n, d)
    logits = T.matmul(zn, T.transpose(hn)) * (1.0 / tau)  # (K, B, n)
    k, n = assign.log_probs.shape[1], assign.log_probs.shape[0]
    log_c = T.reshape(T.transpose(assign.log_probs), (k, 1, n))
    log_scores = T.logsumexp(logits + log_c, axis=0)    # (B, n)
    return log_scores - T.logsumexp(log_scores, axis=1, keepdims=True)


def kl_term(mu, sigma, sigma0: float) -> Tensor:
    """KL(N(mu, sigma^2) || N(0, sigma0^2)) summed over all but the batch axis.

    Inputs are (K, B, d); result is (B,).
    """
    mu, sigma = T.as_tensor(mu), T.as_tensor(sigma)
    # in terms of r = sigma / sigma0 so the prior point evaluates to exactly 0
    r = sigma * (1.0 / sigma0)
    m = mu * (1.0 / sigma0)
    per = (r * r - 1.0) * 0.5 - T.log(r) + m * m * 0.5
    return T.tsum(T.tsum(per, axis=2), axis=0)


def reconstruction_loglik(log_pi, rows) -> Tensor:
    """Multinomial log-likelihood sum_i r_i ln pi_i per row, ln clamped at ln 1e-12."""
    return T.tsum(T.as_tensor(rows) * T.clamp_min(log_pi, LOG_FLOOR), axis=-1)


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

class DGVAE:
    """Parameters plus the frozen graph; forward passes are stateless."""

    def __init__(self, cfg: ModelConfig, n_items: int, n_words: int,
                 graph: SparseMatrix | None, seed: int = 0, rng: np.random.Generator | None = None):
        self.cfg = cfg.validate()
        self.n_items = n_items
        self.n_words = n_words if cfg.word_branch else 0
        if graph is not None and graph.shape != (n_items, n_items):
            raise ValueError(f"graph is {graph.shape}, expected {(n_items, n_items)}")
        self.graph = graph
        rng = rng if rng is not None else np.random.default_rng(seed)
        d, k = cfg.latent_dim, cfg.n_prototypes
        p = {
            "item_emb": xavier_uniform(rng, n_items, d),
            "proto": xavier_uniform(rng, k, d),
            "enc_item_w": xavier_uniform(rng, n_items, 2 * d),
            "enc_item_b": np.zeros(2 * d),
        }
        if cfg.word_branch:
            p["word_emb"] = xavier_uniform(rng, n_words, d)
            p["enc_word_w"] = xavier_uniform(rng, n_words, 2 * d)
            p["enc_word_b"] = np.zeros(2 * d)
        self.params: dict[str, Tensor] = {
            name: Tensor(val, requires_grad=True, name=name) for name, val in p.items()
        }

    # parameter access ------------------------------------------------------
    def parameter_list(self) -> list[Tensor]:
        return [self.params[k] for k in sorted(self.params)]

    def parameter_names(self) -> list[str]:
        return sorted(self.params)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in sorted(self.params.items())}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        if set(arrays) != set(self.params):
            raise ValueError("parameter names do not match the model")
        for name, arr in arrays.items():
            if arr.shape != self.params[name].shape:
                raise ValueError(f"{name}: shape {arr.shape} != {self.params[name].shape}")
            self.params[name].data[...] = arr

    # branches ---------------------------------------------------------------
    def _entity(self, branch: str) -> Tensor:
        return self.params["item_emb" if branch == "item" else "word_emb"]

    def assignment(self, branch: str) -> PrototypeAssignment:
        if branch == "word" and not self.cfg.word_branch:
            raise ValueError("word branch disabled")
        return prototype_assign(self._entity(branch), self.params["proto"], self.cfg.tau)

    def encode(self, branch: str, rows: np.ndarray, assign: PrototypeAssignment | None = None):
        assign = assign or self.assignment(branch)
        graph = self.graph if branch == "item" else None
        return encode(rows, assign, graph, self.params[f"enc_{branch}_w"],
                      self.params[f"enc_{branch}_b"], self.cfg)

    def branch_forward(self, branch: str, rows: np.ndarray, eps: np.ndarray | None):
        """Encode, sample and decode one branch; returns (latent, log_pi, assignment)."""
        assign = self.assignment(branch)
        mu, sigma = self.encode(branch, rows, assign)
        z = reparameterize(mu, sigma, eps)
        log_pi = decode(z, assign, self._entity(branch), self.cfg.tau)
        return DisentangledLatent(mu, sigma, z), log_pi, assign

    # serving ---------------------------------------------------------------
    def item_log_probs(self, rows: np.ndarray) -> np.ndarray:
        """Decoder log-probabilities at z = mu for interaction rows (B, N)."""
        _, log_pi, _ = self.branch_forward("item", rows, None)
        return log_pi.data

    def item_assignment(self) -> np.ndarray:
        return self.assignment("item").probs.data

    def word_assignment(self) -> np.ndarray:
        return self.assignment("word").probs.data
