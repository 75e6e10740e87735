"""Cross-branch fusion with compositional de-attention and the JSD MI loss.

All tensors here are batched per user: latents are (B, K, d), attentive
score matrices (B, K, K).
"""
from __future__ import annotations

import math

import numpy as np

from .numerics import Tensor
from .numerics import tensor as T


def coda_scores(q, k) -> Tensor:
    """A[b, i, j] = tanh(q_i . k_j / sqrt(d)) * sigmoid(-|q_i - k_j|_1 / sqrt(d))."""
    q, k = T.as_tensor(q), T.as_tensor(k)
    if q.shape[-1] != k.shape[-1]:
        raise ValueError("query and key dimensions differ")
    d = q.shape[-1]
    scale = 1.0 / math.sqrt(d)
    affinity = T.tanh(T.matmul(q, T.swapaxes(k, -1, -2)) * scale)
    qe = T.reshape(q, q.shape[:-2] + (q.shape[-2], 1, d))
    ke = T.reshape(k, k.shape[:-2] + (1, k.shape[-2], d))
    l1 = T.tsum(T.absolute(qe - ke), axis=-1)
    return affinity * T.sigmoid(l1 * -scale)


def fuse(scores, z) -> Tensor:
    """Attention-weighted mixture over prototypes: out_k = sum_j A[k, j] z_j."""
    return T.matmul(scores, z)


def align(zr, zw) -> tuple[Tensor, Tensor]:
    """Fuse each branch with the other as query.

    Rating latents are aggregated with the word latents as queries and vice
    versa; returns (Z^{r|w}, Z^{w|r}).
    """
    a_rw = coda_scores(zw, zr)
    a_wr = coda_scores(zr, zw)
    return fuse(a_rw, zr), fuse(a_wr, zw)


def mi_loss(zr, zw) -> Tensor:
    """Jensen-Shannon MI objective over prototype pairs.

    sum_k [ E_u sp(-<zr_k, zw_k>) + sum_{j != k} E_u sp(<zr_k, zw_j>) ],
    expectations taken as means over the batch.
    """
    zr, zw = T.as_tensor(zr), T.as_tensor(zw)
    if zr.shape != zw.shape:
        raise ValueError("branch latents must share shape (B, K, d)")
    k = zr.shape[-2]
    sign = np.ones((k, k)) - 2.0 * np.eye(k)  # -1 on the diagonal (positive pairs)
    scores = T.matmul(zr, T.swapaxes(zw, -1, -2))  # (B, K, K): <zr_k, zw_j>
    return T.tsum(T.mean(T.softplus(scores * sign), axis=0))
