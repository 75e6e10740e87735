"""Objective assembly, seeded training loop, early stopping, checkpoints."""
from __future__ import annotations

import json
import logging
import struct
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import evaluator
from .mi_align import align, mi_loss
from .model import DGVAE, ModelConfig, kl_term, reconstruction_loglik
from .numerics import AdamState, SparseMatrix, adam_step, backward
from .numerics import tensor as T

log = logging.getLogger(__name__)

CKPT_MAGIC = b"DGVCKPT\0"
CKPT_VERSION = 1


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 256
    max_epochs: int = 500
    patience: int = 20
    mi_weight: float = 0.1          # lambda
    kl_weight: float = 0.1          # beta
    item_weight: float = 1.0
    word_weight: float = 1.0
    seed: int = 0
    eval_every: int = 1
    monitor_k: int = 20
    checkpoint: str | None = None

    def validate(self) -> "TrainConfig":
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.mi_weight < 0 or self.kl_weight < 0:
            raise ValueError("mi_weight and kl_weight must be >= 0")
        if self.lr <= 0 or self.batch_size < 1 or self.max_epochs < 0 or self.eval_every < 1:
            raise ValueError("invalid optimisation settings")
        return self


@dataclass
class TrainData:
    """Everything the loop needs, indexed by contiguous user/item/word ids."""

    train: SparseMatrix             # M x N binary
    words: SparseMatrix | None      # M x W tf-idf
    val_items: list[np.ndarray]
    train_items: list[np.ndarray]

    @classmethod
    def from_split(cls, split, words: SparseMatrix | None) -> "TrainData":
        return cls(split.matrix("train"), words, split.user_items("val"), split.user_items("train"))

    @property
    def active_users(self) -> np.ndarray:
        return np.flatnonzero(np.diff(self.train.indptr) > 0)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    lb_item: float
    lb_word: float
    mi: float
    val_recall: float | None
    wall_time: float = 0.0

    def log_dict(self, k: int = 20) -> dict:
        # wall time is kept out of the loss log so reruns are byte-identical
        return {"epoch": self.epoch, "loss": self.loss, "lb_item": self.lb_item,
                "lb_word": self.lb_word, "mi": self.mi, f"val_recall@{k}": self.val_recall}


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    best_score: float = -np.inf
    stopped_early: bool = False

    def to_jsonl(self, k: int = 20) -> str:
        return "".join(json.dumps(r.log_dict(k)) + "\n" for r in self.records)


# ---------------------------------------------------------------------------
# objective
# ---------------------------------------------------------------------------

def loss_terms(model: DGVAE, item_rows, word_rows, eps_item, eps_word, cfg: TrainConfig) -> dict:
    """Negative ELBO per branch (batch means) plus the MI term.

    ``eps_*`` are (K, B, d) standard-normal draws, or None for z = mu.
    """
    beta = cfg.kl_weight
    lat_i, log_pi_i, _ = model.branch_forward("item", item_rows, eps_item)
    nll_i = T.mean(reconstruction_loglik(log_pi_i, item_rows) * -1.0
                   + kl_term(lat_i.mu, lat_i.sigma, model.cfg.sigma0) * beta)
    terms = {"lb_item": nll_i}
    total = nll_i * cfg.item_weight
    if model.cfg.word_branch and word_rows is not None:
        lat_w, log_pi_w, _ = model.branch_forward("word", word_rows, eps_word)
        nll_w = T.mean(reconstruction_loglik(log_pi_w, word_rows) * -1.0
                       + kl_term(lat_w.mu, lat_w.sigma, model.cfg.sigma0) * beta)
        terms["lb_word"] = nll_w
        total = total + nll_w * cfg.word_weight
        if cfg.mi_weight > 0:
            zr = T.swapaxes(lat_i.z, 0, 1)  # (B, K, d)
            zw = T.swapaxes(lat_w.z, 0, 1)
            fused_r, fused_w = align(zr, zw)
            mi = mi_loss(fused_r, fused_w)
            terms["mi"] = mi
            total = total + mi * cfg.mi_weight
    terms["total"] = total
    return terms


def draw_eps(rng: np.random.Generator, cfg: ModelConfig, batch: int) -> np.ndarray:
    return rng.standard_normal((cfg.n_prototypes, batch, cfg.latent_dim))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _pack_arrays(arrays: list[tuple[str, np.ndarray]]):
    table, chunks, offset = [], [], 0
    for name, arr in arrays:
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        table.append([name, list(arr.shape), offset])
        chunks.append(raw)
        offset += len(raw)
    return table, b"".join(chunks)


def save_checkpoint(path, model: DGVAE, opt: AdamState, rng: np.random.Generator,
                    epoch: int, tcfg: TrainConfig, history: TrainLog, best_params: dict,
                    bad_epochs: int = 0) -> None:
    names = model.parameter_names()
    arrays = [(f"param/{n}", model.params[n].data) for n in names]
    arrays += [(f"adam_m/{n}", m) for n, m in zip(names, opt.m)]
    arrays += [(f"adam_v/{n}", v) for n, v in zip(names, opt.v)]
    arrays += [(f"best/{n}", best_params[n]) for n in names]
    table, body = _pack_arrays(arrays)
    header = {
        "model": model.cfg.to_dict(),
        "train": {k: v for k, v in asdict(tcfg).items() if k != "checkpoint"},
        "n_items": model.n_items,
        "n_words": model.n_words,
        "epoch": epoch,
        "bad_epochs": bad_epochs,
        "adam": {"lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps, "step": opt.step},
        "rng": rng.bit_generator.state,
        "history": {
            "records": [asdict(r) | {"wall_time": 0.0} for r in history.records],
            "best_epoch": history.best_epoch,
            "best_score": history.best_score if np.isfinite(history.best_score) else None,
        },
        "tensors": table,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<IQ", CKPT_VERSION, len(head)))
        fh.write(head)
        fh.write(body)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    blob = Path(path).read_bytes()
    if blob[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<IQ", blob, 8)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    start = 8 + struct.calcsize("<IQ")
    header = json.loads(blob[start : start + hlen].decode("utf-8"))
    base = start + hlen
    arrays = {}
    for name, shape, offset in header["tensors"]:
        count = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=base + offset).reshape(shape).copy()
    return header, arrays


def load_model(path, graph: SparseMatrix | None, which: str = "best") -> DGVAE:
    """Rebuild a model from a checkpoint using its ``best`` (or ``param``) tensors."""
    header, arrays = read_checkpoint(path)
    cfg = ModelConfig(**header["model"])
    model = DGVAE(cfg, header["n_items"], header["n_words"], graph, seed=0)
    model.load_arrays({n: arrays[f"{which}/{n}"] for n in model.parameter_names()})
    return model


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------

class Trainer:
    def __init__(self, model_cfg: ModelConfig, train_cfg: TrainConfig, data: TrainData,
                 graph: SparseMatrix | None):
        self.mcfg = model_cfg.validate()
        self.tcfg = train_cfg.validate()
        self.data = data
        n_words = data.words.cols if (data.words is not None and model_cfg.word_branch) else 0
        if model_cfg.word_branch and data.words is None:
            raise ValueError("word branch enabled but no user-word matrix given")
        self.rng = np.random.default_rng(train_cfg.seed)
        self.model = DGVAE(model_cfg, data.train.cols, n_words, graph, rng=self.rng)
        self.opt = AdamState.for_params([p.data for p in self.model.parameter_list()], lr=train_cfg.lr)
        self.epoch = 0
        self.history = TrainLog()
        self.best_params = self.model.state_arrays()
        self.bad_epochs = 0

    # one optimisation step ------------------------------------------------
    def step(self, users: np.ndarray) -> dict[str, float]:
        item_rows = self.data.train.select_rows(users)
        word_rows = self.data.words.select_rows(users) if self.model.cfg.word_branch else None
        eps_i = draw_eps(self.rng, self.mcfg, len(users))
        eps_w = draw_eps(self.rng, self.mcfg, len(users)) if word_rows is not None else None
        params = self.model.parameter_list()
        for p in params:
            p.zero_grad()
        try:
            terms = loss_terms(self.model, item_rows, word_rows, eps_i, eps_w, self.tcfg)
        except FloatingPointError as exc:
            self._dump_diagnostics(users, str(exc))
            raise RuntimeError(f"non-finite loss at epoch {self.epoch}: {exc}") from exc
        backward(terms["total"])
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
        if not all(np.all(np.isfinite(g)) for g in grads):
            self._dump_diagnostics(users, "non-finite gradient")
            raise RuntimeError(f"non-finite gradient at epoch {self.epoch}")
        adam_step([p.data for p in params], grads, self.opt)
        return {k: float(v.data) for k, v in terms.items()}

    def _dump_diagnostics(self, users, reason: str) -> None:
        info = {
            "reason": reason,
            "epoch": self.epoch,
            "users": [int(u) for u in users],
            "param_norms": {n: float(np.linalg.norm(p.data)) for n, p in self.model.params.items()},
        }
        log.error("training aborted: %s", json.dumps(info))
        if self.tcfg.checkpoint:
            Path(self.tcfg.checkpoint).with_suffix(".diagnostics.json").write_text(json.dumps(info, indent=2))

    def run_epoch(self) -> EpochRecord:
        users = self.data.active_users
        perm = users[self.rng.permutation(len(users))]
        sums = {"total": 0.0, "lb_item": 0.0, "lb_word": 0.0, "mi": 0.0}
        count = 0
        for lo in range(0, len(perm), self.tcfg.batch_size):
            batch = perm[lo : lo + self.tcfg.batch_size]
            out = self.step(batch)
            for key in sums:
                sums[key] += out.get(key, 0.0) * len(batch)
            count += len(batch)
        return EpochRecord(self.epoch, sums["total"] / count, sums["lb_item"] / count,
                           sums["lb_word"] / count, sums["mi"] / count, None)

    def validation_recall(self) -> float:
        users = np.array([u for u, v in enumerate(self.data.val_items) if len(v)], dtype=np.int64)
        if len(users) == 0:
            raise ValueError("validation set is empty")
        k = self.tcfg.monitor_k
        rankings = evaluator.rank_users(
            evaluator.model_score_fn(self.model, self.data.train), users, self.data.train_items, k
        )
        return evaluator.recall_at_k(rankings, [self.data.val_items[u] for u in users], k)

    def fit(self, log_path=None) -> TrainLog:
        """Train until ``max_epochs`` or ``patience`` epochs without a better
        validation recall; the best parameters are kept in ``best_params``."""
        if not any(len(v) for v in self.data.val_items):
            raise ValueError("validation set is empty")
        while self.epoch < self.tcfg.max_epochs:
            t0 = time.perf_counter()
            rec = self.run_epoch()
            if (self.epoch + 1) % self.tcfg.eval_every == 0 or self.epoch + 1 == self.tcfg.max_epochs:
                rec.val_recall = self.validation_recall()
                if rec.val_recall > self.history.best_score:
                    self.history.best_score = rec.val_recall
                    self.history.best_epoch = self.epoch
                    self.best_params = self.model.state_arrays()
                    self.bad_epochs = 0
                else:
                    self.bad_epochs += self.tcfg.eval_every
            rec.wall_time = time.perf_counter() - t0
            self.history.records.append(rec)
            log.info("epoch %d loss %.5f val R@%d %s", rec.epoch, rec.loss, self.tcfg.monitor_k,
                     "-" if rec.val_recall is None else f"{rec.val_recall:.4f}")
            self.epoch += 1
            if log_path is not None:
                with open(log_path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(rec.log_dict(self.tcfg.monitor_k)) + "\n")
            if self.tcfg.checkpoint:
                self.save(self.tcfg.checkpoint)
            if self.bad_epochs >= self.tcfg.patience:
                self.history.stopped_early = True
                break
        return self.history

    def best_model(self) -> DGVAE:
        model = DGVAE(self.mcfg, self.model.n_items, self.model.n_words, self.model.graph, seed=0)
        model.load_arrays(self.best_params)
        return model

    # persistence -----------------------------------------------------------
    def save(self, path) -> None:
        save_checkpoint(path, self.model, self.opt, self.rng, self.epoch, self.tcfg,
                        self.history, self.best_params, self.bad_epochs)

    @classmethod
    def resume(cls, path, model_cfg: ModelConfig, train_cfg: TrainConfig, data: TrainData,
               graph: SparseMatrix | None) -> "Trainer":
        header, arrays = read_checkpoint(path)
        saved = ModelConfig(**header["model"])
        if saved != model_cfg:
            raise ValueError(f"checkpoint model config {saved} differs from requested {model_cfg}")
        tr = cls(model_cfg, train_cfg, data, graph)
        if header["n_items"] != tr.model.n_items or header["n_words"] != tr.model.n_words:
            raise ValueError("checkpoint was trained on differently sized data")
        names = tr.model.parameter_names()
        tr.model.load_arrays({n: arrays[f"param/{n}"] for n in names})
        tr.best_params = {n: arrays[f"best/{n}"] for n in names}
        tr.opt.m = [arrays[f"adam_m/{n}"] for n in names]
        tr.opt.v = [arrays[f"adam_v/{n}"] for n in names]
        tr.opt.step = header["adam"]["step"]
        tr.rng.bit_generator.state = header["rng"]
        tr.epoch = header["epoch"]
        hist = header["history"]
        keys = {f.name for f in fields(EpochRecord)}
        tr.history = TrainLog(
            [EpochRecord(**{k: v for k, v in r.items() if k in keys}) for r in hist["records"]],
            hist["best_epoch"],
            -np.inf if hist["best_score"] is None else hist["best_score"],
        )
        tr.bad_epochs = header["bad_epochs"]
        return tr
