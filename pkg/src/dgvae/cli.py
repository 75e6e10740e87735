"""Command-line entry point: prepare, graph, train, eval, explain, synth, gradcheck."""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import scipy

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import __version__
from . import evaluator as ev
from . import ingestion as ing
from . import interpret
from .fixtures import full_loss_gradcheck
from .item_graph import load_graph, save_graph, build_item_graph
from .model import ModelConfig
from .pipeline import prepare
from .synth import SynthConfig, generate, write_dataset
from .trainer import TrainConfig, TrainData, Trainer, load_model

log = logging.getLogger("dgvae")


class ConfigError(Exception):
    """Invalid or unknown configuration (exit code 2)."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class DataConfig:
    core: int = 5
    top_v: int = 5
    min_df: int = 2
    max_df_ratio: float = 0.5
    ratios: list = field(default_factory=lambda: [0.8, 0.1, 0.1])
    split_seed: int = 0
    cold_start: int = -1          # -1 random split, 0 zero-shot, 2 cold-start
    cold_fraction: float = 0.2

    def validate(self):
        if self.core < 1 or self.top_v < 0 or self.min_df < 1:
            raise ValueError("core, top_v and min_df must be positive")
        if not 0 < self.max_df_ratio <= 1:
            raise ValueError("max_df_ratio must lie in (0, 1]")
        if self.cold_start not in (-1, 0, 2):
            raise ValueError("cold_start must be -1 (off), 0 or 2")
        return self


@dataclass
class GraphConfig:
    k: int = 10
    alpha_v: float = 0.1

    def validate(self):
        if self.k < 1:
            raise ValueError("graph k must be >= 1")
        if not 0 <= self.alpha_v <= 1:
            raise ValueError("alpha_v must lie in [0, 1]")
        return self


SECTIONS = {"data": DataConfig, "graph": GraphConfig, "model": ModelConfig, "train": TrainConfig}


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    graph: GraphConfig = field(default_factory=GraphConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        d = {name: asdict(getattr(self, name)) for name in SECTIONS}
        d["train"].pop("checkpoint", None)  # output path, not an experiment setting
        return d

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def _coerce(section: str, key: str, value):
    cls = SECTIONS[section]
    names = {f.name: f for f in fields(cls)}
    if key not in names:
        raise ConfigError(f"unknown key {section}.{key}")
    default = getattr(cls(), key)
    if isinstance(default, bool):
        if isinstance(value, str):
            if value.lower() not in ("true", "false", "1", "0"):
                raise ConfigError(f"{section}.{key}: expected a boolean, got {value!r}")
            return value.lower() in ("true", "1")
        return bool(value)
    try:
        if isinstance(default, int) and not isinstance(default, bool):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, list):
            if isinstance(value, str):
                value = [float(x) for x in value.split(",")]
            return list(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{section}.{key}: cannot interpret {value!r}") from None
    return value


def load_config(path: str | None, overrides: dict[str, object]) -> RunConfig:
    """TOML sections [data], [graph], [model], [train]; overrides win."""
    raw: dict[str, dict] = {}
    if path:
        try:
            raw = tomllib.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    values: dict[str, dict] = {s: {} for s in SECTIONS}
    for section, body in raw.items():
        if section not in SECTIONS or not isinstance(body, dict):
            raise ConfigError(f"unknown config section [{section}]")
        for key, value in body.items():
            values[section][key] = _coerce(section, key, value)
    for dotted, value in overrides.items():
        if value is None:
            continue
        section, _, key = dotted.partition(".")
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section in {dotted!r}")
        values[section][key] = _coerce(section, key, value)
    try:
        cfg = RunConfig(**{s: SECTIONS[s](**values[s]) for s in SECTIONS})
        for s in SECTIONS:
            getattr(cfg, s).validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def _parse_sets(items: list[str]) -> dict[str, str]:
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep or "." not in key:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


# ---------------------------------------------------------------------------
# manifests and file helpers
# ---------------------------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir: Path, command: str, cfg: dict, seed, inputs: dict, outputs: dict,
                   started: float) -> Path:
    manifest = {
        "command": command,
        "config": cfg,
        "config_hash": hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest(),
        "seed": seed,
        "versions": {
            "dgvae": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
        "inputs": {k: sha256_file(v) for k, v in sorted(inputs.items())},
        "outputs": {k: sha256_file(v) for k, v in sorted(outputs.items())},
        # the only nondeterministic fields
        "timing": {"started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
                   "seconds": round(time.time() - started, 3)},
    }
    path = out_dir / f"manifest_{command}.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _require(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"missing input file: {p}")
    return p


@dataclass
class PreparedDir:
    root: Path
    split: ing.DatasetSplit
    words: ing.UserWordMatrix
    docs: list[list[str]]

    @property
    def graph_path(self) -> Path:
        return self.root / "graph.bin"


def load_prepared(root) -> PreparedDir:
    root = Path(root)
    ids = json.loads(_require(root / "ids.json").read_text(encoding="utf-8"))
    split = ing.load_split(_require(root / "split.tsv"), ids["user_ids"], ids["item_ids"], ids["protocol"])
    split.cold_items = ids.get("cold_items", {})
    _require(root / "words.tsv")
    words = ing.load_user_word_matrix(root / "words")
    docs = []
    with open(_require(root / "docs.jsonl"), encoding="utf-8") as fh:
        for line in fh:
            docs.append(json.loads(line)["tokens"])
    return PreparedDir(root, split, words, docs)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_prepare(args, cfg: RunConfig) -> int:
    started = time.time()
    out = Path(args.out)
    inputs = {"interactions": _require(args.interactions), "tokens": _require(args.tokens)}
    embeddings = {}
    for modality in ("visual", "textual"):
        path = getattr(args, modality)
        if path:
            inputs[modality] = _require(path)
            embeddings[modality] = ing.load_embeddings(path, modality).matrix
    if not embeddings:
        raise ConfigError("at least one of --visual/--textual is required")
    raw = ing.load_interactions(inputs["interactions"])
    tokens = ing.load_tokens(inputs["tokens"])
    for m, x in embeddings.items():
        if x.shape[0] != len(tokens.item_ids):
            raise ValueError(f"{m} embeddings have {x.shape[0]} rows, token catalog has {len(tokens.item_ids)}")
    d = cfg.data
    data = prepare(raw, tokens, embeddings, seed=d.split_seed, core=d.core, top_v=d.top_v,
                   min_df=d.min_df, max_df_ratio=d.max_df_ratio, ratios=tuple(d.ratios),
                   cold_start=None if d.cold_start < 0 else d.cold_start, cold_fraction=d.cold_fraction)
    out.mkdir(parents=True, exist_ok=True)
    outputs = {"split": out / "split.tsv", "ids": out / "ids.json", "words_vocab": out / "words.vocab",
               "words": out / "words.tsv", "docs": out / "docs.jsonl", "stats": out / "stats.json"}
    ing.save_split(outputs["split"], data.split)
    outputs["ids"].write_text(json.dumps({
        "user_ids": data.split.user_ids, "item_ids": data.split.item_ids,
        "protocol": data.split.protocol, "cold_items": data.split.cold_items}) + "\n", encoding="utf-8")
    ing.save_user_word_matrix(out / "words", data.words)
    with open(outputs["docs"], "w", encoding="utf-8") as fh:
        for iid, doc in zip(data.split.item_ids, data.docs):
            fh.write(json.dumps({"item_id": iid, "tokens": doc}) + "\n")
    for m, x in data.embeddings.items():
        outputs[f"emb_{m}"] = out / f"emb_{m}.txt"
        ing.save_embeddings(outputs[f"emb_{m}"], x)
    outputs["stats"].write_text(json.dumps(data.stats, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    write_manifest(out, "prepare", {"data": asdict(d)}, d.split_seed, inputs, outputs, started)
    s = data.stats
    print(f"{'dataset':<10}{'#users':>9}{'#items':>9}{'#inter':>10}{'sparsity':>10}")
    print(f"{out.name:<10}{s['users']:>9}{s['items']:>9}{s['interactions']:>10}{s['sparsity_pct']:>10}")
    return 0


def cmd_graph(args, cfg: RunConfig) -> int:
    started = time.time()
    root = Path(args.data)
    inputs, emb = {}, {}
    for m in ("visual", "textual"):
        p = root / f"emb_{m}.txt"
        if p.exists():
            inputs[m] = p
            emb[m] = ing.load_embeddings(p, m).matrix
    if not emb:
        raise FileNotFoundError(f"no emb_visual.txt/emb_textual.txt under {root}")
    g = build_item_graph(emb, k=cfg.graph.k, alpha_v=cfg.graph.alpha_v)
    out = Path(args.out) if args.out else root / "graph.bin"
    save_graph(out, g)
    write_manifest(out.parent, "graph", {"graph": asdict(cfg.graph)}, None, inputs, {"graph": out}, started)
    print(f"graph: {g.n_items} items, {g.matrix.nnz} edges, weights {dict(zip(g.modalities, g.weights))}")
    return 0


def _graph_matrix(prep: PreparedDir):
    if not prep.graph_path.exists():
        raise FileNotFoundError(f"missing item graph {prep.graph_path} (run `dgvae graph` first)")
    g = load_graph(prep.graph_path)
    if g.n_items != prep.split.n_items:
        raise ValueError(f"graph has {g.n_items} items, split has {prep.split.n_items}")
    return g.matrix


def cmd_train(args, cfg: RunConfig) -> int:
    started = time.time()
    prep = load_prepared(args.data)
    graph = _graph_matrix(prep)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoint.bin"
    log_path = out / "train_log.jsonl"
    tcfg = replace(cfg.train, checkpoint=str(ckpt))
    words = prep.words.matrix if cfg.model.word_branch else None
    data = TrainData.from_split(prep.split, words)
    if args.resume:
        trainer = Trainer.resume(_require(args.resume), cfg.model, tcfg, data, graph)
    else:
        log_path.write_text("", encoding="utf-8")
        trainer = Trainer(cfg.model, tcfg, data, graph)
    history = trainer.fit(log_path)
    summary = {"best_epoch": history.best_epoch, "best_val_recall": history.best_score,
               "epochs_run": len(history.records), "stopped_early": history.stopped_early}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    inputs = {"split": prep.root / "split.tsv", "words": prep.root / "words.tsv", "graph": prep.graph_path}
    outputs = {"checkpoint": ckpt, "train_log": log_path, "summary": out / "summary.json"}
    write_manifest(out, "train", cfg.to_dict(), cfg.train.seed, inputs, outputs, started)
    print(f"best epoch {history.best_epoch}: val R@{cfg.train.monitor_k} = {history.best_score:.4f}")
    return 0


def _parse_ks(text: str) -> tuple[int, ...]:
    try:
        ks = tuple(int(x) for x in text.split(","))
    except ValueError:
        raise ConfigError(f"--k expects comma-separated integers, got {text!r}") from None
    if not ks or min(ks) < 1:
        raise ConfigError("--k values must be >= 1")
    return ks


def cmd_eval(args, cfg: RunConfig) -> int:
    started = time.time()
    ks = _parse_ks(args.k)
    prep = load_prepared(args.data)
    graph = _graph_matrix(prep)
    ckpt = _require(Path(args.run) / "checkpoint.bin")
    model = load_model(ckpt, graph)
    train = prep.split.matrix("train")
    report, _, _ = ev.evaluate(ev.model_score_fn(model, train), prep.split, args.part, ks)
    result = report.to_dict()
    if args.baseline == "popularity":
        base, _, _ = ev.evaluate(ev.popularity_score_fn(train), prep.split, args.part, ks)
        result["baseline"] = {"name": "popularity", "metrics": base.metrics}
        result["improvement_pct"] = {
            k: ev.improvement_report(v, base.metrics[k]) for k, v in report.metrics.items() if base.metrics[k] > 0
        }
    out = Path(args.out) if args.out else Path(args.run) / f"eval_{args.part}.json"
    out.write_text(json.dumps(result, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    write_manifest(out.parent, "eval", {"ks": list(ks), "part": args.part, "baseline": args.baseline}, None,
                   {"checkpoint": ckpt, "split": prep.root / "split.tsv"}, {"report": out}, started)
    for name, value in report.metrics.items():
        print(f"{name:<10}{value:.4f}")
    return 0


def cmd_explain(args, cfg: RunConfig) -> int:
    started = time.time()
    prep = load_prepared(args.data)
    graph = _graph_matrix(prep)
    ckpt = _require(Path(args.run) / "checkpoint.bin")
    model = load_model(ckpt, graph)
    uidx = {u: k for k, u in enumerate(prep.split.user_ids)}
    iidx = {i: k for k, i in enumerate(prep.split.item_ids)}
    if args.user not in uidx:
        raise ValueError(f"unknown user {args.user!r}")
    u = uidx[args.user]
    train_items = prep.split.user_items("train")[u]
    if args.item is None:
        scores = model.item_log_probs(prep.split.matrix("train").select_rows([u]))[0]
        item = int(ev.top_k(scores, train_items, 1)[0])
    elif args.item in iidx:
        item = iidx[args.item]
    else:
        raise ValueError(f"unknown item {args.item!r}")
    word_row = prep.words.matrix.select_rows([u])[0]
    exp = interpret.explain(model, u, item, train_items, word_row, prep.words.vocab,
                            prep.docs[item], args.n_words)
    report = interpret.prototype_word_report(model, u, word_row, args.n_words, prep.words.vocab)
    result = exp.to_dict() | {"user_id": args.user, "item_id": prep.split.item_ids[item],
                              "top_words": report.to_dict()["prototypes"]}
    out = Path(args.out) if args.out else Path(args.run) / f"explain_{args.user}.json"
    out.write_text(json.dumps(result, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    table = out.with_suffix(".words.tsv")
    table.write_text(interpret.frequency_table(report), encoding="utf-8")
    write_manifest(out.parent, "explain", {"user": args.user, "item": result["item_id"], "n_words": args.n_words},
                   None, {"checkpoint": ckpt}, {"explanation": out, "word_table": table}, started)
    print(json.dumps(result, indent=2, sort_keys=True))
    return 0


def cmd_synth(args, cfg: RunConfig) -> int:
    started = time.time()
    scfg = SynthConfig(n_users=args.users, n_items=args.items, n_words=args.words,
                       n_prototypes=args.prototypes, interactions_per_user=args.per_user,
                       tokens_per_item=args.tokens, noise=args.noise, seed=args.seed, emb_dim=args.dim)
    try:
        scfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    paths = write_dataset(generate(scfg), args.out)
    write_manifest(Path(args.out), "synth", asdict(scfg), scfg.seed, {}, paths, started)
    print(f"wrote synthetic dataset to {args.out}")
    return 0


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    if args.fixture != "tiny":
        raise ConfigError(f"unknown fixture {args.fixture!r}")
    t0 = time.perf_counter()
    report = full_loss_gradcheck(seed=args.seed, h=args.h, tol=args.tol)
    print(report.table())
    status = "PASS" if report.passed else "FAIL"
    print(f"{status}: max relative error {report.max_rel_err:.3e} (tol {args.tol:g}) in {time.perf_counter() - t0:.1f}s")
    return 0 if report.passed else 1


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

# flag dest -> config key
FLAG_KEYS = {
    "seed": "train.seed", "lr": "train.lr", "batch_size": "train.batch_size",
    "epochs": "train.max_epochs", "patience": "train.patience", "mi_weight": "train.mi_weight",
    "kl_weight": "train.kl_weight", "prototypes": "model.n_prototypes", "dim": "model.latent_dim",
    "layers": "model.gcn_layers", "tau": "model.tau", "sigma0": "model.sigma0",
    "graph_k": "graph.k", "alpha_v": "graph.alpha_v", "split_seed": "data.split_seed",
    "top_v": "data.top_v", "min_df": "data.min_df",
}


def _add_config_flags(p: argparse.ArgumentParser, groups: tuple[str, ...]) -> None:
    p.add_argument("--config", help="TOML file with [data], [graph], [model], [train] sections")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override a config key (repeatable)")
    g = p.add_argument_group("overrides")
    if "data" in groups:
        g.add_argument("--split-seed", type=int)
        g.add_argument("--top-v", type=int)
        g.add_argument("--min-df", type=int)
        g.add_argument("--cold-start", metavar="keep=N", help="item cold-start split keeping N (0 or 2) ratings")
    if "graph" in groups:
        g.add_argument("--graph-k", type=int)
        g.add_argument("--alpha-v", type=float)
    if "model" in groups:
        g.add_argument("--prototypes", type=int)
        g.add_argument("--dim", type=int)
        g.add_argument("--layers", type=int)
        g.add_argument("--tau", type=float)
        g.add_argument("--sigma0", type=float)
    if "train" in groups:
        g.add_argument("--seed", type=int)
        g.add_argument("--lr", type=float)
        g.add_argument("--batch-size", type=int)
        g.add_argument("--epochs", type=int)
        g.add_argument("--patience", type=int)
        g.add_argument("--mi-weight", type=float, help="lambda")
        g.add_argument("--kl-weight", type=float, help="beta")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dgvae", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="5-core filter, split, TF-IDF word matrix, stats")
    p.add_argument("--interactions", required=True)
    p.add_argument("--tokens", required=True)
    p.add_argument("--visual")
    p.add_argument("--textual")
    p.add_argument("--out", required=True)
    _add_config_flags(p, ("data",))
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("graph", help="build the fused item-item kNN graph")
    p.add_argument("--data", required=True, help="directory written by prepare")
    p.add_argument("--out", help="graph file (default DATA/graph.bin)")
    _add_config_flags(p, ("graph",))
    p.set_defaults(func=cmd_graph)

    p = sub.add_parser("train", help="train with early stopping on validation R@20")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    _add_config_flags(p, ("model", "train"))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="Recall/NDCG on a held-out part")
    p.add_argument("--data", required=True)
    p.add_argument("--run", required=True, help="training output directory")
    p.add_argument("--k", default="10,20")
    p.add_argument("--part", choices=("val", "test"), default="test")
    p.add_argument("--baseline", choices=("none", "popularity"), default="popularity")
    p.add_argument("--out")
    _add_config_flags(p, ())
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("explain", help="prototype weights and word overlap for a recommendation")
    p.add_argument("--data", required=True)
    p.add_argument("--run", required=True)
    p.add_argument("--user", required=True)
    p.add_argument("--item", help="item id (default: the user's top recommendation)")
    p.add_argument("--n-words", type=int, default=10)
    p.add_argument("--out")
    _add_config_flags(p, ())
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("synth", help="generate a planted-prototype dataset")
    p.add_argument("--out", required=True)
    d = SynthConfig()
    p.add_argument("--users", type=int, default=d.n_users)
    p.add_argument("--items", type=int, default=d.n_items)
    p.add_argument("--words", type=int, default=d.n_words)
    p.add_argument("--prototypes", type=int, default=d.n_prototypes)
    p.add_argument("--per-user", type=int, default=d.interactions_per_user)
    p.add_argument("--tokens", type=int, default=d.tokens_per_item)
    p.add_argument("--noise", type=float, default=d.noise)
    p.add_argument("--seed", type=int, default=d.seed)
    p.add_argument("--dim", type=int, default=d.emb_dim)
    p.set_defaults(func=cmd_synth, config=None, set=[])

    p = sub.add_parser("gradcheck", help="finite-difference check of the full loss")
    p.add_argument("--fixture", default="tiny")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck, config=None, set=[])
    return parser


def _overrides(args) -> dict[str, object]:
    out: dict[str, object] = dict(_parse_sets(getattr(args, "set", [])))
    if args.command in ("synth", "gradcheck"):
        return out
    for dest, key in FLAG_KEYS.items():
        value = getattr(args, dest, None)
        if value is not None:
            out[key] = value
    cold = getattr(args, "cold_start", None)
    if cold is not None:
        key, sep, value = cold.partition("=")
        if key.strip() != "keep" or not sep:
            raise ConfigError(f"--cold-start expects keep=N, got {cold!r}")
        out["data.cold_start"] = value.strip()
    return out


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, _overrides(args))
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"dgvae: config error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError, RuntimeError, FloatingPointError) as exc:
        print(f"dgvae: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
