"""Grid over prototype count K and MI weight lambda on synthetic data.

Usage: python scripts/grid.py [--k 3 4 5] [--mi 0.1 0.2 0.3 0.4 0.5] [--seeds 0 1] [--out results/grid.json]
"""
import argparse
import json
from dataclasses import replace
from pathlib import Path

from dgvae.experiments import acceptance_model_config, acceptance_train_config, run_synthetic


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--k", type=int, nargs="+", default=[3, 4, 5])
    ap.add_argument("--mi", type=float, nargs="+", default=[0.1, 0.2, 0.3, 0.4, 0.5])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1])
    ap.add_argument("--out", default="results/grid.json")
    args = ap.parse_args()
    rows = []
    for k in args.k:
        for mi in args.mi:
            for seed in args.seeds:
                mcfg = replace(acceptance_model_config(), n_prototypes=k)
                tcfg = replace(acceptance_train_config(seed), mi_weight=mi)
                r = run_synthetic(seed, model_cfg=mcfg, train_cfg=tcfg)
                row = {"k": k, "mi_weight": mi, "seed": seed, "recall20": r.recall20,
                       "popularity_recall20": r.popularity_recall20,
                       "purity": r.purity, "best_epoch": r.best_epoch}
                rows.append(row)
                print(json.dumps(row), flush=True)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(rows, indent=2) + "\n")
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
