#!/usr/bin/env python3
"""Ablation harness: collaboration weight and sampling strategy on one city.

Runs the full pipeline for gamma = 0 (isolated local training), gamma = 0.5
with performance-triggered sampling, similarity-based sampling, and the
no-sampling condition, then prints a comparison table of HR@10 / NDCG@10 and
bytes exchanged.
"""

import argparse
import json
from pathlib import Path

from macsim.config import ExperimentConfig, load_config
from macsim.experiment import run_experiment


def run_variant(cfg: ExperimentConfig, out_dir: Path, gamma: float, sampling: str):
    cfg.gamma = gamma
    cfg.sampling = sampling
    cfg.validate()
    report = run_experiment(cfg, out_dir)
    res = report.payload["results"]
    return {
        "gamma": gamma,
        "sampling": sampling,
        "hr10": res["hr10"],
        "ndcg10": res["ndcg10"],
        "mbytes": report.payload["total_bytes_exchanged"] / 1e6,
        "rounds": report.payload["rounds_run"],
    }


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", required=True, help="base experiment config file")
    parser.add_argument("--out", required=True, help="output directory root")
    parser.add_argument("--seed", type=int, default=None)
    args = parser.parse_args()

    out_root = Path(args.out)
    variants = [
        (0.0, "performance"),
        (0.5, "performance"),
        (0.5, "similarity"),
        (0.5, "none"),
    ]
    rows = []
    for gamma, sampling in variants:
        cfg = load_config(args.config, {"seed": args.seed} if args.seed is not None else {})
        label = f"g{gamma}_{sampling}"
        rows.append(run_variant(cfg, out_root / label, gamma, sampling))
        r = rows[-1]
        print(f"{label:>20}: HR@10={r['hr10']:.4f} NDCG@10={r['ndcg10']:.4f} "
              f"bytes={r['mbytes']:.1f}MB rounds={r['rounds']}")

    (out_root / "ablation.json").write_text(json.dumps(rows, indent=2) + "\n")
    print(f"\nwrote {out_root / 'ablation.json'}")


if __name__ == "__main__":
    main()
