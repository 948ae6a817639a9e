"""Command-line entry points.

    mac-sim ingest --checkins data.csv --friends edges.csv --out dir/
    mac-sim run --config exp.cfg --out dir/

`ingest` materializes the filtered, split dataset plus the region map;
`run` executes the full pipeline and writes report.json, rounds.ndjson and
neighbors.json into the output directory. Nonzero exit codes carry the name
of the failing stage on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import data as dat
from .config import ConfigError, ExperimentConfig, load_config
from .experiment import (
    TAG_KMEANS,
    TAG_SPLIT,
    StageError,
    run_experiment,
    subseed,
    write_region_map,
)
from .geo import cluster_regions


def _cmd_ingest(args) -> int:
    try:
        table = dat.parse_checkins(args.checkins)
        table = dat.filter_min_interactions(table, args.min_interactions)
        table = dat.compact(table)
        sequences = dat.build_sequences(table, args.max_seq_len)
        split = dat.leave_one_out_split(
            sequences, args.reference_fraction,
            seed=int(subseed(args.seed, TAG_SPLIT).generate_state(1)[0]))
        if args.friends:
            graph = dat.parse_friendships(args.friends, dat.user_index_of(table))
        else:
            graph = dat.SocialGraph()
        region_map = cluster_regions(
            table.coords(), args.regions,
            seed=int(subseed(args.seed, TAG_KMEANS).generate_state(1)[0]))
    except (dat.ParseError, dat.ConfigError, dat.DataError, ValueError, OSError) as exc:
        print(f"stage 'ingest' failed: {exc}", file=sys.stderr)
        return 2
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = {
        "seed": args.seed,
        "min_interactions": args.min_interactions,
        "max_seq_len": args.max_seq_len,
        "reference_fraction": args.reference_fraction,
        "regions": args.regions,
    }
    dat.serialize_dataset(out, table, split, graph, meta)
    write_region_map(out / "regions.json", region_map)
    summary = {
        "users": len(table.users),
        "pois": len(table.pois),
        "categories": len(table.categories),
        "checkins": len(table),
        "eval_users": len(split.train),
        "pool_sequences": len(split.reference_pool),
    }
    print(json.dumps(summary, sort_keys=True))
    return 0


def _cmd_run(args) -> int:
    overrides = {
        "refgen": args.refgen,
        "sampling": args.sampling,
        "gamma": args.gamma,
        "seed": args.seed,
    }
    try:
        if args.config:
            cfg = load_config(args.config, overrides)
        else:
            cfg = ExperimentConfig(**{k: v for k, v in overrides.items() if v is not None})
            cfg.validate()
        if args.checkins:
            cfg.checkins = args.checkins
        if args.friends:
            cfg.friends = args.friends
        if not cfg.checkins:
            raise ConfigError("no check-in file configured (config key 'checkins' or --checkins)")
        report = run_experiment(cfg, args.out)
    except ConfigError as exc:
        print(f"stage 'config' failed: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(exc, file=sys.stderr)
        return 3
    results = report.payload["results"]
    print(json.dumps({"out": str(args.out), **results}, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mac-sim")
    sub = parser.add_subparsers(dest="command", required=True)

    p_ing = sub.add_parser("ingest", help="parse, filter and split a check-in dataset")
    p_ing.add_argument("--checkins", required=True)
    p_ing.add_argument("--friends", default=None)
    p_ing.add_argument("--min-interactions", dest="min_interactions", type=int, default=10)
    p_ing.add_argument("--max-seq-len", dest="max_seq_len", type=int, default=200)
    p_ing.add_argument("--reference-fraction", dest="reference_fraction", type=float, default=0.10)
    p_ing.add_argument("--regions", type=int, default=5)
    p_ing.add_argument("--seed", type=int, default=0)
    p_ing.add_argument("--out", required=True)
    p_ing.set_defaults(func=_cmd_ingest)

    p_run = sub.add_parser("run", help="run a full collaborative-learning experiment")
    p_run.add_argument("--config", default=None)
    p_run.add_argument("--checkins", default=None)
    p_run.add_argument("--friends", default=None)
    p_run.add_argument("--refgen", choices=["original", "transformative", "probabilistic"],
                       default=None)
    p_run.add_argument("--sampling", choices=["performance", "similarity", "none"],
                       default=None)
    p_run.add_argument("--gamma", type=float, default=None)
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--out", required=True)
    p_run.set_defaults(func=_cmd_run)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
