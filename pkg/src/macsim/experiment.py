"""End-to-end experiment pipeline: ingest, regions, server phase, training
rounds, evaluation and the JSON report.

Every stage derives its randomness from the single experiment seed, so a
(seed, config) pair replays to byte-identical outputs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import data as dat
from .config import ExperimentConfig
from .geo import RegionMap, cluster_regions
from .recommender import DeviceModel, model_size_bytes
from .simulator import (
    BundleBoard,
    Device,
    Hyper,
    Server,
    make_summaries,
    run_until_converged,
)

# sub-seed tags, combined with the experiment seed through SeedSequence
TAG_SPLIT = 1
TAG_KMEANS = 2
TAG_REFGEN = 3
TAG_DIMS = 4
TAG_MODEL = 5
TAG_SAMPLE = 6


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage!r} failed: {message}")
        self.stage = stage


def subseed(seed: int, *tags: int):
    return np.random.SeedSequence([seed, *tags])


def assign_dims(uids: list[int], dims: dict[int, float], seed: int) -> dict[int, int]:
    """Seeded shuffle of users into latent-dimension buckets whose sizes
    respect the configured fractions (largest-remainder rounding)."""
    n = len(uids)
    sorted_dims = sorted(dims)
    raw = {d: dims[d] * n for d in sorted_dims}
    counts = {d: math.floor(raw[d]) for d in sorted_dims}
    leftover = n - sum(counts.values())
    by_remainder = sorted(sorted_dims, key=lambda d: (-(raw[d] - counts[d]), d))
    for d in by_remainder[:leftover]:
        counts[d] += 1
    rng = np.random.default_rng(subseed(seed, TAG_DIMS))
    order = rng.permutation(n)
    out: dict[int, int] = {}
    i = 0
    for d in sorted_dims:
        for _ in range(counts[d]):
            out[uids[int(order[i])]] = d
            i += 1
    return out


@dataclass
class MetricsReport:
    payload: dict

    def to_json(self) -> str:
        return json.dumps(self.payload, sort_keys=True, indent=2) + "\n"


def _write_ndjson(path: Path, records: list[dict]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")


def write_region_map(path: Path, region_map: RegionMap) -> None:
    payload = {
        "k": len(region_map.regions),
        "regions": [
            {"id": r.id, "centroid": [r.centroid[0], r.centroid[1]], "poi_ids": r.poi_ids}
            for r in region_map.regions
        ],
    }
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def ingest(cfg: ExperimentConfig):
    """Parse, filter, sequence and split the raw data; returns
    (table, split, graph, region_map)."""
    table = dat.parse_checkins(cfg.checkins)
    table = dat.filter_min_interactions(table, cfg.min_interactions)
    table = dat.compact(table)
    sequences = dat.build_sequences(table, cfg.max_seq_len)
    split = dat.leave_one_out_split(sequences, cfg.reference_fraction,
                                    seed=int(subseed(cfg.seed, TAG_SPLIT).generate_state(1)[0]))
    if cfg.friends:
        graph = dat.parse_friendships(cfg.friends, dat.user_index_of(table))
    else:
        graph = dat.SocialGraph()
    region_map = cluster_regions(table.coords(), cfg.k_regions,
                                 seed=int(subseed(cfg.seed, TAG_KMEANS).generate_state(1)[0]))
    return table, split, graph, region_map


def build_devices(split, table, region_map, packages, cfg: ExperimentConfig) -> dict[int, Device]:
    uids = split.eval_users()
    dim_of = assign_dims(uids, cfg.dims, cfg.seed)
    hyper = Hyper(gamma=cfg.gamma, mu=cfg.mu, tau_pct=cfg.tau_pct, alpha=cfg.alpha,
                  beta=cfg.beta, lr=cfg.lr, batch_size=cfg.batch_size,
                  sampling=cfg.sampling)
    devices: dict[int, Device] = {}
    for uid in uids:
        seq = split.train[uid]
        # a device stores embeddings for every region of its own full history,
        # including the held-out tail (places the user has already been)
        history = seq.pois + [split.valid[uid], split.test[uid]]
        regions = sorted({region_map.poi_to_region[p] for p in history})
        region_ids = {r: list(region_map.support(r)) for r in regions}
        model = DeviceModel(
            user_id=uid,
            dim=dim_of[uid],
            region_ids=region_ids,
            n_categories=len(table.categories),
            seed=subseed(cfg.seed, TAG_MODEL, uid),
            dropout=cfg.dropout,
        )
        devices[uid] = Device(
            uid=uid,
            model=model,
            train_seq=seq,
            valid_poi=split.valid[uid],
            test_poi=split.test[uid],
            package=packages[uid],
            region_map=region_map,
            hyper=hyper,
            sample_seed=subseed(cfg.seed, TAG_SAMPLE, uid),
        )
    return devices


def run_experiment(cfg: ExperimentConfig, out_dir) -> MetricsReport:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    stage = "ingest"
    try:
        table, split, graph, region_map = ingest(cfg)
    except Exception as exc:
        raise StageError(stage, str(exc)) from exc

    stage = "server"
    try:
        summaries = make_summaries(split, region_map, len(table.categories))
        server = Server()
        state, packages = server.run_phase(
            summaries, split.reference_pool, graph, region_map, table.pois,
            len(table.categories), cfg.h, cfg.refgen, cfg.v_r, cfg.z,
            cfg.gen_seq_len, cfg.max_hop_km,
            seed=int(subseed(cfg.seed, TAG_REFGEN).generate_state(1)[0]))
        neighbors_payload = {
            str(uid): {
                "current_region": state.summaries[uid].current_region,
                "geo": state.neighbor_geo[uid],
                "sem": state.neighbor_sem[uid],
            }
            for uid in sorted(state.summaries)
        }
        (out_dir / "neighbors.json").write_text(
            json.dumps(neighbors_payload, sort_keys=True, indent=2) + "\n")
        ref_records = []
        for r in sorted(state.geo_refs):
            for seq in state.geo_refs[r].sequences:
                ref_records.append({"kind": "geo", "region": r, "pois": seq})
        for seq in state.sem_ref.sequences:
            ref_records.append({"kind": "sem", "cats": seq})
        _write_ndjson(out_dir / "refsets.ndjson", ref_records)
    except StageError:
        raise
    except Exception as exc:
        raise StageError(stage, str(exc)) from exc

    stage = "devices"
    try:
        devices = build_devices(split, table, region_map, packages, cfg)
    except Exception as exc:
        raise StageError(stage, str(exc)) from exc

    stage = "rounds"
    try:
        board = BundleBoard()
        coords = table.coords()
        records, rounds_run = run_until_converged(
            devices, board, coords, cfg.n_candidates, cfg.max_epochs, cfg.patience)
        _write_ndjson(out_dir / "rounds.ndjson", records)
    except Exception as exc:
        raise StageError(stage, str(exc)) from exc

    stage = "evaluate"
    try:
        per_user = {}
        for uid in sorted(devices):
            res = devices[uid].evaluate_test(coords, cfg.n_candidates)
            per_user[uid] = res
    except Exception as exc:
        raise StageError(stage, str(exc)) from exc

    stage = "report"
    try:
        report = build_report(cfg, table, split, devices, per_user, records, rounds_run)
        (out_dir / "report.json").write_text(report.to_json())
        (out_dir / "report.txt").write_text(render_report_table(report))
    except Exception as exc:
        raise StageError(stage, str(exc)) from exc
    return report


def render_report_table(report: MetricsReport) -> str:
    """Human-readable summary of a MetricsReport."""
    p = report.payload
    cfg = p["config"]
    lines = [
        "experiment summary",
        "==================",
        f"users={p['dataset']['eval_users']} pois={p['dataset']['pois']} "
        f"categories={p['dataset']['categories']} pool={p['dataset']['pool_sequences']}",
        f"gamma={cfg['gamma']} mu={cfg['mu']} alpha={cfg['alpha']} beta={cfg['beta']} "
        f"tau={cfg['tau_pct']}% sampling={cfg['sampling']} refgen={cfg['refgen']} "
        f"lr={cfg['lr']} seed={cfg['seed']}",
        f"rounds run: {p['rounds_run']}   epochs to convergence: "
        f"mean {p['epochs_to_convergence']['mean']:.1f}, max {p['epochs_to_convergence']['max']}",
        f"bytes exchanged: {p['total_bytes_exchanged']:,}",
        "",
        f"{'bucket':>8} {'users':>6} {'HR@5':>8} {'HR@10':>8} {'NDCG@5':>8} "
        f"{'NDCG@10':>8} {'size(B)':>10}",
    ]
    r = p["results"]
    lines.append(f"{'all':>8} {p['dataset']['eval_users']:>6} {r['hr5']:>8.4f} "
                 f"{r['hr10']:>8.4f} {r['ndcg5']:>8.4f} {r['ndcg10']:>8.4f} "
                 f"{p['mean_model_size_bytes']:>10.0f}")
    for d, row in sorted(p["per_dim"].items(), key=lambda kv: int(kv[0])):
        lines.append(f"{'d=' + d:>8} {row['users']:>6} {row['hr5']:>8.4f} "
                     f"{row['hr10']:>8.4f} {row['ndcg5']:>8.4f} {row['ndcg10']:>8.4f} "
                     f"{row['mean_model_size_bytes']:>10.0f}")
    return "\n".join(lines) + "\n"


def build_report(cfg, table, split, devices, per_user, records, rounds_run) -> MetricsReport:
    uids = sorted(per_user)
    n = len(uids)

    def mean(vals) -> float:
        vals = list(vals)
        return float(sum(vals) / len(vals)) if vals else 0.0

    by_dim: dict[int, list[int]] = {}
    for uid in uids:
        by_dim.setdefault(devices[uid].model.dim, []).append(uid)
    per_dim = {}
    for d in sorted(by_dim):
        members = by_dim[d]
        per_dim[str(d)] = {
            "users": len(members),
            "hr5": mean(per_user[u].hr5 for u in members),
            "hr10": mean(per_user[u].hr10 for u in members),
            "ndcg5": mean(per_user[u].ndcg5 for u in members),
            "ndcg10": mean(per_user[u].ndcg10 for u in members),
            "mean_model_size_bytes": mean(model_size_bytes(devices[u].model) for u in members),
        }
    epochs_to_convergence = [
        (devices[u].frozen_at + 1) if devices[u].frozen_at is not None else rounds_run
        for u in uids
    ]
    payload = {
        "config": cfg.as_dict(),
        "dataset": {
            "eval_users": n,
            "pool_sequences": len(split.reference_pool),
            "pois": len(table.pois),
            "categories": len(table.categories),
        },
        "results": {
            "hr5": mean(per_user[u].hr5 for u in uids),
            "hr10": mean(per_user[u].hr10 for u in uids),
            "ndcg5": mean(per_user[u].ndcg5 for u in uids),
            "ndcg10": mean(per_user[u].ndcg10 for u in uids),
        },
        "per_dim": per_dim,
        "mean_model_size_bytes": mean(model_size_bytes(devices[u].model) for u in uids),
        "total_bytes_exchanged": int(sum(r["bytes_in"] for r in records)),
        "rounds_run": rounds_run,
        "epochs_to_convergence": {
            "mean": mean(epochs_to_convergence),
            "max": max(epochs_to_convergence) if epochs_to_convergence else 0,
        },
    }
    return MetricsReport(payload=payload)
