"""Check-in dataset ingestion: parsing, interaction filtering, sequence
construction, leave-one-out splitting and the social graph.

Input formats (documented contract):
  check-ins:   CSV with header columns user_id,poi_id,category,lat,lon,timestamp
  friendships: CSV with header columns user_a,user_b

Users, POIs and categories are assigned stable integer indices in
first-appearance order. All randomness flows from an explicit seed so that
re-running ingestion reproduces byte-identical outputs.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

CHECKIN_COLUMNS = ("user_id", "poi_id", "category", "lat", "lon", "timestamp")
FRIEND_COLUMNS = ("user_a", "user_b")

DATASET_FORMAT = "macsim-dataset"
DATASET_VERSION = 1


class ParseError(ValueError):
    """A row failed to parse; message names the offending line."""


class ConfigError(ValueError):
    """Input file does not match the declared schema."""


class DataError(ValueError):
    """Dataset-level contract violation (e.g. empty after filtering)."""


@dataclass(frozen=True)
class Poi:
    id: int
    raw_id: str
    category_id: int
    lon: float
    lat: float


@dataclass
class CheckinTable:
    """Flat check-in records plus the vocabularies they index into."""

    users: list[str]
    pois: list[Poi]
    categories: list[str]
    user_of_row: np.ndarray  # int indices, file order
    poi_of_row: np.ndarray
    ts_of_row: np.ndarray

    def __len__(self) -> int:
        return int(self.user_of_row.shape[0])

    def coords(self) -> np.ndarray:
        return np.array([[p.lon, p.lat] for p in self.pois], dtype=float)


@dataclass
class CheckinSequence:
    """One user's chronologically ordered visits with parallel categories."""

    user_id: int
    pois: list[int]
    categories: list[int]
    timestamps: list[int]

    def __len__(self) -> int:
        return len(self.pois)


@dataclass
class SplitDataset:
    train: dict[int, CheckinSequence]
    valid: dict[int, int]  # user -> second-to-last POI
    test: dict[int, int]  # user -> last POI
    reference_pool: list[CheckinSequence]

    def eval_users(self) -> list[int]:
        return sorted(self.train)


@dataclass
class SocialGraph:
    adjacency: dict[int, set[int]] = field(default_factory=dict)

    def add_edge(self, a: int, b: int) -> None:
        if a == b:
            raise ValueError("self-loop")
        self.adjacency.setdefault(a, set()).add(b)
        self.adjacency.setdefault(b, set()).add(a)

    def friends(self, u: int) -> set[int]:
        return self.adjacency.get(u, set())

    def are_friends(self, a: int, b: int) -> bool:
        return b in self.adjacency.get(a, set())

    def edges(self) -> set[tuple[int, int]]:
        return {(min(a, b), max(a, b)) for a, nbrs in self.adjacency.items() for b in nbrs}


def parse_checkins(path) -> CheckinTable:
    """Parse a check-in CSV into a CheckinTable.

    Raises ConfigError when the header is missing required columns and
    ParseError (naming the line number) for malformed rows, including
    coordinates outside [-90, 90] x [-180, 180].
    """
    users: list[str] = []
    user_index: dict[str, int] = {}
    pois: list[Poi] = []
    poi_index: dict[str, int] = {}
    categories: list[str] = []
    cat_index: dict[str, int] = {}
    u_rows: list[int] = []
    p_rows: list[int] = []
    t_rows: list[int] = []

    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ConfigError(f"{path}: empty file")
        missing = [c for c in CHECKIN_COLUMNS if c not in reader.fieldnames]
        if missing:
            raise ConfigError(f"{path}: header missing columns {missing}")
        for lineno, row in enumerate(reader, start=2):
            try:
                raw_user = row["user_id"]
                raw_poi = row["poi_id"]
                raw_cat = row["category"]
                lat = float(row["lat"])
                lon = float(row["lon"])
                ts = int(float(row["timestamp"]))
            except (TypeError, ValueError, KeyError) as exc:
                raise ParseError(f"{path}: line {lineno}: malformed row ({exc})") from None
            if not raw_user or not raw_poi or not raw_cat:
                raise ParseError(f"{path}: line {lineno}: empty field")
            if not (-90.0 <= lat <= 90.0) or not (-180.0 <= lon <= 180.0):
                raise ParseError(f"{path}: line {lineno}: coordinates out of range ({lat}, {lon})")
            if raw_cat not in cat_index:
                cat_index[raw_cat] = len(categories)
                categories.append(raw_cat)
            if raw_poi not in poi_index:
                poi_index[raw_poi] = len(pois)
                pois.append(Poi(id=len(pois), raw_id=raw_poi,
                                category_id=cat_index[raw_cat], lon=lon, lat=lat))
            if raw_user not in user_index:
                user_index[raw_user] = len(users)
                users.append(raw_user)
            u_rows.append(user_index[raw_user])
            p_rows.append(poi_index[raw_poi])
            t_rows.append(ts)

    return CheckinTable(
        users=users,
        pois=pois,
        categories=categories,
        user_of_row=np.asarray(u_rows, dtype=np.int64),
        poi_of_row=np.asarray(p_rows, dtype=np.int64),
        ts_of_row=np.asarray(t_rows, dtype=np.int64),
    )


def filter_min_interactions(table: CheckinTable, min_count: int) -> CheckinTable:
    """Iteratively drop users and POIs with fewer than min_count check-ins
    until a fixed point. Each pass removes all offenders simultaneously, so
    the result does not depend on removal order. Vocabularies and indices are
    kept as-is; use compact() afterwards to renumber survivors.
    """
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    keep = np.ones(len(table), dtype=bool)
    u = table.user_of_row
    p = table.poi_of_row
    while True:
        uc = np.bincount(u[keep], minlength=len(table.users))
        pc = np.bincount(p[keep], minlength=len(table.pois))
        bad = keep & ((uc[u] < min_count) | (pc[p] < min_count))
        if not bad.any():
            break
        keep &= ~bad
    if not keep.any():
        raise DataError(f"no check-ins left after min-interaction filtering (min_count={min_count})")
    return CheckinTable(
        users=table.users,
        pois=table.pois,
        categories=table.categories,
        user_of_row=u[keep],
        poi_of_row=p[keep],
        ts_of_row=table.ts_of_row[keep],
    )


def compact(table: CheckinTable) -> CheckinTable:
    """Renumber users/POIs/categories to the ones that still occur in rows,
    preserving first-appearance order. Identity when nothing was filtered.
    """
    new_users: list[str] = []
    umap: dict[int, int] = {}
    new_pois: list[Poi] = []
    pmap: dict[int, int] = {}
    new_cats: list[str] = []
    cmap: dict[int, int] = {}
    u_rows = np.empty(len(table), dtype=np.int64)
    p_rows = np.empty(len(table), dtype=np.int64)
    for i in range(len(table)):
        uo = int(table.user_of_row[i])
        po = int(table.poi_of_row[i])
        if uo not in umap:
            umap[uo] = len(new_users)
            new_users.append(table.users[uo])
        if po not in pmap:
            old = table.pois[po]
            if old.category_id not in cmap:
                cmap[old.category_id] = len(new_cats)
                new_cats.append(table.categories[old.category_id])
            pmap[po] = len(new_pois)
            new_pois.append(Poi(id=len(new_pois), raw_id=old.raw_id,
                                category_id=cmap[old.category_id], lon=old.lon, lat=old.lat))
        u_rows[i] = umap[uo]
        p_rows[i] = pmap[po]
    return CheckinTable(
        users=new_users,
        pois=new_pois,
        categories=new_cats,
        user_of_row=u_rows,
        poi_of_row=p_rows,
        ts_of_row=table.ts_of_row.copy(),
    )


def build_sequences(table: CheckinTable, max_seq_len: int = 200) -> dict[int, CheckinSequence]:
    """Per-user chronological sequences. Equal timestamps keep file order
    (stable sort); sequences longer than max_seq_len keep the most recent
    max_seq_len check-ins.
    """
    by_user: dict[int, list[int]] = {}
    for i in range(len(table)):
        by_user.setdefault(int(table.user_of_row[i]), []).append(i)
    out: dict[int, CheckinSequence] = {}
    for uid in sorted(by_user):
        rows = sorted(by_user[uid], key=lambda i: int(table.ts_of_row[i]))
        rows = rows[-max_seq_len:]
        pois = [int(table.poi_of_row[i]) for i in rows]
        out[uid] = CheckinSequence(
            user_id=uid,
            pois=pois,
            categories=[table.pois[p].category_id for p in pois],
            timestamps=[int(table.ts_of_row[i]) for i in rows],
        )
    return out


def leave_one_out_split(
    sequences: dict[int, CheckinSequence],
    reference_fraction: float,
    seed: int,
) -> SplitDataset:
    """Withhold a seeded random fraction of whole sequences as the reference
    pool, then split every remaining user leave-one-out: last check-in for
    testing, second-to-last for validation, the rest for training.

    After the random draw the pool is greedily topped up until every POI
    appears either in the pool or in some remaining user's training part, so
    no POI is observable only at held-out positions. Sequences shorter than 3
    cannot be split and are routed to the pool with a warning.
    """
    if not (0.0 < reference_fraction < 1.0):
        raise ValueError("reference_fraction must be in (0, 1)")
    uids = sorted(sequences)
    short = [u for u in uids if len(sequences[u]) < 3]
    for u in short:
        log.warning("user %d has %d check-ins (<3); excluded from evaluation, kept in reference pool",
                    u, len(sequences[u]))
    eligible = [u for u in uids if len(sequences[u]) >= 3]
    rng = np.random.default_rng(seed)
    n_pool = math.ceil(reference_fraction * len(uids))
    n_draw = max(0, min(len(eligible), n_pool - len(short)))
    drawn = rng.choice(len(eligible), size=n_draw, replace=False) if n_draw else []
    pool_users = set(short) | {eligible[int(i)] for i in drawn}

    all_pois = {p for s in sequences.values() for p in s.pois}

    def covered(pool: set[int]) -> set[int]:
        got: set[int] = set()
        for u, s in sequences.items():
            got.update(s.pois if u in pool else s.pois[:-2])
        return got

    missing = all_pois - covered(pool_users)
    while missing:
        # greedy repair: add the sequence covering the most missing POIs
        # (missing POIs can only sit in held-out tail positions, so the
        # full-sequence gain equals the tail gain)
        best_u, best_gain = -1, 0
        for u in uids:
            if u in pool_users:
                continue
            gain = len(missing & set(sequences[u].pois[-2:]))
            if gain > best_gain:
                best_u, best_gain = u, gain
        if best_gain == 0:
            break  # unreachable: every missing POI sits in some eval tail
        pool_users.add(best_u)
        missing = all_pois - covered(pool_users)

    train: dict[int, CheckinSequence] = {}
    valid: dict[int, int] = {}
    test: dict[int, int] = {}
    pool: list[CheckinSequence] = []
    for u in uids:
        seq = sequences[u]
        if u in pool_users:
            pool.append(seq)
            continue
        train[u] = CheckinSequence(
            user_id=u,
            pois=seq.pois[:-2],
            categories=seq.categories[:-2],
            timestamps=seq.timestamps[:-2],
        )
        valid[u] = seq.pois[-2]
        test[u] = seq.pois[-1]
    return SplitDataset(train=train, valid=valid, test=test, reference_pool=pool)


def parse_friendships(path, user_index: dict[str, int]) -> SocialGraph:
    """Parse an edge-list CSV into a symmetric SocialGraph. Self-loops are
    skipped with a warning; edges touching users outside user_index are
    dropped; duplicate rows collapse to one edge.
    """
    graph = SocialGraph()
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ConfigError(f"{path}: empty file")
        missing = [c for c in FRIEND_COLUMNS if c not in reader.fieldnames]
        if missing:
            raise ConfigError(f"{path}: header missing columns {missing}")
        for lineno, row in enumerate(reader, start=2):
            ra, rb = row["user_a"], row["user_b"]
            if ra == rb:
                log.warning("%s: line %d: self-loop %r skipped", path, lineno, ra)
                continue
            if ra not in user_index or rb not in user_index:
                continue
            graph.add_edge(user_index[ra], user_index[rb])
    return graph


def user_index_of(table: CheckinTable) -> dict[str, int]:
    return {raw: i for i, raw in enumerate(table.users)}


def serialize_dataset(out_dir, table: CheckinTable, split: SplitDataset,
                      graph: SocialGraph, meta: dict) -> Path:
    """Write the ingested dataset as newline-delimited JSON records.

    First line is a versioned header; subsequent lines carry one record each
    with a "kind" tag: poi, category, train, eval, pool, edge. Deterministic
    byte-for-byte given the same inputs and seed.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "dataset.ndjson"

    def dump(obj) -> str:
        return json.dumps(obj, sort_keys=True, separators=(",", ":"))

    with open(path, "w") as fh:
        fh.write(dump({"format": DATASET_FORMAT, "version": DATASET_VERSION, "meta": meta}) + "\n")
        for c in table.categories:
            fh.write(dump({"kind": "category", "name": c}) + "\n")
        for p in table.pois:
            fh.write(dump({"kind": "poi", "id": p.id, "raw": p.raw_id, "cat": p.category_id,
                           "lon": p.lon, "lat": p.lat}) + "\n")
        for u in sorted(split.train):
            s = split.train[u]
            fh.write(dump({"kind": "train", "user": u, "raw": table.users[u], "pois": s.pois,
                           "ts": s.timestamps}) + "\n")
            fh.write(dump({"kind": "eval", "user": u, "valid": split.valid[u],
                           "test": split.test[u]}) + "\n")
        for s in sorted(split.reference_pool, key=lambda s: s.user_id):
            fh.write(dump({"kind": "pool", "user": s.user_id, "raw": table.users[s.user_id],
                           "pois": s.pois, "ts": s.timestamps}) + "\n")
        for a, b in sorted(graph.edges()):
            fh.write(dump({"kind": "edge", "a": a, "b": b}) + "\n")
    return path
