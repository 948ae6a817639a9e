"""Anonymous reference dataset construction.

Two generation strategies produce the shared data that soft decisions are
compared on: transformative generation mixes pairs of friends' sequences by
splitting at a common element and swapping tails; probabilistic generation
samples category chains from an empirical transition matrix and materializes
them as distance-constrained POI sequences inside a region. An "original"
mode that uses raw pool sequences directly is kept for ablations.

Every region gets its own POI-level reference set (region-pure by
construction); one universal category-level set covers all categories.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .geo import RegionMap, haversine_km

log = logging.getLogger(__name__)

MODE_ORIGINAL = "original"
MODE_TRANSFORMATIVE = "transformative"
MODE_PROBABILISTIC = "probabilistic"
MODES = (MODE_ORIGINAL, MODE_TRANSFORMATIVE, MODE_PROBABILISTIC)

MAX_BACKTRACKS_PER_POSITION = 20


class GenerationError(RuntimeError):
    """Reference data could not be generated within the attempt budget."""


@dataclass
class GeoReferenceSet:
    region_id: int
    sequences: list[list[int]]  # POI ids, all inside region_id
    categories: list[list[int]]  # parallel category ids


@dataclass
class SemReferenceSet:
    sequences: list[list[int]]  # category ids, jointly covering the vocabulary


@dataclass
class TransitionMatrix:
    probs: np.ndarray  # (C, C) row-stochastic; row c = next-category distribution


def transformative_pair(seq_i: list, seq_j: list, rng: np.random.Generator):
    """Decompose-recompose two sequences at a random common element.

    Both sequences split at their first occurrence of the chosen common
    element; the prefixes swap tails, keeping a single copy of the pivot.
    Returns None when the sequences share no element.
    """
    common = sorted(set(seq_i) & set(seq_j))
    if not common:
        return None
    pivot = common[int(rng.integers(len(common)))]
    i = seq_i.index(pivot)
    j = seq_j.index(pivot)
    return seq_i[: i + 1] + seq_j[j + 1:], seq_j[: j + 1] + seq_i[i + 1:]


def region_restrict(seq_pois: list[int], region_map: RegionMap):
    """Assign a sequence to its most-visited region and drop POIs outside it.

    Ties go to the smaller region id. Returns (region_id, filtered sequence)
    or None when fewer than 2 POIs survive.
    """
    if not seq_pois:
        raise ValueError("empty sequence")
    counts = Counter(region_map.poi_to_region[p] for p in seq_pois)
    region = min(counts, key=lambda r: (-counts[r], r))
    filtered = [p for p in seq_pois if region_map.poi_to_region[p] == region]
    if len(filtered) < 2:
        return None
    return region, filtered


def transition_matrix(cat_seqs: list[list[int]], n_categories: int) -> TransitionMatrix:
    """Empirical next-category transition matrix.

    counts[n, m] = occurrences of category m immediately after category n.
    Rows with no observations become uniform so generated chains never
    dead-end.
    """
    counts = np.zeros((n_categories, n_categories), dtype=float)
    for seq in cat_seqs:
        for a, b in zip(seq, seq[1:]):
            counts[a, b] += 1.0
    sums = counts.sum(axis=1, keepdims=True)
    probs = np.where(sums > 0, counts / np.maximum(sums, 1.0), 1.0 / n_categories)
    return TransitionMatrix(probs=probs)


def probabilistic_cat_seq(tm: TransitionMatrix, length: int,
                          rng: np.random.Generator, start: int | None = None) -> list[int]:
    """Sample a category chain: uniform start (unless forced), then repeated
    draws from the previous category's transition row."""
    if length < 2:
        raise ValueError("length must be >= 2")
    n = tm.probs.shape[0]
    c = int(rng.integers(n)) if start is None else start
    seq = [c]
    for _ in range(length - 1):
        c = int(rng.choice(n, p=tm.probs[c]))
        seq.append(c)
    return seq


def probabilistic_poi_seq(cat_seq: list[int], pois_by_cat: dict[int, list[int]],
                          coords, max_hop_km: float,
                          rng: np.random.Generator) -> list[int] | None:
    """Materialize a category chain as region POIs with every consecutive hop
    under max_hop_km.

    Greedy left-to-right sampling with bounded backtracking: when a position
    has no eligible POI, the previous choice is redrawn, up to
    MAX_BACKTRACKS_PER_POSITION times per position. Returns None when the
    chain is unsatisfiable within that budget.
    """
    coords = np.asarray(coords, dtype=float)
    seq: list[int] = []
    backtracks = [0] * len(cat_seq)
    t = 0
    while t < len(cat_seq):
        options = pois_by_cat.get(cat_seq[t], [])
        if t > 0:
            prev = coords[seq[-1]]
            options = [p for p in options if haversine_km(prev, coords[p]) < max_hop_km]
        if not options:
            if t == 0:
                return None
            backtracks[t] += 1
            if backtracks[t] > MAX_BACKTRACKS_PER_POSITION:
                return None
            seq.pop()
            t -= 1
            continue
        seq.append(options[int(rng.integers(len(options)))])
        t += 1
    return seq


def _pois_by_cat_in_region(region_poi_ids: list[int], pois) -> dict[int, list[int]]:
    out: dict[int, list[int]] = {}
    for p in region_poi_ids:
        out.setdefault(pois[p].category_id, []).append(p)
    return out


def _masked_matrix(tm: TransitionMatrix, allowed: set[int]) -> TransitionMatrix:
    """Restrict transition rows to an allowed category subset; empty rows
    become uniform over the subset."""
    n = tm.probs.shape[0]
    mask = np.zeros(n)
    mask[sorted(allowed)] = 1.0
    probs = tm.probs * mask[None, :]
    sums = probs.sum(axis=1, keepdims=True)
    uniform = mask / mask.sum()
    probs = np.where(sums > 0, probs / np.maximum(sums, 1e-300), uniform[None, :])
    return TransitionMatrix(probs=probs)


def _ensure_sem_coverage(sem_seqs: list[list[int]], n_categories: int,
                         tm: TransitionMatrix, gen_len: int,
                         rng: np.random.Generator) -> list[list[int]]:
    """Replace redundant sequences with forced-start chains until every
    category occurs somewhere."""
    covered = Counter(c for s in sem_seqs for c in set(s))
    missing = [c for c in range(n_categories) if covered[c] == 0]
    for c in missing:
        new_seq = probabilistic_cat_seq(tm, gen_len, rng, start=c)
        # pick a victim whose categories all occur in other sequences
        victim = None
        for i, s in enumerate(sem_seqs):
            if all(covered[x] > 1 for x in set(s)):
                victim = i
                break
        if victim is None:
            raise GenerationError(
                f"cannot cover category {c} without breaking existing coverage")
        for x in set(sem_seqs[victim]):
            covered[x] -= 1
        for x in set(new_seq):
            covered[x] += 1
        sem_seqs[victim] = new_seq
    return sem_seqs


def build_refsets(mode: str, pool, graph, region_map: RegionMap, pois,
                  n_categories: int, v_r: int, z: int, gen_len: int,
                  max_hop_km: float, seed: int, budget_factor: int = 200,
                  allow_topup: bool = True):
    """Construct per-region POI reference sets and the universal category set.

    pool: withheld CheckinSequence objects; graph: SocialGraph for the
    transformative friend-pair condition. Under the transformative mode,
    regions (or the category set) that cannot be filled within the attempt
    budget are topped up probabilistically unless allow_topup is False.
    Outputs are deterministic for a fixed seed.
    """
    if mode not in MODES:
        raise ValueError(f"unknown refgen mode {mode!r}")
    rng = np.random.default_rng(seed)
    pool = sorted(pool, key=lambda s: s.user_id)
    pool_poi_keys = {tuple(s.pois) for s in pool}
    pool_cat_keys = {tuple(s.categories) for s in pool}
    tm = transition_matrix([s.categories for s in pool], n_categories)

    geo: dict[int, GeoReferenceSet] = {
        r.id: GeoReferenceSet(region_id=r.id, sequences=[], categories=[])
        for r in region_map.regions
    }
    geo_keys: dict[int, set] = {r.id: set() for r in region_map.regions}
    sem_seqs: list[list[int]] = []
    sem_keys: set = set()

    def cats_of(seq_pois: list[int]) -> list[int]:
        return [pois[p].category_id for p in seq_pois]

    def try_add_geo(seq_pois: list[int], anonymity: bool, unique: bool = True) -> bool:
        restricted = region_restrict(seq_pois, region_map)
        if restricted is None:
            return False
        region, filtered = restricted
        filtered = filtered[-gen_len:]
        if len(filtered) < 2 or len(geo[region].sequences) >= v_r:
            return False
        key = tuple(filtered)
        if (unique and key in geo_keys[region]) or (anonymity and key in pool_poi_keys):
            return False
        geo_keys[region].add(key)
        geo[region].sequences.append(filtered)
        geo[region].categories.append(cats_of(filtered))
        return True

    def try_add_sem(cat_seq: list[int], anonymity: bool, unique: bool = True) -> bool:
        cat_seq = cat_seq[-gen_len:] if gen_len else cat_seq
        if len(cat_seq) < 2 or len(sem_seqs) >= z:
            return False
        key = tuple(cat_seq)
        if (unique and key in sem_keys) or (anonymity and key in pool_cat_keys):
            return False
        sem_keys.add(key)
        sem_seqs.append(cat_seq)
        return True

    def geo_done() -> bool:
        return all(len(g.sequences) >= v_r for g in geo.values())

    if mode == MODE_ORIGINAL:
        order = rng.permutation(len(pool))
        for i in order:
            seq = pool[int(i)]
            restricted = region_restrict(seq.pois, region_map)
            if restricted is not None:
                region, filtered = restricted
                key = tuple(filtered)
                if len(geo[region].sequences) < v_r and key not in geo_keys[region]:
                    geo_keys[region].add(key)
                    geo[region].sequences.append(filtered)
                    geo[region].categories.append(cats_of(filtered))
            if len(sem_seqs) < z and tuple(seq.categories) not in sem_keys:
                sem_keys.add(tuple(seq.categories))
                sem_seqs.append(list(seq.categories))

    elif mode == MODE_TRANSFORMATIVE:
        eligible = []
        for a in range(len(pool)):
            for b in range(a + 1, len(pool)):
                sa, sb = pool[a], pool[b]
                if graph is not None and not graph.are_friends(sa.user_id, sb.user_id):
                    continue
                if set(sa.pois) & set(sb.pois):
                    eligible.append((a, b))
        budget = budget_factor * (len(geo) * v_r + z)
        attempts = 0
        while eligible and attempts < budget and not (geo_done() and len(sem_seqs) >= z):
            attempts += 1
            a, b = eligible[int(rng.integers(len(eligible)))]
            made = transformative_pair(pool[a].pois, pool[b].pois, rng)
            if made is not None:
                for new_seq in made:
                    try_add_geo(new_seq, anonymity=True)
            made_cats = transformative_pair(pool[a].categories, pool[b].categories, rng)
            if made_cats is not None:
                for new_cats in made_cats:
                    try_add_sem(new_cats, anonymity=True)

    # probabilistic generation: primary strategy, or top-up for the others
    if mode == MODE_PROBABILISTIC or (allow_topup and (not geo_done() or len(sem_seqs) < z)):
        anonymity = mode != MODE_ORIGINAL
        guard = budget_factor * max(1, z)
        while len(sem_seqs) < z and guard > 0:
            guard -= 1
            # distinct sequences preferred; once the chain space is visibly
            # exhausted (tiny vocabularies, near-deterministic transitions),
            # duplicates are acceptable
            unique = guard > budget_factor * z // 2
            try_add_sem(probabilistic_cat_seq(tm, gen_len, rng), anonymity, unique)
        if len(sem_seqs) < z:
            raise GenerationError(f"category reference set stuck at {len(sem_seqs)}/{z}")
        coords = np.array([[p.lon, p.lat] for p in pois], dtype=float)
        for region in sorted(geo):
            gset = geo[region]
            by_cat = _pois_by_cat_in_region(region_map.regions[region].poi_ids, pois)
            masked = _masked_matrix(tm, set(by_cat))
            budget = budget_factor * max(1, v_r)
            attempts = 0
            while len(gset.sequences) < v_r and attempts < budget:
                attempts += 1
                # draw the category source from the universal set first; fall
                # back to a region-masked chain once failures accumulate
                if attempts <= budget // 2:
                    cat_seq = sem_seqs[int(rng.integers(len(sem_seqs)))][:gen_len]
                else:
                    cat_seq = probabilistic_cat_seq(masked, gen_len, rng)
                made = probabilistic_poi_seq(cat_seq, by_cat, coords, max_hop_km, rng)
                if made is None:
                    continue
                try_add_geo(made, anonymity, unique=attempts <= budget * 3 // 4)
        underfilled = [r for r, g in geo.items() if len(g.sequences) < v_r]
        if underfilled:
            raise GenerationError(
                "reference generation exhausted its budget for regions "
                f"{underfilled} (have {[len(geo[r].sequences) for r in underfilled]}, want {v_r})")
    elif not geo_done() or len(sem_seqs) < z:
        underfilled = [r for r, g in geo.items() if len(g.sequences) < v_r]
        raise GenerationError(
            f"transformative generation under-filled regions {underfilled} "
            f"and/or the category set ({len(sem_seqs)}/{z}) with top-up disabled")

    sem_seqs = _ensure_sem_coverage(sem_seqs, n_categories, tm, gen_len, rng)
    return geo, SemReferenceSet(sequences=sem_seqs)
