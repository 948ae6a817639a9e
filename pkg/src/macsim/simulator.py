"""Synchronous-round simulation of decentralized collaborative training.

One round has three phases: every device publishes fresh soft-decision
bundles computed from round-start parameters; every device then gathers the
bundles of its current active neighbors and takes minibatch SGD steps on the
combined objective over one pass of its local data; finally each device
refreshes its active neighbor subsets according to its sampling mode.

The server acts exactly once, before any round: it turns uploaded summaries
into neighbor sets, generates the reference datasets and hands each device
its package. Devices afterwards exchange nothing but bundles through the
BundleBoard, which is the single instrumentable point for information-flow
and communication-cost audits.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import neighbors
from .collab import (
    KIND_GEO,
    KIND_SEM,
    SoftDecisionBundle,
    bundle_size_bytes,
    compute_bundle,
    distill_loss_terms,
    loss_mi,
    make_distill_target,
)
from .data import CheckinSequence, SplitDataset
from .geo import RegionMap, candidate_set
from .metrics import evaluate_device
from .neighbors import NeighborState, UserSummary
from .recommender import (
    DeviceModel,
    GradientSet,
    NumericalError,
    _backward_step,
    ce_dscores,
    device_context,
    local_loss,
    sgd_step,
)
from .refdata import GeoReferenceSet, SemReferenceSet, build_refsets

log = logging.getLogger(__name__)

SAMPLING_PERFORMANCE = "performance"
SAMPLING_SIMILARITY = "similarity"
SAMPLING_NONE = "none"


@dataclass
class ServerState:
    summaries: dict[int, UserSummary]
    neighbor_geo: dict[int, list[int]]
    neighbor_sem: dict[int, list[int]]
    geo_refs: dict[int, GeoReferenceSet]
    sem_ref: SemReferenceSet


@dataclass
class DevicePackage:
    user_id: int
    current_region: int
    geo_neighbors: list[int]
    sem_neighbors: list[int]
    geo_refs: dict[int, GeoReferenceSet]  # one per region the device stores
    sem_ref: SemReferenceSet


def make_summaries(split: SplitDataset, region_map: RegionMap,
                   n_categories: int) -> dict[int, UserSummary]:
    """Per-user uploads computed from training data only: visited regions with
    the current one (region of the last training check-in) first, plus the
    smoothed category-preference distribution."""
    out: dict[int, UserSummary] = {}
    for uid, seq in split.train.items():
        regions = [region_map.poi_to_region[p] for p in seq.pois]
        current = regions[-1]
        ordered = [current]
        for r in reversed(regions):
            if r not in ordered:
                ordered.append(r)
        out[uid] = UserSummary(
            user_id=uid,
            visited_regions=ordered,
            category_distribution=neighbors.category_distribution(
                seq.categories, n_categories),
        )
    return out


class Server:
    """One-off coordinator. After run_phase returns, the instance is sealed
    and any further engagement raises."""

    def __init__(self):
        self.sealed = False
        self.engagements = 0

    def _engage(self) -> None:
        self.engagements += 1
        if self.sealed:
            raise RuntimeError("server engaged after its one-off setup phase")

    def run_phase(self, summaries: dict[int, UserSummary], pool, graph,
                  region_map: RegionMap, pois, n_categories: int, h: int,
                  refgen: str, v_r: int, z: int, gen_seq_len: int,
                  max_hop_km: float, seed: int):
        """Identify neighbors, generate reference data and build per-device
        packages. Returns (ServerState, packages). The server never sees an
        evaluation user's raw sequence, only summaries and the withheld pool.
        """
        self._engage()
        geo_map = neighbors.identify_geo_neighbors(summaries)
        sem_map = neighbors.identify_sem_neighbors(summaries, h, graph)
        geo_refs, sem_ref = build_refsets(
            refgen, pool, graph, region_map, pois, n_categories,
            v_r, z, gen_seq_len, max_hop_km, seed)
        state = ServerState(summaries=summaries, neighbor_geo=geo_map,
                            neighbor_sem=sem_map, geo_refs=geo_refs, sem_ref=sem_ref)
        packages = {}
        for uid, summary in summaries.items():
            packages[uid] = DevicePackage(
                user_id=uid,
                current_region=summary.current_region,
                geo_neighbors=geo_map[uid],
                sem_neighbors=sem_map[uid],
                geo_refs={r: geo_refs[r] for r in summary.visited_regions},
                sem_ref=sem_ref,
            )
        self.sealed = True
        return state, packages


class BundleBoard:
    """In-process message bus carrying nothing but soft-decision bundles."""

    def __init__(self):
        self._geo: dict[tuple[int, int], SoftDecisionBundle] = {}
        self._sem: dict[int, SoftDecisionBundle] = {}

    def publish(self, uid: int, geo_bundles: dict[int, SoftDecisionBundle],
                sem_bundle: SoftDecisionBundle) -> None:
        for region, b in geo_bundles.items():
            self._geo[(uid, region)] = b
        self._sem[uid] = sem_bundle

    def fetch_geo(self, receiver: int, owner: int, region: int) -> SoftDecisionBundle | None:
        return self._geo.get((owner, region))

    def fetch_sem(self, receiver: int, owner: int) -> SoftDecisionBundle | None:
        return self._sem.get(owner)


@dataclass
class Hyper:
    gamma: float = 0.5
    mu: float = 0.7
    tau_pct: float = 1.0
    alpha: int = 5
    beta: int = 10
    lr: float = 0.002
    batch_size: int = 16
    sampling: str = SAMPLING_PERFORMANCE


class Device:
    """Holds everything one simulated device owns: its model, its own data,
    its neighbor state and its copies of the reference sets."""

    def __init__(self, uid: int, model: DeviceModel, train_seq: CheckinSequence,
                 valid_poi: int, test_poi: int, package: DevicePackage,
                 region_map: RegionMap, hyper: Hyper, sample_seed):
        self.uid = uid
        self.model = model
        self.train_seq = train_seq
        self.valid_poi = valid_poi
        self.test_poi = test_poi
        self.region_map = region_map
        self.hyper = hyper
        self.current_region = package.current_region
        self.geo_refs = package.geo_refs
        self.sem_ref = package.sem_ref
        self.state = NeighborState(
            geo_full=list(package.geo_neighbors),
            sem_full=list(package.sem_neighbors),
        )
        self.sample_rng = np.random.default_rng(sample_seed)
        self.mi_pairs = sorted({(p, c) for p, c in zip(train_seq.pois, train_seq.categories)})
        self.loss_history: list[float] = []
        self.frozen = False
        self.frozen_at: int | None = None
        self.best_val = -np.inf
        self.bad_epochs = 0
        self.last_geo_bundle: SoftDecisionBundle | None = None
        self.last_sem_bundle: SoftDecisionBundle | None = None
        # similarity mode ranks candidates by the most recent decisions it has
        # seen from them; the cache refreshes as the probe window rotates
        self._geo_seen: dict[int, list[np.ndarray]] = {}
        self._sem_seen: dict[int, list[np.ndarray]] = {}
        self._init_actives()

    def _init_actives(self) -> None:
        k = {SAMPLING_PERFORMANCE: self.hyper.alpha,
             SAMPLING_SIMILARITY: self.hyper.beta}.get(self.hyper.sampling)
        if k is None:  # no sampling: always talk to the full sets
            self.state.geo_active = sorted(self.state.geo_full)
            self.state.sem_active = sorted(self.state.sem_full)
        else:
            self.state.geo_active = neighbors.sample_active(self.state.geo_full, k, self.sample_rng)
            self.state.sem_active = neighbors.sample_active(self.state.sem_full, k, self.sample_rng)

    # --- phase 1 -----------------------------------------------------------
    def publish(self, round_idx: int):
        """Fresh bundles from current (round-start) parameters, one geo bundle
        per stored region plus the semantic bundle."""
        with device_context(self.uid):
            geo = {r: compute_bundle(self.model, ref, KIND_GEO, round_idx)
                   for r, ref in sorted(self.geo_refs.items())}
            sem = compute_bundle(self.model, self.sem_ref, KIND_SEM, round_idx)
        self.last_geo_bundle = geo.get(self.current_region)
        self.last_sem_bundle = sem
        return geo, sem

    # --- phase 2 -----------------------------------------------------------
    def pull_lists(self, round_idx: int) -> tuple[list[int], list[int]]:
        """Which neighbors' bundles this device fetches this round."""
        mode = self.hyper.sampling
        if mode == SAMPLING_NONE:
            return sorted(self.state.geo_full), sorted(self.state.sem_full)
        if mode == SAMPLING_PERFORMANCE:
            return list(self.state.geo_active), list(self.state.sem_active)
        # similarity mode: actives for training plus a rotating probe window,
        # so the distance ranking can move members in and out without
        # fetching every full-set bundle every round
        geo = set(self.state.geo_active) | set(self._probe(self.state.geo_full, round_idx))
        sem = set(self.state.sem_active) | set(self._probe(self.state.sem_full, round_idx))
        return sorted(geo), sorted(sem)

    def _probe(self, pool: list[int], round_idx: int) -> list[int]:
        n = len(pool)
        if n == 0:
            return []
        ordered = sorted(pool)
        start = (round_idx * self.hyper.beta) % n
        return [ordered[(start + i) % n] for i in range(min(self.hyper.beta, n))]

    def train_round(self, geo_bundles: dict[int, SoftDecisionBundle],
                    sem_bundles: dict[int, SoftDecisionBundle],
                    round_idx: int) -> dict:
        """One full pass over the local sequence in minibatches; every step
        descends the combined objective with neighbor decisions as constants.
        """
        h = self.hyper
        w_geo = h.gamma * h.mu
        w_sem = h.gamma * (1.0 - h.mu)
        geo_target = sem_target = None
        if w_geo > 0.0:
            teachers = [geo_bundles[u] for u in self.state.geo_active if u in geo_bundles]
            if not teachers:
                log.warning("device %d: no geo teachers this round", self.uid)
            geo_target = make_distill_target(teachers)
        if w_sem > 0.0:
            teachers = [sem_bundles[u] for u in self.state.sem_active if u in sem_bundles]
            if not teachers:
                log.warning("device %d: no semantic teachers this round", self.uid)
            sem_target = make_distill_target(teachers)

        seq = self.train_seq.pois
        positions = list(range(1, len(seq)))
        sums = {"l_loc": 0.0, "l_geo": 0.0, "l_cat": 0.0, "l_mi": 0.0, "combined": 0.0}
        n_batches = 0
        geo_ref = self.geo_refs[self.current_region]
        with device_context(self.uid):
            for ofs in range(0, len(positions), h.batch_size):
                batch = positions[ofs:ofs + h.batch_size]
                collected: list = []
                l_loc = local_loss(self.model, seq, self.region_map,
                                   train_mode=True, positions=batch, collect=collected)
                terms = [(trace, ce_dscores(trace, ti, 1.0 / len(batch)))
                         for trace, ti in collected]
                l_geo = distill_loss_terms(self.model, geo_ref, KIND_GEO,
                                           geo_target, w_geo, terms) if geo_target else 0.0
                l_cat = distill_loss_terms(self.model, self.sem_ref, KIND_SEM,
                                           sem_target, w_sem, terms) if sem_target else 0.0
                grads = GradientSet(self.model)
                for trace, dz in terms:
                    _backward_step(trace, dz, grads)
                l_mi = loss_mi(self.model, self.mi_pairs, w_sem, grads) if w_sem > 0.0 else 0.0
                grads.check_finite()
                sgd_step(self.model, grads, h.lr)
                sums["l_loc"] += l_loc
                sums["l_geo"] += l_geo
                sums["l_cat"] += l_cat
                sums["l_mi"] += l_mi
                sums["combined"] += l_loc + h.gamma * (h.mu * l_geo + (1 - h.mu) * (l_cat + l_mi))
                n_batches += 1
        out = {k: v / n_batches for k, v in sums.items()}
        self.loss_history.append(out["l_loc"])
        return out

    # --- phase 3 -----------------------------------------------------------
    def update_actives(self, geo_bundles: dict[int, SoftDecisionBundle],
                       sem_bundles: dict[int, SoftDecisionBundle]) -> bool:
        mode = self.hyper.sampling
        if mode == SAMPLING_NONE:
            return False
        before = (list(self.state.geo_active), list(self.state.sem_active))
        if mode == SAMPLING_PERFORMANCE:
            if len(self.loss_history) < 2:
                # first epoch always redraws fresh samples
                self.state.geo_active = neighbors.sample_active(
                    self.state.geo_full, self.hyper.alpha, self.sample_rng)
                self.state.sem_active = neighbors.sample_active(
                    self.state.sem_full, self.hyper.alpha, self.sample_rng)
                resampled = True
            else:
                resampled = neighbors.perf_triggered_resample(
                    self.state, self.loss_history[-2], self.loss_history[-1],
                    self.hyper.tau_pct, self.hyper.alpha, self.sample_rng)
        else:
            own_geo = self.last_geo_bundle
            own_sem = self.last_sem_bundle
            for u, b in geo_bundles.items():
                self._geo_seen[u] = b.per_sequence
            for u, b in sem_bundles.items():
                self._sem_seen[u] = b.per_sequence
            if own_geo is not None and self._geo_seen:
                pool = sorted(set(self.state.geo_full) & set(self._geo_seen))
                self.state.geo_active = neighbors.similarity_sample(
                    own_geo.per_sequence, self._geo_seen, pool, self.hyper.beta)
            if own_sem is not None and self._sem_seen:
                pool = sorted(set(self.state.sem_full) & set(self._sem_seen))
                self.state.sem_active = neighbors.similarity_sample(
                    own_sem.per_sequence, self._sem_seen, pool, self.hyper.beta)
            resampled = (list(self.state.geo_active), list(self.state.sem_active)) != before
        return resampled

    # --- validation / early stopping ---------------------------------------
    def validate_hr10(self, coords, n_candidates: int) -> int:
        prefix = self.train_seq.pois
        anchor = coords[prefix[-1]]
        cands = candidate_set(self.valid_poi, set(prefix), anchor, coords,
                              self.region_map, n_candidates)
        with device_context(self.uid):
            result = evaluate_device(self.model, prefix, self.valid_poi, cands)
        return result.hr10

    def note_validation(self, value: float, round_idx: int, patience: int) -> None:
        if value > self.best_val:
            self.best_val = value
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= patience:
                self.frozen = True
                self.frozen_at = round_idx

    def evaluate_test(self, coords, n_candidates: int):
        """Final leave-one-out evaluation: the prediction prefix is the full
        history before the test check-in (training part plus the validation
        check-in), anchored at its last position."""
        prefix = self.train_seq.pois + [self.valid_poi]
        anchor = coords[prefix[-1]]
        cands = candidate_set(self.test_poi, set(prefix), anchor, coords,
                              self.region_map, n_candidates)
        with device_context(self.uid):
            return evaluate_device(self.model, prefix, self.test_poi, cands)


def run_round(devices: dict[int, "Device"], board: BundleBoard,
              round_idx: int) -> list[dict]:
    """Execute one synchronous round; returns one log record per device that
    trained. Frozen devices keep publishing so their neighbors retain
    teachers, but do not train, fetch or resample."""
    order = sorted(devices)
    for uid in order:
        geo, sem = devices[uid].publish(round_idx)
        board.publish(uid, geo, sem)
    records = []
    for uid in order:
        dev = devices[uid]
        if dev.frozen:
            continue
        geo_pull, sem_pull = dev.pull_lists(round_idx)
        geo_bundles = {}
        for owner in geo_pull:
            b = board.fetch_geo(uid, owner, dev.current_region)
            if b is not None:
                geo_bundles[owner] = b
        sem_bundles = {}
        for owner in sem_pull:
            b = board.fetch_sem(uid, owner)
            if b is not None:
                sem_bundles[owner] = b
        bytes_in = sum(bundle_size_bytes(b) for b in geo_bundles.values())
        bytes_in += sum(bundle_size_bytes(b) for b in sem_bundles.values())
        try:
            losses = dev.train_round(geo_bundles, sem_bundles, round_idx)
        except NumericalError as exc:
            raise NumericalError(f"round {round_idx}, device {uid}: {exc}") from exc
        resampled = dev.update_actives(geo_bundles, sem_bundles)
        records.append({
            "round": round_idx,
            "user": uid,
            "l_loc": losses["l_loc"],
            "l_geo": losses["l_geo"],
            "l_cat": losses["l_cat"],
            "l_mi": losses["l_mi"],
            "combined": losses["combined"],
            "bytes_in": bytes_in,
            "resampled": bool(resampled),
        })
    return records


def run_until_converged(devices: dict[int, "Device"], board: BundleBoard,
                        coords, n_candidates: int, max_epochs: int,
                        patience: int) -> tuple[list[dict], int]:
    """Round loop with per-device early stopping on validation HR@10.

    A device freezes after `patience` consecutive epochs without improvement;
    frozen devices keep publishing. Stops at max_epochs or when every device
    is frozen. Returns (all log records, rounds executed).
    """
    records: list[dict] = []
    rounds_run = 0
    for round_idx in range(max_epochs):
        if all(d.frozen for d in devices.values()):
            break
        records.extend(run_round(devices, board, round_idx))
        rounds_run += 1
        for uid in sorted(devices):
            dev = devices[uid]
            if dev.frozen:
                continue
            hr = dev.validate_hr10(coords, n_candidates)
            dev.note_validation(hr, round_idx, patience)
    return records, rounds_run
