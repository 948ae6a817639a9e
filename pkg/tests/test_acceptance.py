"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
lines as they complete. The trend criteria (6, 7) train 100-device worlds and
take a few minutes; everything is seeded and deterministic.
"""

import math
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest

from conftest import numeric_grads, toy_model, toy_region_map
from test_simulator import RecordingBoard
from worlds import build_world

from macsim.collab import (
    KIND_GEO,
    KIND_SEM,
    SoftDecisionBundle,
    distill_loss_terms,
    loss_mi,
    make_distill_target,
)
from macsim.config import ExperimentConfig
from macsim.data import SocialGraph
from macsim.experiment import run_experiment
from macsim.geo import haversine_km
from macsim.metrics import evaluate_device, hr_at_k, ndcg_at_k, rank_of_target
from macsim.neighbors import (
    NeighborState,
    UserSummary,
    identify_geo_neighbors,
    identify_sem_neighbors,
    kl_divergence,
    perf_triggered_resample,
)
from macsim.recommender import (
    GradientSet,
    PrivacyError,
    _backward_step,
    ce_dscores,
    device_context,
    forward_poi,
    local_loss,
)
from macsim.refdata import SemReferenceSet, GeoReferenceSet, build_refsets, transition_matrix
from macsim.simulator import run_round, run_until_converged
from macsim.synth import CityConfig, write_city


@contextmanager
def criterion(num: int, name: str):
    """Wrap one criterion; prints its pass/fail line (live under -s)."""
    start = time.time()
    try:
        yield
    except Exception:
        print(f"\n[acceptance] criterion {num:2d} ({name}): FAIL "
              f"({time.time() - start:.1f}s)")
        raise
    print(f"\n[acceptance] criterion {num:2d} ({name}): PASS "
          f"({time.time() - start:.1f}s)")


# --------------------------------------------------------------------------
# 1. gradient oracle
# --------------------------------------------------------------------------

def _grad_arrays(model, grads):
    poi, _ = grads.poi_array()
    return {"poi_emb": poi, "cat_emb": grads.cat, "mi_matrix": grads.w}


def _toy_losses(model, rmap, rng):
    """The five scalar losses of one toy instance plus their analytic
    gradients, mirroring one combined training step."""
    seq = [0, 1, 2, 4, 3]
    ids0 = model.region_ids[0]
    geo_ref = GeoReferenceSet(region_id=0, sequences=[[ids0[0], ids0[1]],
                                                      [ids0[2], ids0[0]]],
                              categories=[[0, 1], [1, 0]])
    sem_ref = SemReferenceSet(sequences=[[0, 1, 2], [2, 0]])
    support = len(ids0)
    geo_target = make_distill_target([
        SoftDecisionBundle(owner=90 + j, ref_kind=KIND_GEO, region_id=0, round=0,
                           per_sequence=[rng.dirichlet(np.ones(support)) for _ in range(2)])
        for j in range(2)])
    sem_target = make_distill_target([
        SoftDecisionBundle(owner=95 + j, ref_kind=KIND_SEM, region_id=None, round=0,
                           per_sequence=[rng.dirichlet(np.ones(model.n_categories))
                                         for _ in range(2)])
        for j in range(2)])
    mi_pairs = [(0, 0), (3, 2), (1, 1)]
    gamma, mu = 0.5, 0.7

    def value(which):
        if which == "loc":
            return local_loss(model, seq, rmap)
        if which == "geo":
            return distill_loss_terms(model, geo_ref, KIND_GEO, geo_target, 1.0, [])
        if which == "cat":
            return distill_loss_terms(model, sem_ref, KIND_SEM, sem_target, 1.0, [])
        if which == "mi":
            return loss_mi(model, mi_pairs)
        l_loc = local_loss(model, seq, rmap)
        l_geo = distill_loss_terms(model, geo_ref, KIND_GEO, geo_target, 1.0, [])
        l_cat = distill_loss_terms(model, sem_ref, KIND_SEM, sem_target, 1.0, [])
        l_mi = loss_mi(model, mi_pairs)
        return l_loc + gamma * (mu * l_geo + (1 - mu) * (l_cat + l_mi))

    def analytic(which):
        grads = GradientSet(model)
        if which in ("loc", "combined"):
            collected = []
            local_loss(model, seq, rmap, collect=collected)
            w = 1.0 / len(collected)
            for trace, ti in collected:
                _backward_step(trace, ce_dscores(trace, ti, w), grads)
        if which in ("geo", "combined"):
            terms = []
            w = gamma * mu if which == "combined" else 1.0
            distill_loss_terms(model, geo_ref, KIND_GEO, geo_target, w, terms)
            for trace, dz in terms:
                _backward_step(trace, dz, grads)
        if which in ("cat", "combined"):
            terms = []
            w = gamma * (1 - mu) if which == "combined" else 1.0
            distill_loss_terms(model, sem_ref, KIND_SEM, sem_target, w, terms)
            for trace, dz in terms:
                _backward_step(trace, dz, grads)
        if which in ("mi", "combined"):
            w = gamma * (1 - mu) if which == "combined" else 1.0
            loss_mi(model, mi_pairs, w, grads)
        return _grad_arrays(model, grads)

    return value, analytic


def test_c01_gradient_oracle():
    with criterion(1, "gradient oracle"):
        start = time.time()
        dims = [2, 4, 8]
        for seed in range(100):
            d = dims[seed % 3]
            model = toy_model(seed=seed, d=d, n_pois=6, n_regions=2, n_cats=3)
            rmap = toy_region_map(model.region_ids)
            rng = np.random.default_rng(seed + 10_000)
            value, analytic = _toy_losses(model, rmap, rng)
            for which in ("loc", "geo", "cat", "mi", "combined"):
                got = analytic(which)
                want = numeric_grads(model, lambda: value(which))
                for name in ("poi_emb", "cat_emb", "mi_matrix"):
                    np.testing.assert_allclose(
                        got[name], want[name], rtol=1e-4, atol=1e-7,
                        err_msg=f"seed {seed} d={d} loss {which} tensor {name}")
        assert time.time() - start < 60.0


# --------------------------------------------------------------------------
# 2. KL and metric oracles
# --------------------------------------------------------------------------

def _brute_kl(p, q):
    total = 0.0
    for a, b in zip(p, q):
        if a > 0.0:
            total += a * math.log(a / b)
    return total


def _brute_rank(scores, target_index):
    order = sorted(range(len(scores)),
                   key=lambda i: (-scores[i], 1 if i == target_index else 0, i))
    return order.index(target_index) + 1


def test_c02_kl_and_metric_oracles():
    with criterion(2, "KL and metric oracles"):
        rng = np.random.default_rng(2024)
        for _ in range(1000):
            n = int(rng.integers(2, 12))
            p = rng.dirichlet(np.ones(n))
            q = rng.dirichlet(np.ones(n)) + 1e-9
            q = q / q.sum()
            assert abs(kl_divergence(p, q) - _brute_kl(p, q)) <= 1e-9
        for _ in range(1000):
            n = int(rng.integers(1, 25))
            scores = rng.integers(0, 6, size=n).astype(float)
            t = int(rng.integers(n))
            rank = rank_of_target(scores, t)
            assert rank == _brute_rank(scores, t)
            for k in (5, 10):
                assert hr_at_k(rank, k) == (1 if rank <= k else 0)
                expected_ndcg = 1.0 / math.log2(rank + 1) if rank <= k else 0.0
                assert ndcg_at_k(rank, k) == pytest.approx(expected_ndcg, abs=1e-12)
        models = [toy_model(seed=s, d=2, n_pois=8, n_regions=1, n_cats=3)
                  for s in range(10)]
        for i in range(1000):
            model = models[i % 10]
            prefix = [int(rng.integers(8)) for _ in range(int(rng.integers(1, 4)))]
            k = int(rng.integers(2, 9))
            cands = [int(c) for c in rng.permutation(8)[:k]]
            target = cands[int(rng.integers(k))]
            res = evaluate_device(model, prefix, target, cands)
            probs = forward_poi(model, prefix, cands).probs
            assert res.rank == _brute_rank(probs, cands.index(target))
            assert res.hr10 == hr_at_k(res.rank, 10)
            assert res.ndcg5 == pytest.approx(ndcg_at_k(res.rank, 5), abs=1e-12)


# --------------------------------------------------------------------------
# 3. neighbor identification fixture
# --------------------------------------------------------------------------

def test_c03_neighbor_identification_fixture():
    with criterion(3, "neighbor identification"):
        dists = {
            0: [0.80, 0.10, 0.10],
            1: [0.79, 0.11, 0.10],
            2: [0.70, 0.20, 0.10],
            3: [0.10, 0.80, 0.10],
            4: [0.10, 0.10, 0.80],
            5: [0.05, 0.05, 0.90],
        }
        regions = {0: [0], 1: [1, 0], 2: [0, 1], 3: [1], 4: [2], 5: [0, 2]}
        summaries = {
            u: UserSummary(user_id=u, visited_regions=regions[u],
                           category_distribution=np.array(dists[u]))
            for u in range(6)
        }
        geo = identify_geo_neighbors(summaries)
        assert geo == {
            0: [1, 2, 5],
            1: [2, 3],
            2: [0, 1, 5],
            3: [1, 2],
            4: [5],
            5: [0, 1, 2],
        }
        # the directional case: u5 visited u4's current region, not vice versa
        assert 5 in geo[4] and 4 not in geo[5]

        graph = SocialGraph()
        graph.add_edge(0, 5)  # friend with maximal preference distance
        sem = identify_sem_neighbors(summaries, h=2, graph=graph)

        def brute_top2(ui):
            scored = sorted(
                (_brute_kl(dists[ui], dists[uj]), uj)
                for uj in range(6) if uj != ui)
            return {uj for _, uj in scored[:2]}

        for u in range(6):
            expected = brute_top2(u) | ({5} if u == 0 else set()) | ({0} if u == 5 else set())
            assert sem[u] == sorted(expected), f"user {u}"
        assert sem[0] == [1, 2, 5]  # forced-friend inclusion despite max KL


# --------------------------------------------------------------------------
# 4. performance-trigger boundary pinning
# --------------------------------------------------------------------------

def test_c04_resample_boundaries():
    with criterion(4, "resampling boundary pinning"):
        rng = np.random.default_rng(0)

        def state():
            return NeighborState(geo_full=list(range(1, 30)),
                                 sem_full=list(range(40, 60)),
                                 geo_active=[1, 2], sem_active=[40, 41])

        # tau = 0%: never after the first epoch
        s = state()
        for prev, curr in [(1.0, 0.9), (0.9, 0.9), (0.9, 0.90001)]:
            assert not perf_triggered_resample(s, prev, curr, 0.0, 5, rng)
        # tau = 100%: every epoch
        s = state()
        for prev, curr in [(1.0, 0.999), (0.999, 0.5), (0.5, 0.9)]:
            assert perf_triggered_resample(s, prev, curr, 100.0, 5, rng)
        # pinned example pairs at tau = 1%
        assert perf_triggered_resample(state(), 1.0, 0.999, 1.0, 5, rng)
        assert not perf_triggered_resample(state(), 1.0, 0.5, 1.0, 5, rng)


# --------------------------------------------------------------------------
# 5. reference-data invariants on a 200-user synthetic city
# --------------------------------------------------------------------------

@pytest.fixture(scope="module")
def ref_city(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("refcity")
    city = CityConfig(n_users=200, n_regions=2, pois_per_region=40, n_categories=8,
                      seq_len=16, derail_prob=0.05, friends_per_user=5, seed=11)
    write_city(tmp, city)
    from worlds import small_config
    from macsim.experiment import ingest
    cfg = small_config(tmp / "checkins.csv", tmp / "friends.csv",
                       min_interactions=3, reference_fraction=0.10, k_regions=2,
                       v_r=10, z=20, gen_seq_len=8)
    table, split, graph, region_map = ingest(cfg)
    return cfg, table, split, graph, region_map


@pytest.mark.parametrize("mode", ["transformative", "probabilistic"])
def test_c05_reference_data_invariants(ref_city, mode):
    with criterion(5, f"reference-data invariants ({mode})"):
        cfg, table, split, graph, region_map = ref_city
        pool = split.reference_pool
        geo, sem = build_refsets(mode, pool, graph, region_map, table.pois,
                                 len(table.categories), cfg.v_r, cfg.z,
                                 cfg.gen_seq_len, cfg.max_hop_km, seed=5)
        coords = table.coords()
        pool_poi_keys = {tuple(s.pois) for s in pool}
        pool_cat_keys = {tuple(s.categories) for s in pool}
        for r, gset in geo.items():
            assert len(gset.sequences) == cfg.v_r
            for seq in gset.sequences:
                # region purity
                assert all(region_map.poi_to_region[p] == r for p in seq)
                # anonymity audit
                assert tuple(seq) not in pool_poi_keys
                if mode == "probabilistic":
                    for a, b in zip(seq, seq[1:]):
                        assert haversine_km(coords[a], coords[b]) < cfg.max_hop_km
        assert len(sem.sequences) == cfg.z
        covered = {c for s in sem.sequences for c in s}
        assert covered == set(range(len(table.categories)))
        for seq in sem.sequences:
            assert tuple(seq) not in pool_cat_keys
        tm = transition_matrix([s.categories for s in pool], len(table.categories))
        np.testing.assert_allclose(tm.probs.sum(axis=1), 1.0, atol=1e-9)
        assert np.all(tm.probs >= 0.0)


# --------------------------------------------------------------------------
# 6 & 7. trend criteria on the planted-structure city
# --------------------------------------------------------------------------

def _planted_city(tmp: Path, seed: int, noise: float) -> CityConfig:
    city = CityConfig(n_users=100, n_regions=2, pois_per_region=40, n_categories=8,
                      seq_len=16, derail_prob=0.02, noise_frac=noise,
                      friends_per_user=5, seed=seed)
    out = tmp / f"city{seed}_{noise}"
    if not (out / "checkins.csv").exists():
        write_city(out, city)
    return out


def _planted_config(city_dir: Path, seed: int, gamma: float, sampling: str) -> ExperimentConfig:
    cfg = ExperimentConfig(
        checkins=str(city_dir / "checkins.csv"),
        friends=str(city_dir / "friends.csv"),
        min_interactions=2, max_seq_len=200, reference_fraction=0.15,
        k_regions=2, n_candidates=200, dims={16: 1.0}, dropout=0.2,
        lr=0.7, batch_size=16, gamma=gamma, mu=0.7, h=20, alpha=5, beta=10,
        tau_pct=1.0, sampling=sampling, refgen="transformative",
        v_r=48, z=12, gen_seq_len=2, max_epochs=60, patience=60, seed=seed)
    cfg.validate()
    return cfg


def _run_planted(tmp: Path, seed: int, gamma: float, sampling: str, noise: float):
    city_dir = _planted_city(tmp, seed, noise)
    cfg = _planted_config(city_dir, seed, gamma, sampling)
    out = tmp / f"out_{seed}_{gamma}_{sampling}_{noise}"
    report = run_experiment(cfg, out)
    return (report.payload["results"]["hr10"],
            report.payload["total_bytes_exchanged"])


def test_c06_collaboration_benefit_trend(tmp_path):
    with criterion(6, "collaboration benefit trend"):
        start = time.time()
        gaps = []
        for seed in range(5):
            hr_solo, _ = _run_planted(tmp_path, seed, 0.0, "performance", 0.0)
            hr_collab, _ = _run_planted(tmp_path, seed, 0.5, "performance", 0.0)
            gaps.append(hr_collab - hr_solo)
        mean_gap = float(np.mean(gaps))
        elapsed = time.time() - start
        print(f"\n  per-seed gaps (pp): {[round(100 * g, 1) for g in gaps]}, "
              f"mean {100 * mean_gap:.1f}pp, {elapsed:.0f}s")
        assert mean_gap >= 0.05, f"mean HR@10 gap {100 * mean_gap:.1f}pp < 5pp"
        assert elapsed < 600.0


def test_c07_sampling_benefit_trend(tmp_path):
    with criterion(7, "sampling benefit trend"):
        seeds = (0, 1)
        results = {}
        for sampling in ("none", "performance", "similarity"):
            hrs, bts = [], []
            for seed in seeds:
                hr, b = _run_planted(tmp_path, seed, 0.5, sampling, noise=0.2)
                hrs.append(hr)
                bts.append(b)
            results[sampling] = (float(np.mean(hrs)), float(np.mean(bts)))
        hr_none, bytes_none = results["none"]
        for sampling in ("performance", "similarity"):
            hr, byt = results[sampling]
            print(f"\n  {sampling}: HR {hr:.3f} vs {hr_none:.3f} "
                  f"({100 * (hr - hr_none):+.1f}pp), bytes {100 * byt / bytes_none:.0f}%")
            assert hr >= hr_none - 0.01, f"{sampling} lost more than 1pp"
            assert byt <= 0.5 * bytes_none, f"{sampling} exchanged more than 50% of bytes"


# --------------------------------------------------------------------------
# 8. heterogeneity smoke test
# --------------------------------------------------------------------------

def test_c08_heterogeneous_dimensions(tmp_path):
    with criterion(8, "heterogeneous dimensions"):
        w = build_world(tmp_path, city_overrides={"n_users": 30, "seq_len": 14},
                        dims={8: 0.2, 16: 0.2, 32: 0.2, 64: 0.2, 128: 0.2},
                        max_epochs=2, patience=2)
        board = RecordingBoard()
        records, rounds = run_until_converged(
            w["devices"], board, w["coords"], w["cfg"].n_candidates,
            max_epochs=2, patience=2)
        assert rounds == 2
        dim_of = {uid: dev.model.dim for uid, dev in w["devices"].items()}
        assert set(dim_of.values()) == {8, 16, 32, 64, 128}
        # devices of different dimensionality exchanged bundles
        cross = [(r, o) for kind, r, o, _, _ in board.events
                 if kind == "fetch" and dim_of[r] != dim_of[o]]
        assert cross, "no cross-dimension bundle exchange happened"
        # mean model size strictly increases with the latent dimension
        from macsim.recommender import model_size_bytes
        sizes = {}
        for uid, dev in w["devices"].items():
            sizes.setdefault(dim_of[uid], []).append(model_size_bytes(dev.model))
        means = [float(np.mean(sizes[d])) for d in sorted(sizes)]
        assert all(a < b for a, b in zip(means, means[1:]))
        # end-to-end run completes and reports per-dimension buckets
        cfg = w["cfg"]
        report = run_experiment(cfg, tmp_path / "hetero_out")
        per_dim = report.payload["per_dim"]
        assert list(per_dim) == ["8", "16", "32", "64", "128"]
        bucket_means = [per_dim[k]["mean_model_size_bytes"] for k in per_dim]
        assert all(a < b for a, b in zip(bucket_means, bucket_means[1:]))


# --------------------------------------------------------------------------
# 9. determinism
# --------------------------------------------------------------------------

def test_c09_byte_identical_replay(tmp_path):
    with criterion(9, "deterministic replay"):
        from worlds import small_city, small_config
        small_city(tmp_path)
        cfg = small_config(tmp_path / "checkins.csv", tmp_path / "friends.csv",
                           max_epochs=3, seed=123)
        run_experiment(cfg, tmp_path / "r1")
        run_experiment(cfg, tmp_path / "r2")
        for name in ("report.json", "rounds.ndjson"):
            b1 = (tmp_path / "r1" / name).read_bytes()
            b2 = (tmp_path / "r2" / name).read_bytes()
            assert b1 == b2, f"{name} differs between identical runs"


# --------------------------------------------------------------------------
# 10. privacy boundary
# --------------------------------------------------------------------------

def test_c10_privacy_boundary(tmp_path):
    with criterion(10, "privacy boundary"):
        w = build_world(tmp_path)
        server = w["server"]
        assert server.sealed and server.engagements == 1
        board = RecordingBoard()  # type-checks every payload crossing devices
        run_round(w["devices"], board, 0)
        run_round(w["devices"], board, 1)
        assert any(e[0] == "fetch" for e in board.events)
        # the server was never engaged during rounds and cannot be again
        assert server.engagements == 1
        with pytest.raises(RuntimeError):
            server.run_phase({}, [], None, w["region_map"], w["table"].pois,
                             4, 5, "transformative", 3, 4, 4, 5.0, seed=0)
        # device ownership is enforced: running inside one device's context
        # against another device's model fails
        uids = sorted(w["devices"])
        other = w["devices"][uids[1]].model
        with device_context(uids[0]):
            with pytest.raises(PrivacyError):
                forward_poi(other, [other.stored_ids[0]], other.stored_ids[:2])
