import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from macsim.data import SocialGraph
from macsim.neighbors import (
    NeighborState,
    UserSummary,
    category_distribution,
    identify_geo_neighbors,
    identify_sem_neighbors,
    kl_divergence,
    perf_triggered_resample,
    relative_loss_change_pct,
    sample_active,
    similarity_sample,
    soft_decision_distance,
)


def test_category_distribution_counts():
    dist = category_distribution([0, 0, 1], 2)
    assert dist[0] == pytest.approx(2 / 3, abs=1e-5)
    assert dist[1] == pytest.approx(1 / 3, abs=1e-5)
    assert dist.sum() == pytest.approx(1.0, abs=1e-12)


def test_category_distribution_degenerate():
    dist = category_distribution([3, 3, 3], 5)
    assert dist[3] > 0.999
    assert np.all(dist > 0)


@given(st.lists(st.integers(0, 4), min_size=1, max_size=30))
def test_category_distribution_order_invariant(seq):
    a = category_distribution(seq, 5)
    b = category_distribution(sorted(seq), 5)
    np.testing.assert_allclose(a, b, atol=1e-15)


def test_kl_identity():
    p = np.array([0.2, 0.3, 0.5])
    assert kl_divergence(p, p) == pytest.approx(0.0, abs=1e-15)


def test_kl_hand_value():
    # 0.5 ln 2 + 0.5 ln(2/3)
    val = kl_divergence(np.array([0.5, 0.5]), np.array([0.25, 0.75]))
    assert val == pytest.approx(0.1438, abs=1e-4)


def test_kl_zero_entry_convention():
    val = kl_divergence(np.array([0.0, 1.0]), np.array([0.5, 0.5]))
    assert val == pytest.approx(math.log(2.0), abs=1e-12)


def test_kl_length_mismatch():
    with pytest.raises(ValueError):
        kl_divergence(np.ones(2) / 2, np.ones(3) / 3)


@settings(max_examples=100)
@given(st.integers(2, 6), st.integers(0, 10_000))
def test_kl_nonnegative(n, seed):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(n))
    q = rng.dirichlet(np.ones(n)) + 1e-9
    q /= q.sum()
    assert kl_divergence(p, q) >= -1e-12


def summary(uid, regions, dist):
    return UserSummary(user_id=uid, visited_regions=regions,
                       category_distribution=np.asarray(dist, dtype=float))


def test_geo_neighbors_directional():
    # u1 visited u0's current region 0; u0 never visited u1's current region 5
    s = {
        0: summary(0, [0], [0.5, 0.5]),
        1: summary(1, [5, 0], [0.5, 0.5]),
    }
    geo = identify_geo_neighbors(s)
    assert geo[0] == [1]
    assert geo[1] == []


def test_geo_neighbors_shared_region_complete():
    s = {u: summary(u, [0], [1.0]) for u in range(4)}
    geo = identify_geo_neighbors(s)
    for u in range(4):
        assert geo[u] == [v for v in range(4) if v != u]


def test_geo_neighbors_disjoint():
    s = {0: summary(0, [0], [1.0]), 1: summary(1, [1], [1.0])}
    geo = identify_geo_neighbors(s)
    assert geo[0] == [] and geo[1] == []


def test_sem_neighbors_exhaustive_when_h_large():
    s = {u: summary(u, [0], np.ones(3) / 3) for u in range(5)}
    sem = identify_sem_neighbors(s, h=10)
    for u in range(5):
        assert sem[u] == [v for v in range(5) if v != u]


def test_sem_neighbors_match_bruteforce():
    dists = {
        0: [0.7, 0.2, 0.1],
        1: [0.69, 0.21, 0.1],   # closest to 0
        2: [0.5, 0.3, 0.2],     # second closest
        3: [0.05, 0.05, 0.9],   # far
    }
    s = {u: summary(u, [0], d) for u, d in dists.items()}
    sem = identify_sem_neighbors(s, h=2)
    # brute-force pairwise KL
    def kl(a, b):
        return sum(x * math.log(x / y) for x, y in zip(dists[a], dists[b]) if x > 0)
    expected = sorted(sorted((kl(0, v), v) for v in (1, 2, 3))[:2], key=lambda t: t[1])
    assert sem[0] == [v for _, v in sorted(expected, key=lambda t: t[1])]
    assert sem[0] == [1, 2]


def test_sem_neighbors_friend_forced_in():
    dists = {
        0: [0.9, 0.05, 0.05],
        1: [0.89, 0.06, 0.05],
        2: [0.88, 0.07, 0.05],
        3: [0.01, 0.01, 0.98],  # maximal KL from 0, but a friend
    }
    s = {u: summary(u, [0], d) for u, d in dists.items()}
    graph = SocialGraph()
    graph.add_edge(0, 3)
    sem = identify_sem_neighbors(s, h=2, graph=graph)
    assert 3 in sem[0]
    assert sem[0] == [1, 2, 3]


def test_relative_change_examples():
    assert relative_loss_change_pct(1.0, 0.999) == pytest.approx(0.1, abs=1e-9)
    assert relative_loss_change_pct(1.0, 0.5) == pytest.approx(50.0, abs=1e-9)
    assert relative_loss_change_pct(0.0, 1.0) == 0.0


def make_state():
    return NeighborState(geo_full=list(range(1, 21)), sem_full=list(range(30, 45)),
                         geo_active=[1, 2], sem_active=[30, 31])


def test_resample_fires_on_small_change(rng):
    state = make_state()
    assert perf_triggered_resample(state, 1.0, 0.999, tau_pct=1.0, alpha=3, rng=rng)
    assert len(state.geo_active) == 3
    assert set(state.geo_active) <= set(state.geo_full)


def test_resample_keeps_on_large_change(rng):
    state = make_state()
    before = list(state.geo_active)
    assert not perf_triggered_resample(state, 1.0, 0.5, tau_pct=1.0, alpha=3, rng=rng)
    assert state.geo_active == before


def test_resample_tau_zero_never_fires(rng):
    state = make_state()
    before = list(state.geo_active)
    for curr in (0.9, 0.90001, 0.9):
        assert not perf_triggered_resample(state, 0.9, curr, tau_pct=0.0, alpha=3, rng=rng)
    assert state.geo_active == before


def test_resample_tau_hundred_always_fires(rng):
    state = make_state()
    fired = [perf_triggered_resample(state, 1.0, c, tau_pct=100.0, alpha=3, rng=rng)
             for c in (0.999, 0.5, 1.3)]
    assert all(fired)


def test_resample_small_pool_exhausts(rng):
    state = NeighborState(geo_full=[1, 2], sem_full=[5], geo_active=[], sem_active=[])
    perf_triggered_resample(state, 1.0, 1.0, tau_pct=1.0, alpha=5, rng=rng)
    assert state.geo_active == [1, 2]
    assert state.sem_active == [5]


def test_resample_zero_prev_forces(rng):
    state = make_state()
    assert perf_triggered_resample(state, 0.0, 0.7, tau_pct=1.0, alpha=2, rng=rng)


def test_sample_active_subset_excludes_nothing_extra(rng):
    pool = list(range(10))
    got = sample_active(pool, 4, rng)
    assert len(got) == 4
    assert set(got) <= set(pool)


def test_similarity_identical_model_selected():
    own = [np.array([0.5, 0.5]), np.array([0.9, 0.1])]
    cands = {
        1: [np.array([0.5, 0.5]), np.array([0.9, 0.1])],  # identical: d = 0
        2: [np.array([0.1, 0.9]), np.array([0.5, 0.5])],
        3: [np.array([0.4, 0.6]), np.array([0.8, 0.2])],
    }
    picked = similarity_sample(own, cands, pool=[1, 2, 3], beta=1)
    assert picked == [1]
    assert soft_decision_distance(own, cands[1]) == pytest.approx(0.0, abs=1e-12)


def test_similarity_matches_bruteforce(rng):
    own = [rng.dirichlet(np.ones(4)) for _ in range(3)]
    cands = {u: [rng.dirichlet(np.ones(4)) + 1e-9 for _ in range(3)] for u in range(6)}
    for u in cands:
        cands[u] = [p / p.sum() for p in cands[u]]
    picked = similarity_sample(own, cands, pool=list(range(6)), beta=2)
    brute = sorted(
        (sum(kl_divergence(p, q) for p, q in zip(own, cands[u])), u)
        for u in range(6)
    )
    assert picked == sorted(u for _, u in brute[:2])


def test_similarity_beta_exhausts_pool():
    own = [np.array([1.0, 0.0])]
    cands = {u: [np.array([0.5, 0.5])] for u in range(3)}
    assert similarity_sample(own, cands, pool=[0, 1, 2], beta=10) == [0, 1, 2]


def test_similarity_missing_bundle_skipped(caplog):
    own = [np.array([1.0, 0.0])]
    cands = {0: [np.array([0.5, 0.5])]}
    with caplog.at_level("WARNING"):
        picked = similarity_sample(own, cands, pool=[0, 1], beta=5)
    assert picked == [0]
    assert any("skipped" in r.message for r in caplog.records)
