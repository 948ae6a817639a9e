"""Neighbor identification and dynamic neighbor sampling.

The server identifies two full neighbor sets per user from low-sensitivity
summaries: geographical neighbors (anyone who has visited the user's current
region; directional) and semantic neighbors (smallest KL divergence between
category-preference distributions, plus explicit friends). During training
each device keeps a small active subset per type, refreshed either by a
performance trigger on the local loss or by soft-decision similarity.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

SMOOTHING_EPS = 1e-6


@dataclass
class UserSummary:
    """What a device uploads once: visited regions (current first) and its
    category-preference distribution."""

    user_id: int
    visited_regions: list[int]
    category_distribution: np.ndarray

    @property
    def current_region(self) -> int:
        return self.visited_regions[0]


@dataclass
class NeighborState:
    geo_full: list[int] = field(default_factory=list)
    sem_full: list[int] = field(default_factory=list)
    geo_active: list[int] = field(default_factory=list)
    sem_active: list[int] = field(default_factory=list)


def category_distribution(cat_seq: list[int], n_categories: int,
                          eps: float = SMOOTHING_EPS) -> np.ndarray:
    """Empirical category frequencies with additive smoothing, renormalized.

    Smoothing keeps every entry strictly positive so any pairwise KL
    divergence stays finite.
    """
    if not cat_seq:
        raise ValueError("empty category sequence")
    counts = np.bincount(np.asarray(cat_seq), minlength=n_categories).astype(float)
    counts += eps
    return counts / counts.sum()


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """KL(p || q) in nats, with the 0 * log(0/q) = 0 convention."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {q.shape}")
    mask = p > 0.0
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


def identify_geo_neighbors(summaries: dict[int, UserSummary]) -> dict[int, list[int]]:
    """u_j is a geographical neighbor of u_i iff u_j has visited u_i's
    *current* region. The relation is directional: only r^i_0 matters on the
    receiving side, while any visited region counts on the giving side.
    """
    visited = {u: set(s.visited_regions) for u, s in summaries.items()}
    out: dict[int, list[int]] = {}
    for ui, si in summaries.items():
        r0 = si.current_region
        out[ui] = [uj for uj in sorted(summaries) if uj != ui and r0 in visited[uj]]
    return out


def identify_sem_neighbors(summaries: dict[int, UserSummary], h: int,
                           graph=None) -> dict[int, list[int]]:
    """Top-h users by smallest KL divergence from u_i's category preference,
    united with u_i's explicit friends. Ties break by ascending user id.
    """
    if h < 1:
        raise ValueError("h must be >= 1")
    uids = sorted(summaries)
    out: dict[int, list[int]] = {}
    for ui in uids:
        p = summaries[ui].category_distribution
        scored = sorted(
            (kl_divergence(p, summaries[uj].category_distribution), uj)
            for uj in uids if uj != ui
        )
        chosen = {uj for _, uj in scored[:h]}
        if graph is not None:
            chosen |= {f for f in graph.friends(ui) if f in summaries and f != ui}
        out[ui] = sorted(chosen)
    return out


def sample_active(pool: list[int], k: int, rng: np.random.Generator) -> list[int]:
    """Uniform draw of k distinct members (all of them when the pool is small)."""
    if len(pool) <= k:
        return sorted(pool)
    idx = rng.choice(len(pool), size=k, replace=False)
    return sorted(pool[int(i)] for i in idx)


def relative_loss_change_pct(prev: float, curr: float) -> float:
    """|L_o - L_{o-1}| / L_{o-1} * 100, treating a zero previous loss as 0%."""
    if prev == 0.0:
        return 0.0
    return abs(curr - prev) / prev * 100.0


def perf_triggered_resample(state: NeighborState, prev_loss: float, curr_loss: float,
                            tau_pct: float, alpha: int,
                            rng: np.random.Generator) -> bool:
    """Redraw both active sets when the relative local-loss change falls below
    tau (percent). Returns True when a redraw happened. A zero previous loss
    counts as a 0% change and forces the redraw.
    """
    if relative_loss_change_pct(prev_loss, curr_loss) < tau_pct:
        state.geo_active = sample_active(state.geo_full, alpha, rng)
        state.sem_active = sample_active(state.sem_full, alpha, rng)
        return True
    return False


def soft_decision_distance(own: list[np.ndarray], other: list[np.ndarray],
                           floor: float = 1e-12) -> float:
    """Sum over reference sequences of KL(own || other) between aligned
    soft decisions."""
    if len(own) != len(other):
        raise ValueError("bundles cover different reference sets")
    total = 0.0
    for p, q in zip(own, other):
        total += kl_divergence(p, np.maximum(q, floor))
    return total


def similarity_sample(own: list[np.ndarray],
                      candidates: dict[int, list[np.ndarray]],
                      pool: list[int], beta: int) -> list[int]:
    """Select the beta pool members whose soft decisions are closest to ours
    in summed KL. Candidates without a bundle are skipped with a warning;
    ties break by ascending user id.
    """
    scored = []
    for uj in sorted(pool):
        if uj not in candidates:
            log.warning("no soft-decision bundle available for candidate %d; skipped", uj)
            continue
        scored.append((soft_decision_distance(own, candidates[uj]), uj))
    scored.sort()
    return sorted(uj for _, uj in scored[:beta])
