"""Knowledge-distillation collaboration: soft-decision bundles and the
losses that couple a device to its neighbors.

A bundle is the only payload that ever travels between devices: one
probability vector per reference sequence, on a canonical support (all POIs
of a region for the geographic kind, the full category vocabulary for the
semantic kind). Collaboration losses are squared distances between aligned
decision vectors; neighbor vectors are constants during backprop. A
contrastive bilinear term ties each POI embedding to its category embedding
so that category-level knowledge reaches the POI table.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .recommender import (
    DeviceModel,
    GradientSet,
    StepTrace,
    _forward,
    dscores_from_dprobs,
)

log = logging.getLogger(__name__)

KIND_GEO = "geo"
KIND_SEM = "sem"

# wire format: owner id (8 bytes) + round (4) + kind/region tag (4), then one
# 32-bit float per probability entry; supports are canonical so item ids are
# not transmitted
BUNDLE_HEADER_BYTES = 16
PROB_ENTRY_BYTES = 4


@dataclass
class SoftDecisionBundle:
    owner: int
    ref_kind: str  # KIND_GEO | KIND_SEM
    region_id: int | None
    round: int
    per_sequence: list[np.ndarray]  # aligned with the reference set


@dataclass
class LossBreakdown:
    l_loc: float = 0.0
    l_geo: float = 0.0
    l_cat: float = 0.0
    l_mi: float = 0.0

    @property
    def l_sem(self) -> float:
        return self.l_cat + self.l_mi

    def combined(self, gamma: float, mu: float) -> float:
        return self.l_loc + gamma * (mu * self.l_geo + (1.0 - mu) * self.l_sem)


def bundle_size_bytes(bundle: SoftDecisionBundle) -> int:
    return BUNDLE_HEADER_BYTES + PROB_ENTRY_BYTES * sum(len(p) for p in bundle.per_sequence)


def _own_forwards(model: DeviceModel, ref, kind: str) -> list[StepTrace]:
    """Eval-mode next-step forwards over every reference sequence, using the
    full sequence as prefix."""
    traces = []
    if kind == KIND_GEO:
        support_rows = model.region_rows.get(ref.region_id)
        if support_rows is None:
            raise ValueError(
                f"device {model.user_id} stores no embeddings for region {ref.region_id}")
        for seq in ref.sequences:
            traces.append(_forward(model, model.rows_for(seq), support_rows,
                                   "poi", train_mode=False))
    else:
        all_cats = np.arange(model.n_categories, dtype=np.int64)
        for seq in ref.sequences:
            traces.append(_forward(model, np.asarray(seq, dtype=np.int64), all_cats,
                                   "cat", train_mode=False))
    return traces


def compute_bundle(model: DeviceModel, ref, kind: str, round_idx: int = 0) -> SoftDecisionBundle:
    """Publish-side soft decisions: one eval-mode next-step prediction per
    reference sequence on the canonical support."""
    if kind not in (KIND_GEO, KIND_SEM):
        raise ValueError(f"unknown bundle kind {kind!r}")
    traces = _own_forwards(model, ref, kind)
    return SoftDecisionBundle(
        owner=model.user_id,
        ref_kind=kind,
        region_id=ref.region_id if kind == KIND_GEO else None,
        round=round_idx,
        per_sequence=[t.probs for t in traces],
    )


def _assert_aligned(own: SoftDecisionBundle, other: SoftDecisionBundle) -> None:
    if own.ref_kind != other.ref_kind or own.region_id != other.region_id:
        raise ValueError(
            f"bundle mismatch: {own.ref_kind}/{own.region_id} vs {other.ref_kind}/{other.region_id}")
    if len(own.per_sequence) != len(other.per_sequence):
        raise ValueError("bundles cover different reference set sizes")
    for a, b in zip(own.per_sequence, other.per_sequence):
        if a.shape != b.shape:
            raise ValueError("bundle supports are not index-aligned")


def disagreement(own: SoftDecisionBundle, neighbors: list[SoftDecisionBundle]) -> float:
    """Mean over neighbors of the summed squared distance between own and
    neighbor decisions across the reference set. Zero with a warning when
    there is no neighbor to compare against."""
    if not neighbors:
        log.warning("device %d has no active neighbors for %s distillation",
                    own.owner, own.ref_kind)
        return 0.0
    total = 0.0
    for nb in neighbors:
        _assert_aligned(own, nb)
        for a, b in zip(own.per_sequence, nb.per_sequence):
            diff = a - b
            total += float(diff @ diff)
    return total / len(neighbors)


def loss_geo(own: SoftDecisionBundle, neighbors: list[SoftDecisionBundle]) -> float:
    return disagreement(own, neighbors)


def loss_cat(own: SoftDecisionBundle, neighbors: list[SoftDecisionBundle]) -> float:
    return disagreement(own, neighbors)


@dataclass
class DistillTarget:
    """Per-sequence statistics of the active neighbors' decisions, enough to
    compute the mean-squared disagreement and its gradient without keeping
    every bundle around."""

    ref_kind: str
    region_id: int | None
    n_neighbors: int
    means: list[np.ndarray]  # mean neighbor vector per reference sequence
    mean_sq: list[float]  # mean of ||neighbor vector||^2 per reference sequence


def make_distill_target(bundles: list[SoftDecisionBundle]) -> DistillTarget | None:
    if not bundles:
        return None
    first = bundles[0]
    for b in bundles[1:]:
        _assert_aligned(first, b)
    n_seq = len(first.per_sequence)
    means, mean_sq = [], []
    for x in range(n_seq):
        stack = np.stack([b.per_sequence[x] for b in bundles])
        means.append(stack.mean(axis=0))
        mean_sq.append(float(np.mean(np.sum(stack * stack, axis=1))))
    return DistillTarget(ref_kind=first.ref_kind, region_id=first.region_id,
                         n_neighbors=len(bundles), means=means, mean_sq=mean_sq)


def distill_loss_terms(model: DeviceModel, ref, kind: str,
                       target: DistillTarget | None, weight: float,
                       terms: list) -> float:
    """Fresh own forwards against a frozen neighbor target.

    Returns the loss value (mean over neighbors of summed squared distances)
    and appends weighted gradient terms for backprop. The identity
      mean_j ||p - b_j||^2 = ||p||^2 - 2 p.mean + mean_j ||b_j||^2
    lets the stored means/mean_sq reproduce the exact per-neighbor sum.
    """
    if target is None:
        return 0.0
    if kind != target.ref_kind:
        raise ValueError(f"target kind {target.ref_kind} != {kind}")
    traces = _own_forwards(model, ref, kind)
    if len(traces) != len(target.means):
        raise ValueError("reference set size changed under the distill target")
    loss = 0.0
    for trace, mean, msq in zip(traces, target.means, target.mean_sq):
        p = trace.probs
        if p.shape != mean.shape:
            raise ValueError("bundle supports are not index-aligned")
        loss += float(p @ p) - 2.0 * float(p @ mean) + msq
        dprobs = 2.0 * weight * (p - mean)
        terms.append((trace, dscores_from_dprobs(trace, dprobs)))
    return loss


def loss_mi(model: DeviceModel, pairs: list[tuple[int, int]],
            weight: float = 0.0, grads: GradientSet | None = None) -> float:
    """Contrastive bilinear loss tying POI embeddings to category embeddings.

    For each (poi, category) pair: f(p,c) = sigmoid(e_p . W . e_c), and the
    per-POI loss is -log[ exp(f(p,c_p)) / sum_{c' != c_p} exp(f(p,c')) ]; the
    denominator deliberately excludes the positive pair. When `grads` is
    given, weighted gradients for e_p, all e_c and W are accumulated.
    """
    if model.n_categories < 2:
        raise ValueError("need at least 2 categories for the contrastive loss")
    C = model.cat_emb
    W = model.mi_matrix
    total = 0.0
    for poi_id, cat_id in pairs:
        row = model.id_to_row[poi_id]
        e = model.poi_emb[row]
        v = W.T @ e
        f = 1.0 / (1.0 + np.exp(-(C @ v)))
        exp_f = np.exp(f)
        denom = float(exp_f.sum() - exp_f[cat_id])
        total += -float(f[cat_id]) + np.log(denom)
        if grads is not None:
            df = exp_f / denom
            df[cat_id] = -1.0
            ds = weight * df * f * (1.0 - f)
            grads.add_poi_rows(np.array([row]), (W @ (C.T @ ds))[None, :])
            grads.cat += ds[:, None] * v[None, :]
            grads.w += np.outer(e, C.T @ ds)
    return total
