"""Ranking metrics and per-device evaluation.

Leave-one-out, single ground truth: HR@k is a hit indicator over the top-k
list and NDCG@k reduces to 1/log2(rank+1) because the ideal DCG is 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .recommender import DeviceModel, forward_poi


class EvaluationError(ValueError):
    pass


def hr_at_k(rank: int | None, k: int) -> int:
    """1 iff the ground truth sits within the top-k, else 0."""
    if k < 1:
        raise ValueError("k must be >= 1")
    return 1 if rank is not None and rank <= k else 0


def ndcg_at_k(rank: int | None, k: int) -> float:
    """1/log2(rank+1) within the cutoff, else 0 (single relevant item)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if rank is None or rank > k:
        return 0.0
    return 1.0 / math.log2(rank + 1)


def rank_of_target(scores: np.ndarray, target_index: int) -> int:
    """1-based rank of the target, ranked pessimistically below any candidate
    with an equal score."""
    t = scores[target_index]
    higher = int(np.sum(scores > t))
    equal_others = int(np.sum(scores == t)) - 1
    return 1 + higher + equal_others


@dataclass
class EvalResult:
    rank: int
    hr5: int
    hr10: int
    ndcg5: float
    ndcg10: float


def evaluate_device(model: DeviceModel, prefix: list[int], target: int,
                    candidates: list[int]) -> EvalResult:
    """Score the candidate list with an eval-mode forward over the user's
    history prefix and rank the ground truth."""
    if target not in candidates:
        raise EvaluationError(f"ground truth {target} missing from candidate set")
    decision = forward_poi(model, prefix, candidates, train_mode=False)
    rank = rank_of_target(decision.probs, candidates.index(target))
    return EvalResult(
        rank=rank,
        hr5=hr_at_k(rank, 5),
        hr10=hr_at_k(rank, 10),
        ndcg5=ndcg_at_k(rank, 5),
        ndcg10=ndcg_at_k(rank, 10),
    )
