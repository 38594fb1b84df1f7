"""Identity classification and batch-hard triplet losses.

ID loss: bias-free linear heads with softmax cross-entropy, summed over the
batch and averaged across the 8 heads. Triplet loss: per anchor, hardest
positive minus hardest negative Euclidean distance hinged at the margin,
summed over anchors and averaged across the 3 global heads.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import (
    Tensor,
    cross_entropy_sum,
    matmul,
    mul,
    relu,
    reshape,
    sqrt,
    sub,
    take_pairs,
    transpose,
    tsum,
)

__all__ = ["LossConfig", "id_loss", "batch_hard_triplet", "total_loss", "pairwise_distances"]


@dataclass
class LossConfig:
    margin: float = 1.2
    tau: float = 2.0
    p: int = 4
    k: int = 4

    def __post_init__(self):
        if self.margin <= 0.0 or self.tau <= 0.0:
            raise ValueError("margin and tau must be positive")
        if self.p < 2 or self.k < 2:
            raise ValueError("batch structure needs P >= 2 identities and K >= 2 samples each")


def id_loss(features: Sequence[Tensor], heads: Sequence[Tensor], labels: np.ndarray) -> Tensor:
    """Cross-entropy through one bias-free head per feature vector.

    ``features`` are B x d tensors (one per head, descriptor order); the
    per-head batch sums are averaged over heads.
    """
    if len(features) != len(heads):
        raise ValueError(f"{len(features)} feature vectors but {len(heads)} heads")
    labels = np.asarray(labels, dtype=np.intp)
    total = None
    for feat, head in zip(features, heads):
        logits = matmul(feat, transpose(head))
        term = cross_entropy_sum(logits, labels)
        total = term if total is None else total + term
    return total * (1.0 / len(heads))


def pairwise_distances(features: Tensor) -> Tensor:
    """B x B Euclidean distance matrix (exact zeros on the diagonal)."""
    B, d = features.data.shape
    diff = sub(reshape(features, (B, 1, d)), reshape(features, (1, B, d)))
    return sqrt(tsum(mul(diff, diff), axis=2))


def _validate_batch_labels(labels: np.ndarray) -> None:
    uniq, counts = np.unique(labels, return_counts=True)
    if len(uniq) < 2 or counts.min() < 2:
        raise ValueError(
            "batch-hard mining needs at least 2 identities with at least 2 samples each, "
            f"got counts {dict(zip(uniq.tolist(), counts.tolist()))}"
        )


def batch_hard_triplet(global_features: Sequence[Tensor], labels: np.ndarray, margin: float) -> Tensor:
    """Hinge on hardest-positive minus hardest-negative distance, per anchor.

    Mined independently per global head; anchors are summed, heads averaged.
    Ties resolve to the first index so replays are deterministic.
    """
    labels = np.asarray(labels)
    _validate_batch_labels(labels)
    B = labels.shape[0]
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(B, dtype=bool)
    neg_mask = ~same
    anchors = np.arange(B)
    total = None
    for feat in global_features:
        if feat.data.shape[0] != B:
            raise ValueError(f"features batch {feat.data.shape[0]} != labels batch {B}")
        dist = pairwise_distances(feat)
        d = dist.data
        hardest_pos = np.where(pos_mask, d, -np.inf).argmax(axis=1)
        hardest_neg = np.where(neg_mask, d, np.inf).argmin(axis=1)
        hp = take_pairs(dist, anchors, hardest_pos)
        hn = take_pairs(dist, anchors, hardest_neg)
        term = tsum(relu(hp - hn + margin))
        total = term if total is None else total + term
    return total * (1.0 / len(global_features))


def total_loss(l_tri: Tensor, l_id: Tensor, tau: float) -> Tensor:
    """Combined objective l_tri + tau * l_id."""
    return l_tri + tau * l_id
