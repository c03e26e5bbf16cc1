"""View cross-entropy, batch-all triplet loss and their weighted sum."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor


class DegenerateBatchError(ValueError):
    """The batch admits no (anchor, positive, negative) triplet."""


@dataclass
class LossWeights:
    lambda_ce: float = 0.5
    lambda_trip: float = 1.0
    margin: float = 0.2

    def __post_init__(self):
        if min(self.lambda_ce, self.lambda_trip, self.margin) < 0:
            raise ValueError("loss weights and margin must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class TripletIndexSet:
    anchors: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray

    def __len__(self) -> int:
        return len(self.anchors)

    def __iter__(self):
        return zip(self.anchors.tolist(), self.positives.tolist(), self.negatives.tolist())


def ce_loss(logits: Tensor, labels) -> Tensor:
    """Batch mean of ``-log softmax(logits)[label]``."""
    labels = np.asarray(labels, dtype=np.intp).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != len(labels):
        raise DimensionError(f"logits {logits.shape} do not match {len(labels)} labels")
    m = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= m):
        raise IndexError(f"view label out of range [0, {m})")
    picked = ad.log_softmax(logits)[np.arange(len(labels)), labels]
    return -ad.tmean(picked)


def mine_all(subjects) -> TripletIndexSet:
    """Every valid (anchor, positive, negative), in lexicographic order."""
    labels = np.asarray(subjects)
    b = len(labels)
    same = labels[:, None] == labels[None, :]
    pos = same & ~np.eye(b, dtype=bool)
    valid = pos[:, :, None] & ~same[:, None, :]
    a, p, n = np.nonzero(valid)
    if len(a) == 0:
        raise DegenerateBatchError("batch needs two subjects and one subject with two sequences")
    return TripletIndexSet(a, p, n)


def triplet_loss(features: Tensor, triplets: TripletIndexSet, margin: float = 0.2) -> Tensor:
    """``(1/K) sum_k sum_j max(m - d_neg[k, j] + d_pos[k, j], 0)``.

    ``features`` is ``(B, n, D)``; distances are squared Euclidean per strip.
    """
    if len(triplets) == 0:
        raise DegenerateBatchError("empty triplet set")
    if features.ndim != 3:
        raise DimensionError(f"expected (B, n, D) features, got {features.shape}")
    b = features.shape[0]
    # squared distance for every ordered pair, then gather the triplets' pairs
    i, j = np.divmod(np.arange(b * b), b)
    diff = ad.take(features, i) - ad.take(features, j)
    dist = ad.tsum(diff * diff, axis=-1)
    d_pos = ad.take(dist, triplets.anchors * b + triplets.positives)
    d_neg = ad.take(dist, triplets.anchors * b + triplets.negatives)
    hinge = ad.relu(d_pos - d_neg + margin)
    return ad.tsum(hinge) * (1.0 / len(triplets))


def joint_loss(ce: Tensor, trip: Tensor, weights: LossWeights) -> Tensor:
    return ad.scale(ce, weights.lambda_ce) + ad.scale(trip, weights.lambda_trip)
