"""Training objectives.

Survivor boxes are labeled by their best overlap against the foreground
(referent plus pseudo ground truths): overlap above 0.5 makes a positive.
Binary cross-entropy trains the scores directly; the margin ranking loss
instead compares positives against hard negatives sampled from strictly
lower overlap bins.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .geometry import Box, max_iou_against

# Bin edges for overlap quantization: bin k collects overlaps in
# (0.5 + 0.1*(k-1), 0.5 + 0.1*k], i.e. ceil(max(0, overlap - 0.5) / 0.1).
OVERLAP_BIN_EDGES = (0.5, 0.6, 0.7, 0.8, 0.9)

LOG_CLAMP = 1e-7


def overlap_bin(max_overlap: float) -> int:
    """Quantize an overlap in [0, 1] into bins {0..5}.

    Counting edges strictly below the value evaluates the ceiling form
    exactly in real arithmetic while staying robust to binary-float artifacts
    such as (0.8 - 0.5) / 0.1 > 3.
    """
    b = 0
    for edge in OVERLAP_BIN_EDGES:
        if max_overlap > edge:
            b += 1
    return b


@dataclass(frozen=True)
class LabeledBox:
    """A survivor box's index, best foreground overlap, label, and overlap bin."""

    index: int
    max_overlap: float
    label: int
    bin: int


@dataclass(frozen=True)
class RankingConfig:
    margin: float = 0.1
    max_negatives: int = 100

    def __post_init__(self) -> None:
        if self.margin <= 0.0:
            raise ValueError(f"margin must be > 0, got {self.margin}")
        if self.max_negatives < 1:
            raise ValueError(f"max_negatives must be >= 1, got {self.max_negatives}")


def assign_labels(boxes: Sequence[Box], foreground: Sequence[Box]) -> list[LabeledBox]:
    """Label each box by its best IoU against the foreground set.

    label is 1 exactly when the overlap exceeds 0.5 (strictly), which is also
    when the overlap bin is nonzero.
    """
    out = []
    for i, box in enumerate(boxes):
        rho = max_iou_against(box, foreground)
        out.append(LabeledBox(i, rho, 1 if rho > 0.5 else 0, overlap_bin(rho)))
    return out


def binary_xe(scores: Node, labels) -> Node:
    """Mean binary cross-entropy of predicted scores against 0/1 labels.

    Predictions are clamped to [1e-7, 1 - 1e-7] before the logs.
    """
    target = np.asarray(labels, dtype=np.float64)
    if scores.value.ndim != 1 or scores.value.size == 0:
        raise ValueError(f"binary_xe: need a non-empty score vector, got shape {scores.value.shape}")
    if target.shape != scores.value.shape:
        raise ValueError(f"binary_xe: {target.shape} labels for {scores.value.shape} scores")
    p = ad.clamp(scores, LOG_CLAMP, 1.0 - LOG_CLAMP)
    ones = ad.constant(np.ones_like(target))
    pos_term = ad.mul(ad.constant(target), ad.log(p))
    neg_term = ad.mul(ad.constant(1.0 - target), ad.log(ad.sub(ones, p)))
    return ad.mul(ad.mean(ad.add(pos_term, neg_term)), ad.constant(-1.0))


def sample_pairs(
    labeled: Sequence[LabeledBox],
    predicted: np.ndarray,
    cfg: RankingConfig = RankingConfig(),
) -> list[tuple[int, int]]:
    """Hard-negative pairs (negative_index, positive_index).

    Positives are all boxes with overlap > 0.5. For each positive, candidate
    negatives come from the union of strictly lower overlap bins, ranked by
    descending predicted score (ties broken by ascending index) and truncated
    to ``cfg.max_negatives``. Strict bin ordering guarantees that every pair
    satisfies overlap(negative) < overlap(positive).
    """
    predicted = np.asarray(predicted, dtype=np.float64)
    if predicted.shape != (len(labeled),):
        raise ValueError(
            f"sample_pairs: {predicted.shape} scores for {len(labeled)} labeled boxes"
        )
    pairs: list[tuple[int, int]] = []
    for pos in labeled:
        if pos.label != 1:
            continue
        pool = [lb.index for lb in labeled if lb.bin < pos.bin]
        pool.sort(key=lambda i: (-predicted[i], i))
        pairs.extend((i, pos.index) for i in pool[: cfg.max_negatives])
    return pairs


def ranking_loss(
    pairs: Sequence[tuple[int, int]],
    scores: Node,
    cfg: RankingConfig = RankingConfig(),
) -> Node:
    """Mean hinge max(0, score_neg - score_pos + margin) over sampled pairs.

    An empty pair list yields a constant zero node that is disconnected from
    the graph, so no gradient flows; callers can detect the case by checking
    the pair list itself.
    """
    if not pairs:
        return ad.constant(0.0)
    neg = ad.take(scores, [i for i, _ in pairs])
    pos = ad.take(scores, [j for _, j in pairs])
    margin = ad.constant(np.full(len(pairs), cfg.margin))
    return ad.mean(ad.relu(ad.add(ad.sub(neg, pos), margin)))
