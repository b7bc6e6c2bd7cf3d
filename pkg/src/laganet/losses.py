"""Label-smoothed cross-entropy, batch-hard triplet loss and their weighted sum."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence, Tuple

import numpy as np

from . import tensor as T
from .config import LossConfig
from .errors import ConfigError, SamplingError, ShapeError
from .tensor import Tensor


def smoothed_targets(y: int, n_classes: int, eps: float) -> np.ndarray:
    if not 0 <= y < n_classes:
        raise IndexError(f"label {y} out of range for {n_classes} classes")
    q = np.full(n_classes, eps / n_classes)
    q[y] = 1.0 - (n_classes - 1) / n_classes * eps
    return q


def xent_loss(logits: Tensor, labels, eps: float) -> Tensor:
    """Batch mean of ``-sum_c q_c log softmax(z)_c`` with smoothed targets ``q``."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"logits {logits.shape} and labels {labels.shape} do not agree")
    n, c = logits.shape
    q = np.stack([smoothed_targets(int(y), c, eps) for y in labels])
    return -T.tsum(T.log_softmax(logits) * q) * (1.0 / n)


def _check_pk(labels: np.ndarray) -> None:
    ids, counts = np.unique(labels, return_counts=True)
    if len(ids) < 2:
        raise SamplingError("batch-hard mining needs at least two identities in the batch")
    if counts.min() < 2:
        raise SamplingError(f"identity {ids[counts.argmin()]} has a single instance in the batch")


def pairwise_distances(emb: Tensor) -> Tensor:
    """Euclidean distances ``sqrt(max(|a|^2 + |b|^2 - 2 a.b, 0))``."""
    sq = T.tsum(emb * emb, axis=1)
    gram = T.matmul(emb, emb.T)
    d2 = sq.reshape(-1, 1) + sq.reshape(1, -1) - 2.0 * gram
    return T.sqrt(T.clamp_min(d2, 0.0))


def mine_batch_hard(dist: np.ndarray, labels: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Indices of the hardest positive and hardest negative for every anchor.

    The anchor itself is excluded from its positives by index; ties go to
    the lowest index.
    """
    n = len(labels)
    same = labels[:, None] == labels[None, :]
    pos = same & ~np.eye(n, dtype=bool)
    hp = np.argmax(np.where(pos, dist, -np.inf), axis=1)
    hn = np.argmin(np.where(~same, dist, np.inf), axis=1)
    return hp, hn


def batch_hard_terms(emb: Tensor, labels, margin: float) -> Tensor:
    """Per-anchor hinge terms ``[margin + d(a, hardest pos) - d(a, hardest neg)]_+``."""
    labels = np.asarray(labels)
    if emb.ndim != 2 or labels.shape != (emb.shape[0],):
        raise ShapeError(f"embeddings {emb.shape} and labels {labels.shape} do not agree")
    _check_pk(labels)
    dist = pairwise_distances(emb)
    hp, hn = mine_batch_hard(dist.data, labels)
    rows = np.arange(len(labels))
    return T.clamp_min(margin + dist[rows, hp] - dist[rows, hn], 0.0)


def batch_hard_triplet(emb: Tensor, labels, margin: float, reduction: str = "sum") -> Tensor:
    terms = batch_hard_terms(emb, labels, margin)
    if reduction == "sum":
        return T.tsum(terms)
    if reduction == "mean":
        return T.mean(terms)
    raise ConfigError(f"unknown reduction {reduction!r}")


@dataclass
class LossBreakdown:
    total: Tensor
    xent: float
    triplet: float


def total_loss(
    logits: Mapping[str, Tensor] | Sequence[Tensor],
    embeddings: Mapping[str, Tensor] | Sequence[Tensor],
    labels,
    cfg: LossConfig,
    n_heads: int = 6,
) -> LossBreakdown:
    """``sum_l xent_l + beta * sum_l triplet_l`` over the heads.

    Cross-entropy is taken on the logits, the triplet term on the reduced
    embeddings. ``n_heads`` is the expected head count (6 for the full
    network); a structural ablation passes its own count.
    """
    logits = list(logits.values()) if isinstance(logits, Mapping) else list(logits)
    embeddings = list(embeddings.values()) if isinstance(embeddings, Mapping) else list(embeddings)
    if len(logits) != n_heads or len(embeddings) != n_heads:
        raise ConfigError(f"expected {n_heads} heads, got {len(logits)} logits and {len(embeddings)} embeddings")
    xent = T.tsum(T.concat([xent_loss(z, labels, cfg.epsilon).reshape(1) for z in logits]))
    trip = T.tsum(
        T.concat([batch_hard_triplet(f, labels, cfg.margin, cfg.reduction).reshape(1) for f in embeddings])
    )
    return LossBreakdown(xent + cfg.beta * trip, float(xent.data), float(trip.data))
