"""Identity-balanced PK batch sampling."""

from __future__ import annotations

from typing import Dict, List

import numpy as np

from .errors import SamplingError


def group_by_identity(labels) -> Dict[int, np.ndarray]:
    labels = np.asarray(labels)
    return {int(y): np.flatnonzero(labels == y) for y in np.unique(labels)}


def pk_sample(labels, P: int, K: int, rng: np.random.Generator) -> np.ndarray:
    """Indices of a ``P * K`` batch: ``P`` identities, ``K`` images each.

    Identities are drawn without replacement; images are drawn without
    replacement unless an identity has fewer than ``K`` of them. The batch
    is grouped by identity in the order the identities were drawn.
    """
    groups = group_by_identity(labels)
    if len(groups) < P:
        raise SamplingError(f"need at least P={P} identities, found {len(groups)}")
    ids = np.array(sorted(groups))
    batch: List[np.ndarray] = []
    for y in rng.choice(ids, size=P, replace=False):
        pool = groups[int(y)]
        batch.append(rng.choice(pool, size=K, replace=len(pool) < K))
    return np.concatenate(batch)
