"""Cross-domain alignment: mean-embedding MMD between per-domain feature
means, and the combined classification + alignment objective."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class DomainBatch:
    domain_id: int
    features: Tensor     # [n_d, D]
    labels: np.ndarray   # [n_d]

    def __post_init__(self):
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError(f"domain {self.domain_id}: features must be [n_d >= 1, D], got {self.features.shape}")


@dataclass
class LossBreakdown:
    ce: Tensor
    cda: Tensor
    lam: float
    total: Tensor

    def values(self) -> dict[str, float]:
        return {"ce": self.ce.item(), "cda": self.cda.item(), "lambda": self.lam, "total": self.total.item()}


def mmd_distance(batches: Sequence[DomainBatch], k: int | None = None) -> Tensor:
    """Average squared distance between domain feature means over all
    ordered pairs of distinct domains: sum_{d != j} |mu_d - mu_j|^2 / (K (K-1))."""
    k = len(batches) if k is None else k
    if k != len(batches):
        raise ValueError(f"K={k} but {len(batches)} domain batches given")
    if k < 2:
        raise ValueError("MMD needs at least two domains")
    dims = {b.features.shape[1] for b in batches}
    if len(dims) != 1:
        raise ValueError(f"domain feature dims differ: {sorted(dims)}")
    means = [b.features.mean(axis=0) for b in batches]
    total = None
    for d in range(k):
        for j in range(d + 1, k):
            diff = means[d] - means[j]
            sq = (diff * diff).sum()
            total = sq if total is None else total + sq
    # each unordered pair appears twice in the ordered sum
    return total * (2.0 / (k * (k - 1)))


def mmd_reference(features: Sequence[np.ndarray]) -> float:
    """Float64 evaluation by literal enumeration of ordered pairs."""
    means = [np.mean(np.asarray(f, dtype=np.float64), axis=0) for f in features]
    k = len(means)
    acc = 0.0
    for d in range(k):
        for j in range(k):
            if d != j:
                acc += float(np.sum((means[d] - means[j]) ** 2))
    return acc / (k * (k - 1))


def total_loss(ce: Tensor, cda: Tensor, lam: float) -> LossBreakdown:
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    total = ce + cda * float(lam)
    return LossBreakdown(ce, cda, float(lam), total)
