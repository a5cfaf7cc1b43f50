"""Dot-product attention fusion of the CDI and SI feature vectors plus the
two-layer classification head."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import Linear, Module
from .tensor import Parameter, Tensor


@dataclass
class FusionOutput:
    fused: Tensor        # [N, 2D]
    weights: Tensor      # [N, 2] columns (w_cdi, w_si)
    penultimate: Tensor  # [N, D]
    logits: Tensor       # [N, 2]


def attention_fuse(v_cdi: Tensor, v_si: Tensor, q: Tensor) -> tuple[Tensor, Tensor]:
    """Score each stream by its dot product with ``q``, softmax the two
    scores, and concatenate the reweighted streams.

    Accepts [D] vectors or [N, D] batches; returns (fused, weights) with
    weights[..., 0] for CDI and weights[..., 1] for SI.
    """
    if v_cdi.shape != v_si.shape:
        raise T.ShapeError(f"stream feature shapes differ: {v_cdi.shape} vs {v_si.shape}")
    if q.shape != (v_cdi.shape[-1],):
        raise T.ShapeError(f"kernel q has shape {q.shape}, features have dim {v_cdi.shape[-1]}")
    single = v_cdi.ndim == 1
    if single:
        v_cdi = v_cdi.reshape(1, -1)
        v_si = v_si.reshape(1, -1)
    n = v_cdi.shape[0]
    s_cdi = (v_cdi * q).sum(axis=1, keepdims=True)
    s_si = (v_si * q).sum(axis=1, keepdims=True)
    weights = T.softmax(T.concat([s_cdi, s_si], axis=1), axis=1)
    w_cdi = weights[(slice(None), slice(0, 1))]
    w_si = weights[(slice(None), slice(1, 2))]
    fused = T.concat([v_cdi * w_cdi, v_si * w_si], axis=1)
    if single:
        return fused.reshape(2 * v_cdi.shape[1]), weights.reshape(2)
    assert fused.shape[0] == n
    return fused, weights


class FusionHead(Module):
    """Kernel ``q`` (zero-initialised) plus fc1: 2D -> D and fc2: D -> 2."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.dim = dim
        self.q = Parameter(np.zeros(dim, dtype=T.default_dtype()))
        self.fc1 = Linear(rng, 2 * dim, dim)
        self.fc2 = Linear(rng, dim, 2)

    def classify(self, fused: Tensor) -> tuple[Tensor, Tensor]:
        if fused.shape[-1] != 2 * self.dim:
            raise T.ShapeError(f"fused dim {fused.shape[-1]} != {2 * self.dim}")
        penultimate = T.relu(self.fc1(fused))
        return self.fc2(penultimate), penultimate

    def __call__(self, v_cdi: Tensor, v_si: Tensor) -> FusionOutput:
        fused, weights = attention_fuse(v_cdi, v_si, self.q)
        logits, pen = self.classify(fused)
        return FusionOutput(fused, weights, pen, logits)


def classify(fused: Tensor, head: FusionHead) -> tuple[Tensor, Tensor]:
    """(logits, penultimate) for a fused feature vector or batch."""
    return head.classify(fused)
