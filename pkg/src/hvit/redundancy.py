"""Contribution Cosine Similarity (CCS) between attention heads.

For two heads the score is the row-wise cosine similarity of their maps,
averaged over query rows. A block's score averages that over all unordered
head pairs, and CCS averages the block scores. Maps with a leading batch axis
are scored per image and then averaged over the batch.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import AttentionMapStack


class SimilarityError(ValueError):
    pass


@dataclass
class CcsReport:
    per_block: list[float]
    overall: float
    h: int
    N: int
    B: int
    labels: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"per_block": self.per_block, "overall": self.overall, "h": self.h, "N": self.N, "B": self.B}


def _row_normalized(a: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(a, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise SimilarityError("attention map has a zero row; cosine similarity undefined")
    return a / norms


def head_pair_similarity(al: np.ndarray, am: np.ndarray) -> float:
    """Mean over rows ``i`` of ``cos(al[i], am[i])`` for two ``N x N`` maps."""
    if al.shape != am.shape or al.ndim != 2:
        raise SimilarityError(f"maps must be matching N x N arrays, got {al.shape} and {am.shape}")
    cos = (_row_normalized(al) * _row_normalized(am)).sum(axis=-1)
    return float(cos.mean())


def _pairwise_mean(maps: np.ndarray) -> float:
    h = maps.shape[0]
    unit = _row_normalized(maps)
    # cos[l, m, i] for every head pair at once
    cos = np.einsum("lin,min->lmi", unit, unit).mean(axis=-1)
    upper = np.triu_indices(h, k=1)
    return float(cos[upper].mean())


def block_similarity(stack: AttentionMapStack | np.ndarray) -> float:
    maps = stack.maps if isinstance(stack, AttentionMapStack) else np.asarray(stack)
    if maps.shape[-3] < 2:
        raise SimilarityError(f"block similarity needs at least 2 heads, got {maps.shape[-3]}")
    if maps.ndim == 3:
        return _pairwise_mean(maps)
    if maps.ndim == 4:
        return float(np.mean([_pairwise_mean(m) for m in maps]))
    raise SimilarityError(f"expected [h, N, N] or [B, h, N, N] maps, got shape {maps.shape}")


def ccs(stacks: list[AttentionMapStack]) -> CcsReport:
    if not stacks:
        raise SimilarityError("no attention-map stacks given")
    heads = {s.num_heads for s in stacks}
    if len(heads) != 1:
        raise SimilarityError(f"blocks disagree on head count: {sorted(heads)}")
    per_block = [block_similarity(s) for s in stacks]
    return CcsReport(per_block, float(np.mean(per_block)), heads.pop(), stacks[0].maps.shape[-1], len(stacks))
