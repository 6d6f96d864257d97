"""Attention mask construction from a caption mapping.

Two masks are built: the token-to-relation cross-attention mask (one row
per caption token, one column per relation plus a trailing null-relation
column) and the relational self-attention mask over token pairs.

Sentinel semantics: a cell holds 0 where attention is allowed and
``NEG_INF`` where it is blocked. ``NEG_INF`` is a finite large negative
constant rather than IEEE -inf so mixed-precision softmax cannot produce
NaN; post-softmax the blocked weight is below 1e-6 all the same.

The null-relation column is the fallback for tokens with no relation
entry: without it those rows would be entirely blocked, which is
undefined under softmax. Mapped tokens never attend to the null column.
"""

from __future__ import annotations

import base64
from dataclasses import dataclass

import numpy as np

from .captions import CaptionMapping

NEG_INF = -1.0e9


def build_sgc_mask(m: CaptionMapping, neg_inf: float = NEG_INF) -> np.ndarray:
    """Token-to-relation mask, shape (N, K+1); last column is the null relation.

    Cell (i, k) is 0 iff the mapping sends token i to relation k; a token
    with no entry gets 0 only in the null column.
    """
    n = len(m.caption)
    k = m.relation_count
    mask = np.full((n, k + 1), neg_inf, dtype=np.float64)
    for i in range(n):
        if i in m.tau:
            mask[i, m.tau[i]] = 0.0
        else:
            mask[i, k] = 0.0
    return mask


def build_satt_mask(m: CaptionMapping, neg_inf: float = NEG_INF) -> np.ndarray:
    """Token-pair mask, shape (N, N): visible only through relational links.

    Cell (i, j) is 0 iff i == j, or both tokens belong to the same
    relation span, or their relations share an endpoint object, or both
    tokens are unmapped (background tokens keep plain self-attention
    among themselves). Symmetric with a zero diagonal by construction.
    """
    n = len(m.caption)
    mask = np.full((n, n), neg_inf, dtype=np.float64)
    rel_of = [m.tau.get(i) for i in range(n)]
    endpoints = m.relation_endpoints

    def connected(a: int, b: int) -> bool:
        if a == b:
            return True
        if not endpoints:
            return False
        sa, oa = endpoints[a]
        sb, ob = endpoints[b]
        return len({sa, oa} & {sb, ob}) > 0

    for i in range(n):
        mask[i, i] = 0.0
        for j in range(i + 1, n):
            ri, rj = rel_of[i], rel_of[j]
            if ri is None and rj is None:
                visible = True
            elif ri is None or rj is None:
                visible = False
            else:
                visible = connected(ri, rj)
            if visible:
                mask[i, j] = 0.0
                mask[j, i] = 0.0
    return mask


def apply_additive_mask(scores: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Elementwise sum of attention scores and mask; shapes must match."""
    scores = np.asarray(scores)
    mask = np.asarray(mask)
    if scores.shape != mask.shape:
        raise ValueError(f"shape mismatch: scores {scores.shape} vs mask {mask.shape}")
    return scores + mask


@dataclass(frozen=True)
class AttentionMaskPair:
    """Both masks for one caption: (N, K+1) cross mask, (N, N) self mask."""

    sgc_mask: np.ndarray
    satt_mask: np.ndarray

    @property
    def n_tokens(self) -> int:
        return self.sgc_mask.shape[0]

    @property
    def n_relations(self) -> int:
        return self.sgc_mask.shape[1] - 1

    @staticmethod
    def from_mapping(m: CaptionMapping, neg_inf: float = NEG_INF) -> "AttentionMaskPair":
        return AttentionMaskPair(build_sgc_mask(m, neg_inf), build_satt_mask(m, neg_inf))


def pack_mask(mask: np.ndarray) -> dict:
    """Compact bit-matrix encoding: bit 1 where attention is allowed (cell == 0)."""
    allowed = np.asarray(mask) == 0.0
    packed = np.packbits(allowed.reshape(-1).astype(np.uint8))
    return {
        "shape": list(mask.shape),
        "bits": base64.b64encode(packed.tobytes()).decode("ascii"),
    }


def unpack_mask(data: dict, neg_inf: float = NEG_INF) -> np.ndarray:
    shape = tuple(data["shape"])
    total = int(np.prod(shape))
    raw = np.frombuffer(base64.b64decode(data["bits"]), dtype=np.uint8)
    allowed = np.unpackbits(raw)[:total].reshape(shape).astype(bool)
    return np.where(allowed, 0.0, neg_inf)
