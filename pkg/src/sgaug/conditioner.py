"""Graph-conditioned enrichment of text embeddings.

The adapter embeds each relation triple into one row of a graph embedding,
then lets caption tokens cross-attend to those rows (optionally masked so
each token sees only its own relation), and optionally applies a masked
self-attention pass over tokens. Both attention stages are residual with
zero-initialized value projections, so an untrained adapter is a no-op on
the text embedding.

Configuration semantics: the cross-attention stage runs in every
configuration (masked or not); the self-attention stage is skipped
entirely, not run unmasked, when its mask is off.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
import torch
from torch import nn

from .captions import CaptionMapping, TokenSeq
from .graphs import SceneGraph, Vocab
from .masks import NEG_INF, build_satt_mask, build_sgc_mask

ConfigId = Union[int, str]


@dataclass(frozen=True)
class ConditionerConfig:
    """One of the four mask configurations, or the adapter-free baseline."""

    config_id: ConfigId

    _FLAGS = {1: (True, True), 2: (True, False), 3: (False, True), 4: (False, False)}

    def __post_init__(self):
        if self.config_id != "baseline" and self.config_id not in self._FLAGS:
            raise ValueError(f"config_id must be 1..4 or 'baseline', got {self.config_id!r}")

    @property
    def is_baseline(self) -> bool:
        return self.config_id == "baseline"

    @property
    def use_sgc_mask(self) -> bool:
        return not self.is_baseline and self._FLAGS[self.config_id][0]

    @property
    def use_satt_mask(self) -> bool:
        return not self.is_baseline and self._FLAGS[self.config_id][1]

    @property
    def uses_freeform_captions(self) -> bool:
        # The mask-free configuration carries no token-to-relation map, so
        # it pairs with natural-language-style captions.
        return self.config_id == 4

    def label(self) -> str:
        return "baseline" if self.is_baseline else f"config-{self.config_id}"


def sinusoidal_positions(n: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float64).unsqueeze(1)
    idx = torch.arange(0, dim, 2, dtype=torch.float64)
    angle = pos / torch.pow(10000.0, idx / dim)
    pe = torch.zeros(n, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(angle)
    pe[:, 1::2] = torch.cos(angle[:, : dim // 2])
    return pe.to(dtype)


class TextEncoder(nn.Module):
    """Learned token embedding table plus fixed sinusoidal positions."""

    UNK = "<unk>"

    def __init__(self, tokens: Sequence[str], dim: int = 64, max_positions: int = 128):
        super().__init__()
        vocab = [self.UNK] + sorted(set(tokens) - {self.UNK})
        self.token_to_id = {t: i for i, t in enumerate(vocab)}
        self.tokens = vocab
        self.dim = dim
        self.embed = nn.Embedding(len(vocab), dim)
        self.register_buffer("positions", sinusoidal_positions(max_positions, dim))

    def encode(self, caption: TokenSeq) -> torch.Tensor:
        ids = torch.tensor(
            [self.token_to_id.get(t, 0) for t in caption.tokens], dtype=torch.long
        )
        w = self.embed(ids)
        return w + self.positions[: len(ids)].to(w.dtype)


class TripleEmbedder(nn.Module):
    """Relation rows: project(concat(class_s, predicate, class_o)) plus a null row.

    The lookup tables are a third of the model width each; the projection
    restores full width. The learned null row is always appended last so
    masked attention has a fallback target and empty graphs still yield a
    non-empty embedding.
    """

    def __init__(self, vocab: Vocab, dim: int = 64):
        super().__init__()
        self.vocab = vocab
        self.dim = dim
        part = max(2, dim // 3)
        self.class_table = nn.Embedding(len(vocab.object_classes), part)
        self.pred_table = nn.Embedding(len(vocab.predicate_classes), part)
        self.proj = nn.Linear(3 * part, dim)
        self.null_row = nn.Parameter(torch.zeros(dim))

    def embed_triples(self, g: SceneGraph) -> torch.Tensor:
        """(K+1, D) graph embedding, one row per relation, null row last."""
        n_cls = self.class_table.num_embeddings
        n_pred = self.pred_table.num_embeddings
        rows = []
        for rel in g.relations:
            subj = g.object_by_id(rel.subject_id)
            obj = g.object_by_id(rel.object_id)
            if not (0 <= subj.class_id < n_cls and 0 <= obj.class_id < n_cls):
                raise ValueError("object class index outside vocabulary")
            if not 0 <= rel.predicate_id < n_pred:
                raise ValueError("predicate index outside vocabulary")
            idx = torch.tensor([subj.class_id, rel.predicate_id, obj.class_id])
            parts = torch.cat(
                [
                    self.class_table(idx[0]),
                    self.pred_table(idx[1]),
                    self.class_table(idx[2]),
                ]
            )
            rows.append(self.proj(parts))
        rows.append(self.null_row.to(self.proj.weight.dtype))
        return torch.stack(rows)


def _masked_attention(q, k, v, mask: Optional[torch.Tensor]) -> torch.Tensor:
    scores = q @ k.T / math.sqrt(q.shape[-1])
    if mask is not None:
        if mask.shape != scores.shape:
            raise ValueError(f"mask shape {tuple(mask.shape)} != scores {tuple(scores.shape)}")
        scores = scores + mask
    return torch.softmax(scores, dim=-1) @ v


class SceneGraphConditioner(nn.Module):
    """Residual adapter enriching an (N, D) text embedding with graph structure."""

    def __init__(self, vocab: Vocab, dim: int = 64, neg_inf: float = NEG_INF):
        super().__init__()
        self.dim = dim
        self.neg_inf = neg_inf
        self.triples = TripleEmbedder(vocab, dim)
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.sq_proj = nn.Linear(dim, dim)
        self.sk_proj = nn.Linear(dim, dim)
        self.sv_proj = nn.Linear(dim, dim)
        nn.init.zeros_(self.v_proj.weight)
        nn.init.zeros_(self.v_proj.bias)
        nn.init.zeros_(self.sv_proj.weight)
        nn.init.zeros_(self.sv_proj.bias)
        self.satt_calls = 0  # skip-contract instrumentation

    def embed_triples(self, g: SceneGraph) -> torch.Tensor:
        return self.triples.embed_triples(g)

    def sgc_attention(
        self, w: torch.Tensor, e: torch.Tensor, mask: Optional[torch.Tensor] = None
    ) -> torch.Tensor:
        """Residual cross-attention from tokens to relation rows.

        With a mask, attention runs over all rows of ``e`` (relations plus
        the null fallback). Without one, the null row is dropped so the
        unmasked result coincides with the masked one whenever every token
        is mapped; an empty graph keeps the null row as the sole target.
        """
        if mask is None:
            keys = e[:-1] if e.shape[0] > 1 else e
        else:
            keys = e
        if not torch.is_tensor(mask) and mask is not None:
            mask = torch.as_tensor(mask, dtype=w.dtype)
        if mask is not None:
            mask = mask.to(w.dtype)
        update = _masked_attention(
            self.q_proj(w), self.k_proj(keys), self.v_proj(keys), mask
        )
        return w + update

    def relational_self_attention(self, w: torch.Tensor, satt_mask) -> torch.Tensor:
        """Residual masked self-attention over tokens; mask is mandatory here.

        The pipeline never calls this without a mask: configurations that
        drop the self-attention mask skip the stage entirely.
        """
        self.satt_calls += 1
        mask = torch.as_tensor(satt_mask, dtype=w.dtype)
        update = _masked_attention(self.sq_proj(w), self.sk_proj(w), self.sv_proj(w), mask)
        return w + update

    def condition(
        self,
        w: torch.Tensor,
        g: SceneGraph,
        cfg: ConditionerConfig,
        m: Optional[CaptionMapping] = None,
        masks: Optional[tuple] = None,
    ) -> torch.Tensor:
        """Apply the configured stages; baseline returns the input untouched.

        ``masks`` may supply precomputed (sgc_mask, satt_mask) arrays;
        otherwise they are built from the caption mapping.
        """
        if cfg.is_baseline:
            return w
        e = self.embed_triples(g)
        sgc_mask = satt_mask = None
        if masks is not None:
            sgc_mask, satt_mask = masks
        if cfg.use_sgc_mask:
            if sgc_mask is None:
                if m is None:
                    raise ValueError("caption mapping required to build the cross mask")
                sgc_mask = build_sgc_mask(m, self.neg_inf)
            sgc_mask = torch.as_tensor(np.asarray(sgc_mask), dtype=w.dtype)
        else:
            sgc_mask = None
        out = self.sgc_attention(w, e, sgc_mask)
        if cfg.use_satt_mask:
            if satt_mask is None:
                if m is None:
                    raise ValueError("caption mapping required to build the self mask")
                satt_mask = build_satt_mask(m, self.neg_inf)
            out = self.relational_self_attention(out, np.asarray(satt_mask))
        return out


def randomize_parameters(module: nn.Module, seed: int, scale: float = 0.05) -> None:
    """Deterministically re-draw every parameter; used by tests and training init."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for _, param in sorted(module.named_parameters(), key=lambda kv: kv[0]):
            param.copy_(torch.randn(param.shape, generator=gen, dtype=torch.float64)
                        .to(param.dtype) * scale)
