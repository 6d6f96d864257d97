"""Caption construction and the token-to-relation map.

Captions for conditioning are built by concatenation: each object as
"[attributes] class", then each relation as "class_s predicate class_o",
in input (annotation) order. Only relation-span tokens are mapped to a
relation index; object-description tokens stay unmapped and are handled
by the mask builder's fallback column. Multi-word predicates occupy
several tokens, all mapped to the same relation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .graphs import SceneGraph, Vocab

MAX_TOKENS = 77


class CaptionTooLong(ValueError):
    """Caption exceeds the token budget; the sample must be excluded."""


@dataclass(frozen=True)
class TokenSeq:
    tokens: tuple[str, ...]
    max_len: int = MAX_TOKENS

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if any(not t for t in self.tokens):
            raise ValueError("empty token")
        if len(self.tokens) > self.max_len:
            raise CaptionTooLong(f"{len(self.tokens)} tokens exceed max_len {self.max_len}")

    def __len__(self) -> int:
        return len(self.tokens)

    def text(self) -> str:
        return " ".join(self.tokens)


@dataclass(frozen=True)
class CaptionMapping:
    """A caption plus the partial map from token index to relation index.

    ``tau`` maps exactly the tokens of relation k's span to k; every
    relation index in [0, relation_count) is hit by at least one token.
    ``relation_endpoints`` carries each relation's (subject_id, object_id)
    so the relational self-attention mask can be built from the mapping
    alone.
    """

    caption: TokenSeq
    tau: dict[int, int]
    relation_count: int
    relation_endpoints: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "tau", dict(self.tau))
        object.__setattr__(
            self, "relation_endpoints", tuple(tuple(e) for e in self.relation_endpoints)
        )
        n = len(self.caption)
        for i, k in self.tau.items():
            if not 0 <= i < n:
                raise ValueError(f"tau token index {i} outside caption of length {n}")
            if not 0 <= k < self.relation_count:
                raise ValueError(f"tau relation index {k} outside [0,{self.relation_count})")
        covered = set(self.tau.values())
        if covered != set(range(self.relation_count)):
            orphans = sorted(set(range(self.relation_count)) - covered)
            raise ValueError(f"orphan relations with no mapped token: {orphans}")
        if self.relation_endpoints and len(self.relation_endpoints) != self.relation_count:
            raise ValueError("relation_endpoints length must equal relation_count")

    def to_dict(self) -> dict:
        return {
            "tokens": list(self.caption.tokens),
            "max_len": self.caption.max_len,
            "tau": sorted([i, k] for i, k in self.tau.items()),
            "relation_count": self.relation_count,
            "relation_endpoints": [list(e) for e in self.relation_endpoints],
        }

    @staticmethod
    def from_dict(data: dict) -> "CaptionMapping":
        return CaptionMapping(
            caption=TokenSeq(tuple(data["tokens"]), data.get("max_len", MAX_TOKENS)),
            tau={int(i): int(k) for i, k in data["tau"]},
            relation_count=int(data["relation_count"]),
            relation_endpoints=tuple(tuple(e) for e in data.get("relation_endpoints", ())),
        )


def tokenize(text: str, max_len: int = MAX_TOKENS) -> TokenSeq:
    """Whitespace-delimited lowercase tokens; stable across runs."""
    return TokenSeq(tuple(text.lower().split()), max_len=max_len)


def _object_phrase(node, v: Vocab) -> str:
    words = [v.attribute_classes[a] for a in node.attributes]
    words.append(v.object_classes[node.class_id])
    return " ".join(words)


def build_caption(g: SceneGraph, v: Vocab, max_len: int = MAX_TOKENS) -> CaptionMapping:
    """Concatenate object phrases then relation phrases, recording tau.

    Object and relation order is the graph's input order; sorting would
    silently change tau spans. Relation spans repeat bare class names
    (attribute words are not repeated inside spans). Raises
    :class:`CaptionTooLong` past the token budget so the caller can
    exclude the sample.
    """
    words: list[str] = []
    for node in g.objects:
        words.extend(_object_phrase(node, v).split())
    tau: dict[int, int] = {}
    endpoints: list[tuple[int, int]] = []
    for k, rel in enumerate(g.relations):
        subj = g.object_by_id(rel.subject_id)
        obj = g.object_by_id(rel.object_id)
        span = (
            f"{v.object_classes[subj.class_id]} "
            f"{v.predicate_classes[rel.predicate_id]} "
            f"{v.object_classes[obj.class_id]}"
        ).split()
        start = len(words)
        words.extend(span)
        for i in range(start, len(words)):
            tau[i] = k
        endpoints.append((rel.subject_id, rel.object_id))
    caption = tokenize(" ".join(words), max_len=max_len)
    return CaptionMapping(
        caption=caption,
        tau=tau,
        relation_count=len(g.relations),
        relation_endpoints=tuple(endpoints),
    )


_INTROS = ("a picture of", "an image showing", "a scene with")
_LINKS = ("and", "while", "as well as")


def _article(word: str) -> str:
    return "an" if word[0] in "aeiou" else "a"


def freeform_caption(g: SceneGraph, v: Vocab, template_seed: int,
                     max_len: int = MAX_TOKENS) -> TokenSeq:
    """Natural-language-style caption from a small template family.

    Produces no token-to-relation map; used by the mask-free conditioning
    configuration. Deterministic given (graph, vocab, seed); every
    relation's predicate is mentioned.
    """
    rng = np.random.default_rng(template_seed)
    intro = _INTROS[rng.integers(len(_INTROS))]
    phrases = []
    for node in g.objects:
        desc = _object_phrase(node, v)
        phrases.append(f"{_article(desc.split()[0])} {desc}")
    parts = [intro]
    if phrases:
        parts.append(phrases[0])
        for p in phrases[1:]:
            parts.append(_LINKS[rng.integers(len(_LINKS))])
            parts.append(p)
    for rel in g.relations:
        subj = g.object_by_id(rel.subject_id)
        obj = g.object_by_id(rel.object_id)
        parts.append(
            f"where the {v.object_classes[subj.class_id]} is "
            f"{v.predicate_classes[rel.predicate_id]} the "
            f"{v.object_classes[obj.class_id]}"
        )
    return tokenize(" ".join(parts), max_len=max_len)
