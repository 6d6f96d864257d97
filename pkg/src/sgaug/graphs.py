"""Scene-graph data model, validation, and canonical JSON serialization.

Graphs are immutable after construction and travel through the pipeline as
plain values. Serialization writes class/predicate/attribute *names* (not
indices) with sorted keys so manifests diff cleanly and stay readable
without the vocabulary at hand; parsing resolves names back through an
explicit :class:`Vocab`.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

DEFAULT_MAX_RELATIONS = 20


class GraphParseError(ValueError):
    """Malformed or vocabulary-inconsistent graph JSON."""


@dataclass(frozen=True)
class Vocab:
    """Ordered class lists for objects, predicates, and attributes.

    Index of a name is stable for a loaded vocab: ``object_classes[i]`` and
    ``object_index(name)`` are inverse bijections, and likewise for the
    other two lists.
    """

    object_classes: tuple[str, ...]
    predicate_classes: tuple[str, ...]
    attribute_classes: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "object_classes", tuple(self.object_classes))
        object.__setattr__(self, "predicate_classes", tuple(self.predicate_classes))
        object.__setattr__(self, "attribute_classes", tuple(self.attribute_classes))
        for label, names in (
            ("object", self.object_classes),
            ("predicate", self.predicate_classes),
        ):
            if not names:
                raise ValueError(f"{label} class list must be non-empty")
        for label, names in (
            ("object", self.object_classes),
            ("predicate", self.predicate_classes),
            ("attribute", self.attribute_classes),
        ):
            if len(set(names)) != len(names):
                raise ValueError(f"duplicate {label} class names")
            if any(not n for n in names):
                raise ValueError(f"empty {label} class name")
        object.__setattr__(self, "_obj_idx", {n: i for i, n in enumerate(self.object_classes)})
        object.__setattr__(self, "_pred_idx", {n: i for i, n in enumerate(self.predicate_classes)})
        object.__setattr__(self, "_attr_idx", {n: i for i, n in enumerate(self.attribute_classes)})

    def object_index(self, name: str) -> int:
        return self._obj_idx[name]

    def predicate_index(self, name: str) -> int:
        return self._pred_idx[name]

    def attribute_index(self, name: str) -> int:
        return self._attr_idx[name]

    def to_dict(self) -> dict:
        return {
            "object_classes": list(self.object_classes),
            "predicate_classes": list(self.predicate_classes),
            "attribute_classes": list(self.attribute_classes),
        }

    @staticmethod
    def from_dict(data: dict) -> "Vocab":
        return Vocab(
            tuple(data["object_classes"]),
            tuple(data["predicate_classes"]),
            tuple(data.get("attribute_classes", ())),
        )

    def content_hash(self) -> str:
        return hashlib.sha256(canonical_json(self.to_dict()).encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class ObjectNode:
    """Object instance: class, flat attribute list, optional pixel bbox.

    ``bbox`` is (x_min, y_min, x_max, y_max); ids are unique per graph only.
    """

    id: int
    class_id: int
    attributes: tuple[int, ...] = ()
    bbox: Optional[tuple[float, float, float, float]] = None

    def __post_init__(self):
        object.__setattr__(self, "attributes", tuple(self.attributes))
        if self.bbox is not None:
            object.__setattr__(self, "bbox", tuple(float(v) for v in self.bbox))


@dataclass(frozen=True)
class RelationTriple:
    """Directed (subject, predicate, object) edge between two node ids."""

    subject_id: int
    predicate_id: int
    object_id: int

    def key(self) -> tuple[int, int, int]:
        return (self.subject_id, self.predicate_id, self.object_id)


@dataclass(frozen=True)
class SceneGraph:
    objects: tuple[ObjectNode, ...] = ()
    relations: tuple[RelationTriple, ...] = ()
    image_size: Optional[tuple[int, int]] = None

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))
        object.__setattr__(self, "relations", tuple(self.relations))
        if self.image_size is not None:
            object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))

    def object_by_id(self, node_id: int) -> ObjectNode:
        for node in self.objects:
            if node.id == node_id:
                return node
        raise KeyError(node_id)


@dataclass(frozen=True)
class Violation:
    """One invariant failure; violations are data, not exceptions."""

    code: str
    detail: str

    def __str__(self) -> str:
        return f"{self.code}: {self.detail}"


def validate_graph(
    g: SceneGraph, v: Vocab, max_relations: int = DEFAULT_MAX_RELATIONS
) -> list[Violation]:
    """Check every graph/node/triple invariant against a vocabulary.

    Returns an empty list iff the graph is valid. An empty graph is
    vacuously valid.
    """
    out: list[Violation] = []
    ids = [node.id for node in g.objects]
    if len(set(ids)) != len(ids):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        out.append(Violation("duplicate-object-id", f"ids {dupes} repeat"))
    id_set = set(ids)

    for node in g.objects:
        if not 0 <= node.class_id < len(v.object_classes):
            out.append(Violation("bad-class-id", f"object {node.id} class_id {node.class_id}"))
        for a in node.attributes:
            if not 0 <= a < len(v.attribute_classes):
                out.append(Violation("bad-attribute-id", f"object {node.id} attribute {a}"))
        if node.bbox is not None:
            x0, y0, x1, y1 = node.bbox
            if not (x0 < x1 and y0 < y1):
                out.append(Violation("degenerate-bbox", f"object {node.id} bbox {node.bbox}"))
            elif g.image_size is not None:
                w, h = g.image_size
                if x0 < 0 or y0 < 0 or x1 > w or y1 > h:
                    out.append(
                        Violation("bbox-out-of-bounds", f"object {node.id} bbox {node.bbox}")
                    )

    seen: set[tuple[int, int, int]] = set()
    for t in g.relations:
        name = f"({t.subject_id},{t.predicate_id},{t.object_id})"
        if t.subject_id == t.object_id:
            out.append(Violation("self-relation", f"triple {name} relates object to itself"))
        if t.subject_id not in id_set:
            out.append(Violation("dangling-subject", f"triple {name}"))
        if t.object_id not in id_set:
            out.append(Violation("dangling-object", f"triple {name}"))
        if not 0 <= t.predicate_id < len(v.predicate_classes):
            out.append(Violation("bad-predicate-id", f"triple {name}"))
        if t.key() in seen:
            out.append(Violation("duplicate-triple", f"triple {name}"))
        seen.add(t.key())

    if len(g.relations) > max_relations:
        out.append(
            Violation("relation-count", f"{len(g.relations)} relations exceed max {max_relations}")
        )
    return out


def canonical_json(obj) -> str:
    """Deterministic JSON: sorted keys, no whitespace, NaN rejected.

    Floats use Python's shortest round-trip repr, which is stable across
    runs and parses back to the identical value.
    """
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False,
                      allow_nan=False)


def _graph_to_dict(g: SceneGraph, v: Vocab) -> dict:
    data: dict = {
        "objects": [
            {
                "id": node.id,
                "class": v.object_classes[node.class_id],
                "attributes": [v.attribute_classes[a] for a in node.attributes],
                **({"bbox": list(node.bbox)} if node.bbox is not None else {}),
            }
            for node in g.objects
        ],
        "relations": [
            {
                "subject": t.subject_id,
                "predicate": v.predicate_classes[t.predicate_id],
                "object": t.object_id,
            }
            for t in g.relations
        ],
    }
    if g.image_size is not None:
        data["image_size"] = list(g.image_size)
    return data


def serialize_graph(g: SceneGraph, v: Vocab) -> str:
    """Canonical JSON text for a valid graph; inverse of :func:`parse_graph`."""
    return canonical_json(_graph_to_dict(g, v))


def graph_from_dict(data: dict, v: Vocab) -> SceneGraph:
    try:
        objects = []
        for entry in data["objects"]:
            cls = entry["class"]
            if cls not in v._obj_idx:
                raise GraphParseError(f"unknown object class {cls!r}")
            attrs = []
            for a in entry.get("attributes", []):
                if a not in v._attr_idx:
                    raise GraphParseError(f"unknown attribute {a!r}")
                attrs.append(v.attribute_index(a))
            bbox = entry.get("bbox")
            objects.append(
                ObjectNode(
                    id=int(entry["id"]),
                    class_id=v.object_index(cls),
                    attributes=tuple(attrs),
                    bbox=tuple(bbox) if bbox is not None else None,
                )
            )
        relations = []
        for entry in data["relations"]:
            pred = entry["predicate"]
            if pred not in v._pred_idx:
                raise GraphParseError(f"unknown predicate {pred!r}")
            relations.append(
                RelationTriple(
                    subject_id=int(entry["subject"]),
                    predicate_id=v.predicate_index(pred),
                    object_id=int(entry["object"]),
                )
            )
    except KeyError as exc:
        raise GraphParseError(f"missing field {exc.args[0]!r}") from exc
    size = data.get("image_size")
    return SceneGraph(
        objects=tuple(objects),
        relations=tuple(relations),
        image_size=tuple(size) if size is not None else None,
    )


def parse_graph(text: str, v: Vocab) -> SceneGraph:
    """Parse canonical graph JSON; errors carry line/char position."""
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GraphParseError(
            f"malformed JSON at line {exc.lineno} char {exc.colno}: {exc.msg}"
        ) from exc
    if not isinstance(data, dict):
        raise GraphParseError("graph JSON must be an object")
    return graph_from_dict(data, v)


def dedupe_relations(relations: Sequence[RelationTriple]) -> tuple[tuple[RelationTriple, ...], int]:
    """Drop exact duplicate triples, preserving first occurrence order."""
    seen: set[tuple[int, int, int]] = set()
    kept: list[RelationTriple] = []
    dropped = 0
    for t in relations:
        if t.key() in seen:
            dropped += 1
            continue
        seen.add(t.key())
        kept.append(t)
    return tuple(kept), dropped
