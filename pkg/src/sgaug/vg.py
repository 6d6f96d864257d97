"""Reader for Visual-Genome-split-style annotation files.

Two JSON files are consumed: an objects file (one record per image with
boxes and class names) and a relationships file (triples referencing
object ids). Annotations that cannot be resolved against the vocabulary
are dropped and counted rather than raised: the split is meant to be
filtered, not rejected wholesale. Relation-count capping is left to the
dataset filter stage.

Objects file record:
    {"image_id": 1, "width": 800, "height": 600,
     "objects": [{"object_id": 10, "names": ["circle"], "x": 1, "y": 2,
                  "w": 30, "h": 40, "attributes": ["red"]}]}

Relationships file record:
    {"image_id": 1,
     "relationships": [{"predicate": "left of", "subject_id": 10,
                        "object_id": 11}]}

``subject_id``/``object_id`` may also be given as VG-style nested dicts
(``{"object_id": 10, ...}``).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .graphs import ObjectNode, RelationTriple, SceneGraph, Vocab, dedupe_relations


class VgFormatError(ValueError):
    """Structurally malformed annotation record."""


@dataclass
class IngestStats:
    images: int = 0
    objects_dropped_unknown_class: int = 0
    objects_dropped_bad_bbox: int = 0
    attributes_dropped_unknown: int = 0
    relations_dropped_unknown_predicate: int = 0
    relations_dropped_dangling: int = 0
    relations_dropped_duplicate: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _ref_id(value) -> int:
    if isinstance(value, dict):
        return int(value["object_id"])
    return int(value)


def _load_records(path) -> list[dict]:
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, list):
        raise VgFormatError(f"{path}: expected a top-level JSON list")
    return data


def ingest_vg_split(objects_file, relations_file, v: Vocab):
    """Build one SceneGraph per image record.

    Returns ``(graphs, stats)``. Relations referencing dropped objects are
    dropped; duplicate triples are deduplicated after object filtering.
    Raises :class:`VgFormatError` with the offending record index on
    structurally malformed input.
    """
    obj_records = _load_records(objects_file)
    rel_records = _load_records(relations_file)
    rels_by_image: dict[int, list[dict]] = {}
    for idx, rec in enumerate(rel_records):
        try:
            rels_by_image[int(rec["image_id"])] = rec.get("relationships", [])
        except (KeyError, TypeError) as exc:
            raise VgFormatError(f"relationships record {idx}: {exc!r}") from exc

    graphs: list[SceneGraph] = []
    stats = IngestStats()
    for idx, rec in enumerate(obj_records):
        try:
            image_id = int(rec["image_id"])
            raw_objects = rec["objects"]
        except (KeyError, TypeError) as exc:
            raise VgFormatError(f"objects record {idx}: {exc!r}") from exc
        width = rec.get("width")
        height = rec.get("height")
        image_size = (int(width), int(height)) if width and height else None

        id_map: dict[int, int] = {}
        nodes: list[ObjectNode] = []
        for obj in raw_objects:
            try:
                vg_id = int(obj["object_id"])
                names = obj["names"]
                x, y, w, h = (float(obj[k]) for k in ("x", "y", "w", "h"))
            except (KeyError, TypeError) as exc:
                raise VgFormatError(f"objects record {idx}: {exc!r}") from exc
            name = names[0] if names else ""
            if name not in v._obj_idx:
                stats.objects_dropped_unknown_class += 1
                continue
            bbox = (x, y, x + w, y + h)
            if w <= 0 or h <= 0:
                stats.objects_dropped_bad_bbox += 1
                continue
            if image_size is not None:
                # Clamp VG's occasional off-by-a-few boxes instead of dropping.
                bbox = (
                    max(0.0, bbox[0]),
                    max(0.0, bbox[1]),
                    min(float(image_size[0]), bbox[2]),
                    min(float(image_size[1]), bbox[3]),
                )
                if bbox[0] >= bbox[2] or bbox[1] >= bbox[3]:
                    stats.objects_dropped_bad_bbox += 1
                    continue
            attrs = []
            for a in obj.get("attributes", []):
                if a in v._attr_idx:
                    attrs.append(v.attribute_index(a))
                else:
                    stats.attributes_dropped_unknown += 1
            local_id = len(nodes)
            id_map[vg_id] = local_id
            nodes.append(ObjectNode(id=local_id, class_id=v.object_index(name),
                                    attributes=tuple(attrs), bbox=bbox))

        triples: list[RelationTriple] = []
        for rel in rels_by_image.get(image_id, []):
            try:
                pred = rel["predicate"]
                subj = _ref_id(rel.get("subject_id", rel.get("subject")))
                obj_ref = _ref_id(rel.get("object_id", rel.get("object")))
            except (KeyError, TypeError) as exc:
                raise VgFormatError(f"relationships for image {image_id}: {exc!r}") from exc
            if pred not in v._pred_idx:
                stats.relations_dropped_unknown_predicate += 1
                continue
            if subj not in id_map or obj_ref not in id_map or subj == obj_ref:
                stats.relations_dropped_dangling += 1
                continue
            triples.append(
                RelationTriple(id_map[subj], v.predicate_index(pred), id_map[obj_ref])
            )
        deduped, dropped = dedupe_relations(triples)
        stats.relations_dropped_duplicate += dropped
        stats.images += 1
        graphs.append(SceneGraph(objects=tuple(nodes), relations=deduped,
                                 image_size=image_size))
    return graphs, stats
