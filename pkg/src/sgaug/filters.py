"""Dataset filtering pipeline mirroring the standard annotation cleanup.

Criteria, applied in order per pass:

1. images whose width or height is under ``min_image_side``;
2. images containing a bounding box under ``min_bbox_side`` in width or
   height;
3. object classes seen fewer than ``min_object_count_freq`` times and
   attributes seen fewer than ``min_attribute_freq`` times corpus-wide
   are stripped from annotations (records themselves stay);
4. images left without any relations or objects;
5. images with more than ``max_relations`` relations;
6. images whose rebuilt caption exceeds ``max_caption_tokens`` tokens.

Because stripping rare annotations and removing records feed back into
the corpus-wide frequencies, the passes repeat until a fixpoint, which
makes the operation idempotent. Captions are rebuilt for surviving
records since stripping can change them.

Toy-scale thresholds default to values proportional to the full-scale
ones (500 -> 48 pixels for image side, 32 -> 6 for boxes); the
full-scale constants remain selectable for real-split runs.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field, replace

from .captions import CaptionTooLong, build_caption
from .graphs import ObjectNode, SceneGraph
from .manifest import DatasetManifest, ManifestRecord

PAPER_SCALE = {"min_image_side": 500, "min_bbox_side": 32}


@dataclass(frozen=True)
class FilterPolicy:
    min_image_side: int = 48
    min_bbox_side: int = 6
    min_object_count_freq: int = 3
    min_attribute_freq: int = 10
    max_relations: int = 20
    max_caption_tokens: int = 77

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if value <= 0:
                raise ValueError(f"{name} must be positive")

    @staticmethod
    def paper_scale(**overrides) -> "FilterPolicy":
        return FilterPolicy(**{**PAPER_SCALE, **overrides})


@dataclass
class FilterReport:
    """Removal counts per criterion, in pipeline order."""

    image_size: int = 0
    bbox_size: int = 0
    rare_objects_stripped: int = 0
    rare_attributes_stripped: int = 0
    no_annotations: int = 0
    too_many_relations: int = 0
    caption_length: int = 0
    passes: int = 0
    kept: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _record_size(record: ManifestRecord, manifest: DatasetManifest) -> tuple[int, int]:
    if record.graph.image_size is not None:
        return record.graph.image_size
    return manifest.image_size


def _strip_rare(records, report: FilterReport, policy: FilterPolicy):
    obj_counts: Counter = Counter()
    attr_counts: Counter = Counter()
    for rec in records:
        for node in rec.graph.objects:
            obj_counts[node.class_id] += 1
            for a in node.attributes:
                attr_counts[a] += 1
    rare_objs = {c for c, n in obj_counts.items() if n < policy.min_object_count_freq}
    rare_attrs = {a for a, n in attr_counts.items() if n < policy.min_attribute_freq}
    if not rare_objs and not rare_attrs:
        return records, False
    out = []
    for rec in records:
        kept_nodes = []
        for node in rec.graph.objects:
            if node.class_id in rare_objs:
                report.rare_objects_stripped += 1
                continue
            attrs = tuple(a for a in node.attributes if a not in rare_attrs)
            report.rare_attributes_stripped += len(node.attributes) - len(attrs)
            kept_nodes.append(replace(node, attributes=attrs) if attrs != node.attributes
                              else node)
        kept_ids = {n.id for n in kept_nodes}
        kept_rels = tuple(
            t for t in rec.graph.relations
            if t.subject_id in kept_ids and t.object_id in kept_ids
        )
        graph = SceneGraph(tuple(kept_nodes), kept_rels, rec.graph.image_size)
        out.append(replace(rec, graph=graph))
    return out, True


def apply_filters(manifest: DatasetManifest, policy: FilterPolicy):
    """Apply all criteria to a fixpoint; returns (filtered manifest, report)."""
    report = FilterReport()
    records = list(manifest.records)
    vocab = manifest.vocab
    changed = True
    while changed:
        changed = False
        report.passes += 1

        kept = []
        for rec in records:
            w, h = _record_size(rec, manifest)
            if w < policy.min_image_side or h < policy.min_image_side:
                report.image_size += 1
                changed = True
            else:
                kept.append(rec)
        records = kept

        kept = []
        for rec in records:
            small = any(
                node.bbox is not None
                and (node.bbox[2] - node.bbox[0] < policy.min_bbox_side
                     or node.bbox[3] - node.bbox[1] < policy.min_bbox_side)
                for node in rec.graph.objects
            )
            if small:
                report.bbox_size += 1
                changed = True
            else:
                kept.append(rec)
        records = kept

        records, stripped = _strip_rare(records, report, policy)
        changed = changed or stripped

        kept = []
        for rec in records:
            if not rec.graph.relations or not rec.graph.objects:
                report.no_annotations += 1
                changed = True
            else:
                kept.append(rec)
        records = kept

        kept = []
        for rec in records:
            if len(rec.graph.relations) > policy.max_relations:
                report.too_many_relations += 1
                changed = True
            else:
                kept.append(rec)
        records = kept

        kept = []
        for rec in records:
            if rec.freeform is not None and rec.caption is None:
                # Freeform records carry no recipe caption to re-check.
                if len(rec.freeform) > policy.max_caption_tokens:
                    report.caption_length += 1
                    changed = True
                    continue
                kept.append(rec)
                continue
            try:
                mapping = build_caption(rec.graph, vocab,
                                        max_len=policy.max_caption_tokens)
            except CaptionTooLong:
                report.caption_length += 1
                changed = True
                continue
            if rec.caption is None or mapping != rec.caption:
                rec = replace(rec, caption=mapping)
            kept.append(rec)
        records = kept

    report.kept = len(records)
    return manifest.with_records(records), report
