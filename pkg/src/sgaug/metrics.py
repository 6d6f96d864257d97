"""Recall@K metric suite for relation predictions.

A prediction carries an ordered subject/object box pair with classes and
a per-predicate score vector. Candidates are ranked globally per image:
under the graph constraint only each pair's single best predicate enters
the ranking; without it every predicate hypothesis does. A ground-truth
triple counts as hit when some top-K candidate matches its predicate and
both endpoints (class equality and box IoU >= 0.5); each ground-truth
triple is matched at most once, while one candidate may verify several
ground-truth triples.

Ties in score are broken by (subject class, predicate, object class)
lexicographically on names, then by box coordinates, so rankings are
reproducible across platforms.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .graphs import SceneGraph, Vocab
from .world import box_iou

DEFAULT_IOU = 0.5
RECALL_KS = (20, 50, 100)


@dataclass(frozen=True)
class RelPrediction:
    """One ordered object pair with a score for every predicate."""

    subject_box: tuple[float, float, float, float]
    subject_class: int
    object_box: tuple[float, float, float, float]
    object_class: int
    scores: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "scores", tuple(float(s) for s in self.scores))
        if not all(np.isfinite(self.scores)):
            raise ValueError("prediction scores must be finite")


@dataclass(frozen=True)
class _Candidate:
    subject_box: tuple
    subject_class: int
    object_box: tuple
    object_class: int
    predicate_id: int
    score: float


def _rank_candidates(
    predictions: Sequence[RelPrediction],
    vocab: Vocab,
    graph_constraint: bool,
) -> list[_Candidate]:
    cands: list[_Candidate] = []
    for p in predictions:
        if graph_constraint:
            best = int(np.argmax(p.scores))
            preds = [best]
        else:
            preds = range(len(p.scores))
        for k in preds:
            cands.append(
                _Candidate(p.subject_box, p.subject_class, p.object_box,
                           p.object_class, k, p.scores[k])
            )
    cands.sort(
        key=lambda c: (
            -c.score,
            vocab.object_classes[c.subject_class],
            vocab.predicate_classes[c.predicate_id],
            vocab.object_classes[c.object_class],
            c.subject_box,
            c.object_box,
        )
    )
    return cands


def _matches(c: _Candidate, gt_triple, gt_graph: SceneGraph, iou_thresh: float) -> bool:
    if c.predicate_id != gt_triple.predicate_id:
        return False
    subj = gt_graph.object_by_id(gt_triple.subject_id)
    obj = gt_graph.object_by_id(gt_triple.object_id)
    if c.subject_class != subj.class_id or c.object_class != obj.class_id:
        return False
    return (
        box_iou(c.subject_box, subj.bbox) >= iou_thresh
        and box_iou(c.object_box, obj.bbox) >= iou_thresh
    )


def recall_at_k(
    predictions: Sequence[RelPrediction],
    gt: SceneGraph,
    k: int,
    vocab: Vocab,
    graph_constraint: bool = True,
    iou_thresh: float = DEFAULT_IOU,
) -> float:
    """Fraction of ground-truth triples hit within the top-K candidates."""
    if not isinstance(k, int) or k < 1:
        raise ValueError(f"K must be a positive integer, got {k!r}")
    if not gt.relations:
        return 0.0
    top = _rank_candidates(predictions, vocab, graph_constraint)[:k]
    hits = 0
    for t in gt.relations:
        if any(_matches(c, t, gt, iou_thresh) for c in top):
            hits += 1
    return hits / len(gt.relations)


def per_predicate_recall(
    predictions: Sequence[RelPrediction],
    gt: SceneGraph,
    vocab: Vocab,
    k: int = 100,
    graph_constraint: bool = True,
    iou_thresh: float = DEFAULT_IOU,
) -> dict[int, float]:
    """Recall restricted to each predicate's ground-truth triples.

    Predicates absent from the ground truth are absent from the map.
    """
    if not isinstance(k, int) or k < 1:
        raise ValueError(f"K must be a positive integer, got {k!r}")
    top = _rank_candidates(predictions, vocab, graph_constraint)[:k]
    hits: dict[int, int] = {}
    totals: dict[int, int] = {}
    for t in gt.relations:
        totals[t.predicate_id] = totals.get(t.predicate_id, 0) + 1
        if any(_matches(c, t, gt, iou_thresh) for c in top):
            hits[t.predicate_id] = hits.get(t.predicate_id, 0) + 1
    return {p: hits.get(p, 0) / n for p, n in totals.items()}


@dataclass
class RecallAccumulator:
    """Mean-over-images aggregation for both constraint modes and all K."""

    vocab: Vocab
    ks: tuple[int, ...] = RECALL_KS
    per_predicate_k: int = 100

    def __post_init__(self):
        self._recall: dict[int, list[float]] = {k: [] for k in self.ks}
        self._ng: dict[int, list[float]] = {k: [] for k in self.ks}
        self._pp_hits: dict[int, int] = {}
        self._pp_totals: dict[int, int] = {}

    def add_image(self, predictions: Sequence[RelPrediction], gt: SceneGraph) -> None:
        if not gt.relations:
            return
        for k in self.ks:
            self._recall[k].append(
                recall_at_k(predictions, gt, k, self.vocab, graph_constraint=True)
            )
            self._ng[k].append(
                recall_at_k(predictions, gt, k, self.vocab, graph_constraint=False)
            )
        per_img = per_predicate_recall(
            predictions, gt, self.vocab, k=self.per_predicate_k, graph_constraint=True
        )
        for t in gt.relations:
            self._pp_totals[t.predicate_id] = self._pp_totals.get(t.predicate_id, 0) + 1
        counts: dict[int, int] = {}
        for t in gt.relations:
            counts[t.predicate_id] = counts.get(t.predicate_id, 0) + 1
        for p, frac in per_img.items():
            self._pp_hits[p] = self._pp_hits.get(p, 0) + round(frac * counts[p])

    def results(self) -> dict:
        recall = {k: float(np.mean(v)) if v else 0.0 for k, v in self._recall.items()}
        ng = {k: float(np.mean(v)) if v else 0.0 for k, v in self._ng.items()}
        per_pred = {
            self.vocab.predicate_classes[p]: self._pp_hits.get(p, 0) / n
            for p, n in sorted(self._pp_totals.items())
        }
        return {"recall": recall, "ng_recall": ng, "per_predicate": per_pred}
