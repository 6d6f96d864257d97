import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sgaug.graphs import ObjectNode, RelationTriple, SceneGraph, Vocab
from sgaug.metrics import (
    RecallAccumulator,
    RelPrediction,
    per_predicate_recall,
    recall_at_k,
)

VOCAB = Vocab(("circle", "square", "triangle"), ("left of", "above", "near"),
              ())


def gt_graph(triples, boxes):
    nodes = tuple(
        ObjectNode(i, cls, (), bbox) for i, (cls, bbox) in enumerate(boxes)
    )
    rels = tuple(RelationTriple(s, p, o) for s, p, o in triples)
    return SceneGraph(nodes, rels, (64, 64))


# -- independent exhaustive oracle ------------------------------------------


def _iou2(a, b):
    # deliberately different arrangement from the implementation's box_iou
    ax = max(a[0], b[0]), min(a[2], b[2])
    ay = max(a[1], b[1]), min(a[3], b[3])
    iw = ax[1] - ax[0]
    ih = ay[1] - ay[0]
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    area = lambda r: (r[2] - r[0]) * (r[3] - r[1])
    return inter / (area(a) + area(b) - inter)


def oracle_recall(predictions, gt, k, graph_constraint, iou=0.5):
    candidates = []
    for p in predictions:
        if graph_constraint:
            best, best_s = None, None
            for idx, s in enumerate(p.scores):
                if best_s is None or s > best_s:
                    best, best_s = idx, s
            chosen = [(best, best_s)]
        else:
            chosen = list(enumerate(p.scores))
        for pred_id, score in chosen:
            candidates.append((score, p, pred_id))
    candidates.sort(
        key=lambda c: (
            -c[0],
            VOCAB.object_classes[c[1].subject_class],
            VOCAB.predicate_classes[c[2]],
            VOCAB.object_classes[c[1].object_class],
            c[1].subject_box,
            c[1].object_box,
        )
    )
    top = candidates[:k]
    hits = 0
    per_pred_hits, per_pred_total = {}, {}
    for t in gt.relations:
        subj = next(n for n in gt.objects if n.id == t.subject_id)
        obj = next(n for n in gt.objects if n.id == t.object_id)
        per_pred_total[t.predicate_id] = per_pred_total.get(t.predicate_id, 0) + 1
        hit = False
        for score, p, pred_id in top:
            if (
                pred_id == t.predicate_id
                and p.subject_class == subj.class_id
                and p.object_class == obj.class_id
                and _iou2(p.subject_box, subj.bbox) >= iou
                and _iou2(p.object_box, obj.bbox) >= iou
            ):
                hit = True
                break
        if hit:
            hits += 1
            per_pred_hits[t.predicate_id] = per_pred_hits.get(t.predicate_id, 0) + 1
    frac = hits / len(gt.relations) if gt.relations else 0.0
    per_pred = {
        p: per_pred_hits.get(p, 0) / n for p, n in per_pred_total.items()
    }
    return frac, per_pred


# -- pinned examples ---------------------------------------------------------


def exact_pred(gt, t, scores):
    subj = next(n for n in gt.objects if n.id == t.subject_id)
    obj = next(n for n in gt.objects if n.id == t.object_id)
    return RelPrediction(subj.bbox, subj.class_id, obj.bbox, obj.class_id, scores)


def test_superset_predictions_full_recall():
    gt = gt_graph(
        [(0, 0, 1), (1, 1, 0)],
        [(0, (0, 0, 10, 10)), (1, (20, 20, 30, 30))],
    )
    preds = [
        exact_pred(gt, gt.relations[0], (0.9, 0.1, 0.1)),
        exact_pred(gt, gt.relations[1], (0.1, 0.8, 0.1)),
    ]
    assert recall_at_k(preds, gt, 20, VOCAB) == 1.0


def test_empty_predictions_zero():
    gt = gt_graph([(0, 0, 1)], [(0, (0, 0, 10, 10)), (1, (20, 0, 30, 10))])
    assert recall_at_k([], gt, 20, VOCAB) == 0.0


def test_crafted_three_of_five_hits():
    # 5 GT triples; 10 predictions of which exactly 3 hit inside the top-K
    boxes = [(i, (i * 10.0, 0.0, i * 10.0 + 8.0, 8.0)) for i in range(5)]
    boxes = [(i % 3, b[1]) for i, b in enumerate(boxes)]
    gt = gt_graph(
        [(0, 0, 1), (1, 1, 2), (2, 2, 3), (3, 0, 4), (4, 1, 0)], boxes
    )
    hits = [
        exact_pred(gt, gt.relations[0], (0.95, 0.0, 0.0)),
        exact_pred(gt, gt.relations[1], (0.0, 0.90, 0.0)),
        exact_pred(gt, gt.relations[2], (0.0, 0.0, 0.85)),
    ]
    far = (100.0, 100.0, 108.0, 108.0)
    misses = [
        RelPrediction(far, 0, (120.0, 100.0, 128.0, 108.0), 1, (0.99, 0.0, 0.0))
        for _ in range(7)
    ]
    preds = hits + misses
    got = recall_at_k(preds, gt, 10, VOCAB)
    assert got == pytest.approx(0.6)
    oracle, _ = oracle_recall(preds, gt, 10, graph_constraint=True)
    assert got == oracle


def test_low_k_cuts_hits():
    gt = gt_graph([(0, 0, 1)], [(0, (0, 0, 10, 10)), (1, (20, 0, 30, 10))])
    decoy = RelPrediction((40.0, 40.0, 50.0, 50.0), 2,
                          (52.0, 40.0, 62.0, 50.0), 2, (0.99, 0.0, 0.0))
    hit = exact_pred(gt, gt.relations[0], (0.5, 0.0, 0.0))
    assert recall_at_k([decoy, hit], gt, 1, VOCAB) == 0.0
    assert recall_at_k([decoy, hit], gt, 2, VOCAB) == 1.0


def test_k_validation():
    gt = gt_graph([(0, 0, 1)], [(0, (0, 0, 10, 10)), (1, (20, 0, 30, 10))])
    for bad in (0, -3, 2.5, "10"):
        with pytest.raises(ValueError):
            recall_at_k([], gt, bad, VOCAB)
    with pytest.raises(ValueError):
        per_predicate_recall([], gt, VOCAB, k=0)


def test_per_predicate_cases():
    gt = gt_graph(
        [(0, 0, 1), (1, 0, 0), (0, 1, 1)],
        [(0, (0, 0, 10, 10)), (1, (20, 0, 30, 10))],
    )
    preds = [
        exact_pred(gt, gt.relations[0], (0.9, 0.0, 0.0)),
        exact_pred(gt, gt.relations[2], (0.0, 0.8, 0.0)),
    ]
    out = per_predicate_recall(preds, gt, VOCAB, k=100)
    assert out[0] == pytest.approx(0.5)  # one of the two "left of" hit
    assert out[1] == pytest.approx(1.0)
    assert 2 not in out  # "near" absent from GT -> absent from map


# -- randomized oracle equivalence -------------------------------------------


@st.composite
def fixture(draw):
    n_boxes = draw(st.integers(2, 4))
    boxes = []
    for i in range(n_boxes):
        x0 = draw(st.integers(0, 40))
        y0 = draw(st.integers(0, 40))
        boxes.append((draw(st.integers(0, 2)),
                      (float(x0), float(y0), float(x0 + draw(st.integers(4, 12))),
                       float(y0 + draw(st.integers(4, 12))))))
    n_gt = draw(st.integers(1, 6))
    triples = set()
    for _ in range(n_gt):
        s = draw(st.integers(0, n_boxes - 1))
        o = draw(st.integers(0, n_boxes - 1))
        p = draw(st.integers(0, 2))
        if s != o:
            triples.add((s, p, o))
    gt = gt_graph(sorted(triples), boxes)
    n_pred = draw(st.integers(0, 12))
    preds = []
    for _ in range(n_pred):
        sb = draw(st.integers(0, n_boxes - 1))
        ob = draw(st.integers(0, n_boxes - 1))
        jitter = draw(st.integers(0, 4))
        sbox = tuple(v + jitter for v in boxes[sb][1])
        obox = tuple(v - jitter for v in boxes[ob][1])
        # coarse scores force ties; tie-break path gets exercised
        scores = tuple(round(draw(st.floats(0, 1)), 1) for _ in range(3))
        preds.append(
            RelPrediction(sbox, draw(st.integers(0, 2)), obox,
                          draw(st.integers(0, 2)), scores)
        )
    k = draw(st.sampled_from([1, 2, 3, 5, 10, 20]))
    return preds, gt, k


@settings(max_examples=250, deadline=None)
@given(fixture())
def test_oracle_equivalence_both_modes(fx):
    preds, gt, k = fx
    if not gt.relations:
        return
    for mode in (True, False):
        got = recall_at_k(preds, gt, k, VOCAB, graph_constraint=mode)
        want, _ = oracle_recall(preds, gt, k, graph_constraint=mode)
        assert got == pytest.approx(want)
    got_pp = per_predicate_recall(preds, gt, VOCAB, k=k)
    _, want_pp = oracle_recall(preds, gt, k, graph_constraint=True)
    named = {p: v for p, v in got_pp.items()}
    assert named == pytest.approx(want_pp)


@settings(max_examples=120, deadline=None)
@given(fixture())
def test_monotone_in_k_and_ng_dominates(fx):
    preds, gt, _ = fx
    if not gt.relations:
        return
    prev_c = prev_n = 0.0
    for k in (1, 2, 5, 10, 20, 50):
        c = recall_at_k(preds, gt, k, VOCAB, graph_constraint=True)
        n = recall_at_k(preds, gt, k, VOCAB, graph_constraint=False)
        assert c >= prev_c - 1e-12
        assert n >= prev_n - 1e-12
        assert n >= c - 1e-12  # NG admits every candidate the constraint kept
        prev_c, prev_n = c, n


def test_accumulator_aggregates_means():
    gt = gt_graph([(0, 0, 1)], [(0, (0, 0, 10, 10)), (1, (20, 0, 30, 10))])
    acc = RecallAccumulator(VOCAB, ks=(1, 2))
    acc.add_image([exact_pred(gt, gt.relations[0], (0.9, 0.0, 0.0))], gt)
    acc.add_image([], gt)
    out = acc.results()
    assert out["recall"][1] == pytest.approx(0.5)
    assert out["per_predicate"]["left of"] == pytest.approx(0.5)
