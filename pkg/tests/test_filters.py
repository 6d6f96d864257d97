import pytest

from sgaug.filters import FilterPolicy, apply_filters
from sgaug.graphs import ObjectNode, RelationTriple, SceneGraph
from sgaug.manifest import DatasetManifest, ManifestRecord
from sgaug.world import default_vocab

from corpus_util import build_filter_corpus


@pytest.fixture(scope="module")
def filtered():
    manifest, expected = build_filter_corpus()
    out, report = apply_filters(manifest, FilterPolicy())
    return manifest, out, report, expected


def test_policy_validation():
    with pytest.raises(ValueError):
        FilterPolicy(min_bbox_side=0)
    paper = FilterPolicy.paper_scale()
    assert paper.min_image_side == 500 and paper.min_bbox_side == 32


def test_each_criterion_removes_exactly_planted(filtered):
    _, out, report, expected = filtered
    got = report.to_dict()
    for key, value in expected.items():
        assert got[key] == value, f"{key}: expected {value}, got {got[key]}"


def test_idempotence(filtered):
    _, out, report, _ = filtered
    again, report2 = apply_filters(out, FilterPolicy())
    assert again.to_text() == out.to_text()
    removal_keys = ("image_size", "bbox_size", "rare_objects_stripped",
                    "rare_attributes_stripped", "no_annotations",
                    "too_many_relations", "caption_length")
    assert all(report2.to_dict()[k] == 0 for k in removal_keys)


def test_survivors_have_rebuilt_captions(filtered):
    _, out, _, _ = filtered
    for rec in out.records:
        assert rec.caption is not None
        assert rec.caption.relation_count == len(rec.graph.relations)


def test_rare_attribute_strip_keeps_record(filtered):
    manifest, out, _, _ = filtered
    vocab = manifest.vocab
    magenta = vocab.attribute_index("magenta")
    for rec in out.records:
        for node in rec.graph.objects:
            assert magenta not in node.attributes


def test_rare_object_strip_drops_their_relations(filtered):
    manifest, out, _, _ = filtered
    vocab = manifest.vocab
    star = vocab.object_index("star")
    for rec in out.records:
        assert all(n.class_id != star for n in rec.graph.objects)
        ids = {n.id for n in rec.graph.objects}
        for t in rec.graph.relations:
            assert t.subject_id in ids and t.object_id in ids


def test_bbox_edge_exactly_at_threshold_survives():
    vocab = default_vocab()
    nodes = (
        ObjectNode(0, 0, (vocab.attribute_index("red"),), (4, 4, 10, 24)),
        ObjectNode(1, 1, (vocab.attribute_index("blue"),), (36, 4, 56, 24)),
    )
    g = SceneGraph(nodes, (RelationTriple(0, 0, 1),), (64, 64))
    records = [ManifestRecord("x.png", g)] * 12  # keep attrs above min freq
    records = [ManifestRecord(f"{i}.png", g, seed=i) for i in range(12)]
    manifest = DatasetManifest(vocab, (64, 64), records)
    out, report = apply_filters(manifest, FilterPolicy())
    # box width exactly 6 == min_bbox_side passes
    assert report.bbox_size == 0 and len(out.records) == 12
