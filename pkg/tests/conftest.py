import numpy as np
import pytest

from sgaug.graphs import ObjectNode, RelationTriple, SceneGraph, Vocab


@pytest.fixture
def toy_vocab():
    return Vocab(
        object_classes=("circle", "square", "triangle"),
        predicate_classes=("left of", "above", "near"),
        attribute_classes=("red", "blue", "small", "large"),
    )


def make_graph(objects, relations, vocab, image_size=(64, 64)):
    """objects: [(class_name, [attr names], bbox or None)], relations:
    [(subj_idx, pred_name, obj_idx)]."""
    nodes = tuple(
        ObjectNode(
            id=i,
            class_id=vocab.object_index(cls),
            attributes=tuple(vocab.attribute_index(a) for a in attrs),
            bbox=bbox,
        )
        for i, (cls, attrs, bbox) in enumerate(objects)
    )
    triples = tuple(
        RelationTriple(s, vocab.predicate_index(p), o) for s, p, o in relations
    )
    return SceneGraph(nodes, triples, image_size)


@pytest.fixture
def simple_pair_graph(toy_vocab):
    """Red circle left of blue square."""
    return make_graph(
        [
            ("circle", ["red"], (4, 20, 24, 40)),
            ("square", ["blue"], (40, 20, 60, 40)),
        ],
        [(0, "left of", 1)],
        toy_vocab,
    )
