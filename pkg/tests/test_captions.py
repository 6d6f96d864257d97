import pytest
from hypothesis import given, settings, strategies as st

from sgaug.captions import (
    CaptionMapping,
    CaptionTooLong,
    TokenSeq,
    build_caption,
    freeform_caption,
    tokenize,
)
from sgaug.graphs import ObjectNode, RelationTriple, SceneGraph

from conftest import make_graph


def test_tokenize_lowercases():
    assert tokenize("Red Circle").tokens == ("red", "circle")


def test_tokenize_empty():
    assert tokenize("").tokens == ()


def test_tokenize_collapses_whitespace():
    assert tokenize("a  b").tokens == ("a", "b")


def test_build_caption_example(toy_vocab, simple_pair_graph):
    m = build_caption(simple_pair_graph, toy_vocab)
    assert m.caption.tokens == (
        "red", "circle", "blue", "square", "circle", "left", "of", "square",
    )
    assert m.tau == {4: 0, 5: 0, 6: 0, 7: 0}
    assert m.relation_count == 1
    assert m.relation_endpoints == ((0, 1),)


def test_build_caption_no_relations(toy_vocab):
    g = make_graph([("circle", ["red"], None)], [], toy_vocab)
    m = build_caption(g, toy_vocab)
    assert m.caption.tokens == ("red", "circle")
    assert m.tau == {}
    assert m.relation_count == 0


def _dense_graph(toy_vocab, n_two_word_rels):
    """3 bare-attribute objects + n relations with two-word predicates."""
    objects = [("circle", ["red"], None), ("square", ["blue"], None),
               ("triangle", ["red"], None)]
    pairs = [(0, 1), (1, 0), (0, 2), (2, 0), (1, 2), (2, 1)]
    rels = []
    for p_name in ("left of", "above", "near"):
        for s, o in pairs:
            rels.append((s, p_name, o))
    # "left of" spans 4 tokens, "above"/"near" span 3.
    return make_graph(objects, rels[:n_two_word_rels], toy_vocab)


def test_caption_too_long_boundary(toy_vocab):
    # 3 objects (6 tokens) + 6 "left of" (4) + 12 three-token spans = 66.
    g = _dense_graph(toy_vocab, 18)
    m = build_caption(g, toy_vocab)
    assert len(m.caption) == 6 + 6 * 4 + 12 * 3
    limit = len(m.caption)
    assert build_caption(g, toy_vocab, max_len=limit).relation_count == 18
    with pytest.raises(CaptionTooLong):
        build_caption(g, toy_vocab, max_len=limit - 1)


def test_freeform_single_object_seed0(toy_vocab):
    g = make_graph([("circle", ["red"], None)], [], toy_vocab)
    caption = freeform_caption(g, toy_vocab, template_seed=0)
    assert caption.tokens == ("a", "scene", "with", "a", "red", "circle")


def test_freeform_deterministic(toy_vocab, simple_pair_graph):
    a = freeform_caption(simple_pair_graph, toy_vocab, template_seed=5)
    b = freeform_caption(simple_pair_graph, toy_vocab, template_seed=5)
    assert a.tokens == b.tokens


def test_freeform_mentions_all_predicates(toy_vocab):
    g = make_graph(
        [("circle", ["red"], None), ("square", ["blue"], None),
         ("triangle", [], None)],
        [(0, "left of", 1), (1, "above", 2), (2, "near", 0)],
        toy_vocab,
    )
    text = freeform_caption(g, toy_vocab, template_seed=3).text()
    for pred in ("left of", "above", "near"):
        assert pred in text


def test_token_seq_rejects_empty_token():
    with pytest.raises(ValueError):
        TokenSeq(("a", ""),)


def test_mapping_rejects_orphan_relations():
    with pytest.raises(ValueError, match="orphan"):
        CaptionMapping(TokenSeq(("a", "b")), {0: 0}, relation_count=2)


def test_mapping_serialization_round_trip(toy_vocab, simple_pair_graph):
    m = build_caption(simple_pair_graph, toy_vocab)
    assert CaptionMapping.from_dict(m.to_dict()) == m


@st.composite
def random_graph(draw):
    from sgaug.graphs import Vocab

    vocab = Vocab(("circle", "square", "triangle"), ("left of", "above", "near"),
                  ("red", "blue"))
    n = draw(st.integers(1, 4))
    nodes = tuple(
        ObjectNode(i, draw(st.integers(0, 2)),
                   tuple(sorted(draw(st.sets(st.integers(0, 1))))))
        for i in range(n)
    )
    rels = []
    if n >= 2:
        seen = set()
        for _ in range(draw(st.integers(0, 5))):
            s, o = draw(st.integers(0, n - 1)), draw(st.integers(0, n - 1))
            p = draw(st.integers(0, 2))
            if s != o and (s, p, o) not in seen:
                seen.add((s, p, o))
                rels.append(RelationTriple(s, p, o))
    return vocab, SceneGraph(nodes, tuple(rels))


@settings(max_examples=120, deadline=None)
@given(random_graph())
def test_tau_totality_and_span_consistency(vocab_graph):
    vocab, g = vocab_graph
    m = build_caption(g, vocab)
    # totality: image of tau is exactly {0..K-1}
    assert set(m.tau.values()) == set(range(m.relation_count))
    # span consistency: tokens mapped to k are contiguous and spell out
    # "class_s predicate class_o"
    for k, rel in enumerate(g.relations):
        idxs = sorted(i for i, kk in m.tau.items() if kk == k)
        assert idxs == list(range(idxs[0], idxs[-1] + 1))
        subj = g.object_by_id(rel.subject_id)
        obj = g.object_by_id(rel.object_id)
        expected = tokenize(
            f"{vocab.object_classes[subj.class_id]} "
            f"{vocab.predicate_classes[rel.predicate_id]} "
            f"{vocab.object_classes[obj.class_id]}"
        ).tokens
    # idempotent tokenization
    assert tokenize(m.caption.text()).tokens == m.caption.tokens


@settings(max_examples=120, deadline=None)
@given(random_graph())
def test_span_tokens_match(vocab_graph):
    vocab, g = vocab_graph
    m = build_caption(g, vocab)
    for k, rel in enumerate(g.relations):
        idxs = sorted(i for i, kk in m.tau.items() if kk == k)
        span = tuple(m.caption.tokens[i] for i in idxs)
        subj = g.object_by_id(rel.subject_id)
        obj = g.object_by_id(rel.object_id)
        expected = tokenize(
            f"{vocab.object_classes[subj.class_id]} "
            f"{vocab.predicate_classes[rel.predicate_id]} "
            f"{vocab.object_classes[obj.class_id]}"
        ).tokens
        assert span == expected
