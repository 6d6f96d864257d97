import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sgaug.captions import CaptionMapping, TokenSeq, build_caption
from sgaug.graphs import Vocab
from sgaug.masks import (
    NEG_INF,
    AttentionMaskPair,
    apply_additive_mask,
    build_satt_mask,
    build_sgc_mask,
    pack_mask,
    unpack_mask,
)

from conftest import make_graph


def mapping(n_tokens, tau, k, endpoints=()):
    return CaptionMapping(
        TokenSeq(tuple(f"t{i}" for i in range(n_tokens))),
        tau,
        k,
        endpoints,
    )


def brute_force_sgc(m, neg_inf=NEG_INF):
    """Independent cell-by-cell evaluation of the token-to-relation rule."""
    n, k = len(m.caption), m.relation_count
    out = np.empty((n, k + 1))
    for i in range(n):
        for col in range(k + 1):
            if i in m.tau:
                out[i, col] = 0.0 if m.tau[i] == col else neg_inf
            else:
                out[i, col] = 0.0 if col == k else neg_inf
    return out


def test_sgc_mask_example_rows():
    m = mapping(4, {2: 0, 3: 0}, 1, endpoints=((0, 1),))
    mask = build_sgc_mask(m)
    assert mask.shape == (4, 2)
    # mapped rows: zero in relation column, blocked null column
    assert mask[2, 0] == 0.0 and mask[2, 1] == NEG_INF
    assert mask[3, 0] == 0.0 and mask[3, 1] == NEG_INF
    # unmapped rows fall back to the null column only
    assert mask[0, 1] == 0.0 and mask[0, 0] == NEG_INF
    assert mask[1, 1] == 0.0 and mask[1, 0] == NEG_INF


def test_sgc_mask_no_relations():
    m = mapping(3, {}, 0)
    mask = build_sgc_mask(m)
    assert mask.shape == (3, 1)
    assert (mask == 0.0).all()


def test_sgc_mask_all_mapped_null_unused():
    m = mapping(3, {0: 0, 1: 0, 2: 0}, 1, endpoints=((0, 1),))
    mask = build_sgc_mask(m)
    assert (mask[:, 0] == 0.0).all()
    assert (mask[:, 1] == NEG_INF).all()


def test_satt_single_relation_block(toy_vocab, simple_pair_graph):
    m = build_caption(simple_pair_graph, toy_vocab)
    mask = build_satt_mask(m)
    span = sorted(i for i in m.tau)
    for i in span:
        for j in span:
            assert mask[i, j] == 0.0


def test_satt_endpoint_sharing_example():
    # relations: (man, beside, car), (man, in front of, house),
    # (tree, next to, house); spans of 1 token each for clarity.
    m = mapping(
        3,
        {0: 0, 1: 1, 2: 2},
        3,
        endpoints=((0, 1), (0, 2), (3, 2)),
    )
    mask = build_satt_mask(m)
    assert mask[0, 1] == 0.0 and mask[1, 0] == 0.0  # share "man"
    assert mask[1, 2] == 0.0 and mask[2, 1] == 0.0  # share "house"
    assert mask[0, 2] == NEG_INF and mask[2, 0] == NEG_INF  # no shared endpoint


def test_satt_disjoint_relations_blocked(toy_vocab):
    g = make_graph(
        [("circle", [], None), ("square", [], None), ("triangle", [], None),
         ("circle", [], None)],
        [(0, "left of", 1), (2, "above", 3)],
        toy_vocab,
    )
    m = build_caption(g, toy_vocab)
    mask = build_satt_mask(m)
    span0 = [i for i, k in m.tau.items() if k == 0]
    span1 = [i for i, k in m.tau.items() if k == 1]
    for i in span0:
        for j in span1:
            assert mask[i, j] == NEG_INF


def test_satt_unmapped_group_mutually_visible(toy_vocab, simple_pair_graph):
    m = build_caption(simple_pair_graph, toy_vocab)
    mask = build_satt_mask(m)
    unmapped = [i for i in range(len(m.caption)) if i not in m.tau]
    assert unmapped  # object-description tokens exist
    for i in unmapped:
        for j in unmapped:
            assert mask[i, j] == 0.0
        for j in m.tau:
            assert mask[i, j] == NEG_INF


def test_apply_additive_mask_identity():
    scores = np.arange(6.0).reshape(2, 3)
    assert (apply_additive_mask(scores, np.zeros((2, 3))) == scores).all()


def test_apply_additive_mask_forces_weight():
    scores = np.zeros((1, 4))
    mask = np.full((1, 4), NEG_INF)
    mask[0, 2] = 0.0
    masked = apply_additive_mask(scores, mask)
    weights = np.exp(masked - masked.max())
    weights /= weights.sum()
    assert weights[0, 2] == pytest.approx(1.0)


def test_apply_additive_mask_shape_mismatch():
    with pytest.raises(ValueError, match="shape mismatch"):
        apply_additive_mask(np.zeros((2, 3)), np.zeros((3, 2)))


def test_masked_softmax_zeroes_cells():
    rng = np.random.default_rng(0)
    scores = rng.normal(size=(3, 3))
    m = mapping(3, {0: 0, 1: 1}, 2, endpoints=((0, 1), (1, 2)))
    mask = build_sgc_mask(m)[:, :3]
    masked = apply_additive_mask(scores, mask)
    ex = np.exp(masked - masked.max(axis=1, keepdims=True))
    w = ex / ex.sum(axis=1, keepdims=True)
    assert np.allclose(w.sum(axis=1), 1.0, atol=1e-6)
    assert (w[mask == NEG_INF] < 1e-6).all()


@st.composite
def random_mapping(draw):
    n = draw(st.integers(1, 12))
    k = draw(st.integers(0, 5))
    tau = {}
    if k:
        # every relation needs at least one token; assign greedily
        if n < k:
            k = n
        tokens = list(range(n))
        for rel in range(k):
            tau[tokens[rel]] = rel
        for i in tokens[k:]:
            if draw(st.booleans()):
                tau[i] = draw(st.integers(0, k - 1))
    endpoints = tuple(
        (draw(st.integers(0, 3)), draw(st.integers(4, 7))) for _ in range(k)
    )
    return mapping(n, tau, k, endpoints)


@settings(max_examples=200, deadline=None)
@given(random_mapping())
def test_sgc_matches_brute_force(m):
    assert np.array_equal(build_sgc_mask(m), brute_force_sgc(m))


@settings(max_examples=150, deadline=None)
@given(random_mapping())
def test_satt_symmetric_with_zero_diagonal(m):
    mask = build_satt_mask(m)
    assert np.array_equal(mask, mask.T)
    assert (np.diag(mask) == 0.0).all()


@settings(max_examples=150, deadline=None)
@given(random_mapping())
def test_no_dead_rows(m):
    for mask in (build_sgc_mask(m), build_satt_mask(m)):
        assert ((mask == 0.0).sum(axis=1) >= 1).all()


@settings(max_examples=100, deadline=None)
@given(random_mapping(), st.randoms())
def test_permutation_equivariance(m, rnd):
    k = m.relation_count
    if k < 2:
        return
    perm = list(range(k))
    rnd.shuffle(perm)
    permuted = CaptionMapping(
        m.caption,
        {i: perm[kk] for i, kk in m.tau.items()},
        k,
        tuple(m.relation_endpoints[perm.index(j)] for j in range(k))
        if m.relation_endpoints else (),
    )
    base = build_sgc_mask(m)
    out = build_sgc_mask(permuted)
    for old in range(k):
        assert np.array_equal(out[:, perm[old]], base[:, old])
    assert np.array_equal(out[:, k], base[:, k])


def test_pack_unpack_round_trip(toy_vocab, simple_pair_graph):
    m = build_caption(simple_pair_graph, toy_vocab)
    pair = AttentionMaskPair.from_mapping(m)
    assert pair.n_tokens == len(m.caption)
    assert pair.n_relations == 1
    for mask in (pair.sgc_mask, pair.satt_mask):
        packed = pack_mask(mask)
        assert np.array_equal(unpack_mask(packed), mask)
