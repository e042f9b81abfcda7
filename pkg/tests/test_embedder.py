import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nsbm.embedder import (
    PAD,
    SequenceEmbedder,
    build_repr,
    build_reprs,
    context_pairs,
    embed_rounds,
    embed_sequence,
    init_embedder,
    load_walks,
    sample_walk,
    sample_walks,
    save_walks,
    skipgram_loss,
)
from nsbm.graph import Graph
from nsbm.numerics import make_rng


def star():
    # centre 2, leaves 0, 1, 3, 4
    return Graph.from_edges(5, [(2, 0), (2, 1), (2, 3), (2, 4)])


def test_star_centre_repr():
    assert build_repr(star(), 2, m=16).tolist() == [2, 0, 1, 3, 4]
    assert build_repr(star(), 2, m=3).tolist() == [2, 0, 1]
    assert build_repr(star(), 4, m=16).tolist() == [4, 2]


def test_path_middle_repr():
    g = Graph.from_edges(3, [(0, 1), (1, 2)])
    assert build_repr(g, 1, m=3).tolist() == [1, 0, 2]


def test_isolated_repr_and_padding():
    g = Graph.from_edges(3, [(0, 1)])
    assert build_repr(g, 2).tolist() == [2]
    R = build_reprs(g, m=4)
    assert R[2].tolist() == [2, PAD, PAD, PAD]
    assert R[0].tolist() == [0, 1, PAD, PAD]


def test_other_sort_keys():
    g = Graph.from_edges(4, [(0, 1, 0.5), (0, 2, 3.0), (0, 3, 1.0)])
    assert build_repr(g, 0, key="weight").tolist() == [0, 2, 3, 1]
    h = Graph.from_edges(5, [(0, 1), (0, 2), (1, 2), (0, 3), (3, 4)])
    # 1 and 2 share more of 0's neighbourhood than 3 does
    assert build_repr(h, 0, key="jaccard").tolist() == [0, 1, 2, 3]
    with pytest.raises(ValueError):
        build_repr(h, 0, key="pagerank")


def test_walk_cases():
    assert sample_walk(Graph.from_edges(2, []), 0, 5).tolist() == [0]
    w = sample_walk(Graph.from_edges(2, [(0, 1)]), 0, 4, rng=make_rng(0, "t"))
    assert w.tolist() == [0, 1, 0, 1]


def test_walk_first_step_uniform_on_triangle():
    g = Graph.from_edges(3, [(0, 1), (1, 2), (0, 2)])
    rng = make_rng(1, "t")
    hits = sum(sample_walk(g, 0, 2, rng=rng)[1] == 1 for _ in range(100_000))
    assert abs(hits / 100_000 - 0.5) <= 0.01


def test_walk_return_bias():
    # p tiny: always go back where we came from
    g = Graph.from_edges(4, [(0, 1), (1, 2), (1, 3)])
    w = sample_walk(g, 0, 7, p=1e-9, q=1.0, rng=make_rng(2, "t"))
    assert w.tolist() == [0, 1, 0, 1, 0, 1, 0]


def test_walk_cache_roundtrip(tmp_path):
    walks = sample_walks(Graph.from_edges(4, [(0, 1), (2, 3)]), 5, walks_per_node=2, seed=3)
    walks[0, 3:] = PAD
    save_walks(walks, tmp_path / "w.bin")
    np.testing.assert_array_equal(load_walks(tmp_path / "w.bin"), walks)
    assert (tmp_path / "w.bin").stat().st_size == 8 + walks.size * 4


# -- encoder ----------------------------------------------------------------------------------


@pytest.fixture
def params():
    return init_embedder(4, d_model=8, d_out=4, m=5, seed=0)


def test_lone_centre_depends_only_on_own_row(params):
    raw = np.random.default_rng(0).normal(size=(6, 4))
    a = embed_sequence([[3, PAD, PAD]], raw, params).data
    raw2 = raw.copy()
    raw2[[0, 1, 2, 4, 5]] += 10.0
    np.testing.assert_array_equal(a, embed_sequence([[3, PAD, PAD]], raw2, params).data)


def test_empty_batch(params):
    out = embed_sequence(np.zeros((0, 3), dtype=int), np.zeros((2, 4)), params)
    assert out.shape == (0, 4)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["mean", "attention"]))
def test_context_permutation_symmetry_without_positions(seed, pooling):
    rng = np.random.default_rng(seed)
    p = init_embedder(4, d_model=6, d_out=3, m=5, pooling=pooling, seed=seed)
    raw = rng.normal(size=(8, 4))
    seq = np.array([0, 3, 5, 7, 2])
    perm = np.concatenate([[0], 1 + rng.permutation(4)])
    a = embed_sequence(seq[None], raw, p, use_position=False).data
    b = embed_sequence(seq[perm][None], raw, p, use_position=False).data
    np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-12)


def test_identical_inputs_identical_outputs(params):
    raw = np.random.default_rng(1).normal(size=(4, 4))
    raw[1] = raw[0]
    out = embed_sequence([[0, 2, 3], [1, 2, 3]], raw, params).data
    np.testing.assert_array_equal(out[0], out[1])


def test_second_round_reaches_two_hops():
    g = Graph.from_edges(4, [(0, 1), (1, 2), (2, 3)])
    reprs = build_reprs(g, m=3)
    p = init_embedder(4, d_model=8, d_out=4, m=3, seed=1)
    raw = np.random.default_rng(2).normal(size=(4, 4))
    bumped = raw.copy()
    bumped[2] += 1.0  # two hops from node 0
    one = embed_rounds(reprs, raw, p, rounds=1).data
    one_b = embed_rounds(reprs, bumped, p, rounds=1).data
    np.testing.assert_array_equal(one[0], one_b[0])
    two = embed_rounds(reprs, raw, p, rounds=2).data
    two_b = embed_rounds(reprs, bumped, p, rounds=2).data
    assert np.abs(two[0] - two_b[0]).max() > 1e-8


def test_rounds_need_square_encoder(params):
    with pytest.raises(ValueError):
        embed_rounds(np.array([[0, 1]]), np.zeros((2, 4)), init_embedder(4, 8, 3, 2), rounds=2)


# -- skip-gram -----------------------------------------------------------------------------------


def test_context_pairs_skip_padding():
    pairs = context_pairs(np.array([[0, 1, 2, PAD]]), 1)
    assert sorted(map(tuple, pairs.tolist())) == [(0, 1), (1, 0), (1, 2), (2, 1)]


def test_skipgram_zero_embeddings():
    walks = np.array([[0, 1, 2], [2, 3, PAD]])
    loss = skipgram_loss(walks, 2, 3, np.zeros((4, 5)), rng=make_rng(0, "t"))
    assert loss.item() == pytest.approx(4 * np.log(2), abs=1e-9)


def test_skipgram_saturates_for_aligned_pairs():
    X = np.full((2, 3), 20.0)
    assert skipgram_loss(np.array([[0, 1]]), 1, 0, X).item() < 1e-9


def test_sequence_embedder_fits():
    g = Graph.from_edges(8, [(i, (i + 1) % 8) for i in range(8)])
    m = SequenceEmbedder(d_model=8, d_out=4, m=3, free_dim=4, epochs=15, lr=2e-2).fit(g)
    Y = m.transform(None)
    assert Y.shape == (8, 4) and np.isfinite(Y).all()
    assert m.loss_history_[-1] < m.loss_history_[0]
