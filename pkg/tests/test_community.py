import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nsbm.community import (
    LossBreakdown,
    community_embeddings,
    community_similarity,
    entropy_loss,
    init_assignment,
    joint_loss,
    label_loss,
    link_loss,
    load_checkpoint,
    membership,
    sample_batch,
    save_checkpoint,
    sbm_loss,
    scaled_cosine,
    update_assignment,
)
from nsbm.datagen import PlantedPartitionSpec, planted_partition
from nsbm.graph import Graph
from nsbm.layers import init_linear
from nsbm.model import NSBM
from nsbm.numerics import finite_difference_check, make_rng, softmax, tensor


def zero_layer(d_in, d_out):
    return {"W": tensor(np.zeros((d_in, d_out))), "b": tensor(np.zeros(d_out))}


def triangle():
    return np.array([[0, 1, 1], [1, 0, 1], [1, 1, 0]], dtype=float)


# -- membership -----------------------------------------------------------------------


def test_zero_membership_layer_is_uniform():
    Z = membership(tensor(np.random.default_rng(0).normal(size=(5, 3))), zero_layer(3, 2))
    np.testing.assert_allclose(Z.data, 0.5)


def test_membership_logits_16_0():
    layer = {"W": tensor(np.array([[16.0, 0.0]])), "b": tensor(np.zeros(2))}
    Z = membership(tensor([[1.0]]), layer).data[0]
    # 1 / (1 + e^-16) and its complement
    assert Z[0] == pytest.approx(0.9999998874648379, abs=1e-15)
    assert Z[1] == pytest.approx(1.1253517471925912e-07, rel=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6))
def test_membership_rows_are_distributions(seed, K):
    rng = np.random.default_rng(seed)
    Z = membership(tensor(rng.normal(scale=5, size=(7, 4))), init_linear(rng, 4, K + 1)).data
    np.testing.assert_allclose(Z.sum(axis=1), 1.0, atol=1e-12)
    assert np.all((Z >= 0) & (Z <= 1))


# -- similarity and sbm loss --------------------------------------------------------------


def test_similarity_identity_membership_gives_aat():
    A = triangle()
    C = community_similarity(np.eye(3), np.zeros((3, 2)), A)
    np.testing.assert_allclose(C.data, A @ A.T)


def test_similarity_triangle_single_community():
    C = community_similarity(np.ones((3, 1)), np.zeros((3, 2)), triangle())
    assert C.data.item() == 12.0


def test_similarity_zero_inputs():
    C = community_similarity(np.full((4, 2), 0.5), np.zeros((4, 3)), np.zeros((4, 4)))
    assert not C.data.any()


def test_similarity_drops_pseudo_column():
    rng = np.random.default_rng(1)
    Z = softmax(tensor(rng.normal(size=(6, 3)))).data
    A = (rng.random((6, 6)) < 0.5).astype(float)
    A = np.triu(A, 1) + np.triu(A, 1).T
    X = rng.normal(size=(6, 4))
    C = community_similarity(Z, X, A, n_communities=2).data
    Z0 = Z.copy()
    Z0[:, 2] = 0.0
    np.testing.assert_allclose(C, community_similarity(Z0, X, A, n_communities=2).data)
    assert C.shape == (2, 2)
    np.testing.assert_allclose(C, C.T)


def test_sbm_loss_worked_example():
    loss = sbm_loss(np.array([[4.0, 1.0], [1.0, 4.0]]), np.array([2.0, 2.0]))
    # l = 8 ln 4 + 2 ln 1 - 2 * 10 ln 2 = -4 ln 2
    assert loss.item() == pytest.approx(4 * np.log(2), abs=1e-9)
    assert loss.item() == pytest.approx(2.772589, abs=1e-6)


def test_sbm_loss_zero_similarity():
    assert sbm_loss(np.zeros((3, 3)), np.array([1.0, 2.0, 3.0])).item() == 0.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_sbm_and_entropy_are_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    K = 4
    Z = softmax(tensor(rng.normal(size=(9, K + 1)))).data
    A = np.triu((rng.random((9, 9)) < 0.4).astype(float), 1)
    A = A + A.T
    X = rng.normal(size=(9, 3))
    perm = np.append(rng.permutation(K), K)
    C = community_similarity(Z, X, A, K).data
    Cp = community_similarity(Z[:, perm], X, A, K).data
    np.testing.assert_allclose(Cp, C[np.ix_(perm[:K], perm[:K])], rtol=1e-12)
    s = Z[:, :K].sum(axis=0)
    assert sbm_loss(Cp, s[perm[:K]]).item() == pytest.approx(sbm_loss(C, s).item(), rel=1e-12)
    assert entropy_loss(Z[:, perm]).item() == pytest.approx(entropy_loss(Z).item(), rel=1e-12)


def test_sbm_loss_gradient_through_membership():
    rng = make_rng(3, "t")
    X = rng.normal(size=(12, 12))
    A = np.triu((rng.random((12, 12)) < 0.3).astype(float), 1)
    A = A + A.T
    layer = init_linear(rng, 12, 4)

    def fn():
        Z = membership(tensor(X), layer)
        C = community_similarity(Z, X, A, 3)
        return sbm_loss(C, Z[:, :3].sum(axis=0))

    assert finite_difference_check(fn, layer, tolerance=1e-5).passed


# -- scaled cosine, link, entropy, labels --------------------------------------------------------


def test_scaled_cosine_cases():
    x = np.array([1.0, 2.0, -0.5])
    assert scaled_cosine(x, x).item() == pytest.approx(16.0)
    assert scaled_cosine(x, -x).item() == pytest.approx(-16.0)
    assert scaled_cosine([1.0, 0.0], [0.0, 3.0]).item() == 0.0
    assert scaled_cosine([0.0, 0.0], [1.0, 1.0]).item() == 0.0


def test_link_loss_at_zero_logit_is_ln2():
    X = np.random.default_rng(0).normal(size=(4, 3))
    loss = link_loss(X, [(0, 1)], zero_layer(3, 3), zero_layer(3, 3), negatives=[(2, 3), (0, 3)])
    assert loss.item() == pytest.approx(np.log(2), abs=1e-9)


def test_link_loss_identical_projection():
    X = np.array([[1.0, 2.0], [1.0, 2.0]])
    eye = {"W": tensor(np.eye(2)), "b": tensor(np.zeros(2))}
    loss = link_loss(X, [(0, 1)], eye, eye, negatives=np.zeros((0, 2)))
    assert loss.item() == pytest.approx(-np.log(1 / (1 + np.exp(-16.0))), rel=1e-6)
    assert loss.item() == pytest.approx(1.1253517e-7, rel=1e-5)


def test_link_loss_weighted_positive_scaled_by_batch_max():
    X = np.random.default_rng(2).normal(size=(3, 2))
    l1 = link_loss(X, [(0, 1), (1, 2)], zero_layer(2, 2), zero_layer(2, 2), negatives=np.zeros((0, 2)),
                   weights=[2.0, 1.0])
    assert l1.item() == pytest.approx((1.0 + 0.5) * np.log(2) / 2)


def test_link_loss_gradient():
    rng = make_rng(4, "t")
    X = tensor(rng.normal(size=(12, 12)), requires_grad=True)
    l1, l2 = init_linear(rng, 12, 6), init_linear(rng, 12, 6)
    pos = [(0, 1), (2, 3), (4, 5), (6, 11)]
    neg = [(0, 7), (1, 9), (3, 8), (10, 2)]
    params = {"X": X, **{f"l1.{k}": v for k, v in l1.items()}, **{f"l2.{k}": v for k, v in l2.items()}}
    assert finite_difference_check(lambda: link_loss(X, pos, l1, l2, negatives=neg), params, tolerance=1e-5).passed


def test_entropy_cases():
    assert entropy_loss(np.eye(4)).item() == pytest.approx(0.0, abs=1e-10)
    assert entropy_loss(np.full((3, 4), 0.25)).item() == pytest.approx(np.log(4), abs=1e-10)
    Z = softmax(tensor(np.random.default_rng(0).normal(size=(5, 4)))).data
    assert 0 < entropy_loss(Z).item() < np.log(4)


def test_label_loss_cases():
    assert label_loss(np.eye(3), [0, 1, 2]).item() == pytest.approx(0.0, abs=1e-10)
    assert label_loss(np.full((2, 4), 0.25), [[1], [3]]).item() == pytest.approx(np.log(4))
    # a multi-label row averages its labels
    Z = np.array([[0.5, 0.25, 0.25]])
    assert label_loss(Z, [[0, 1]]).item() == pytest.approx(-(np.log(0.5) + np.log(0.25)) / 2)
    with pytest.raises(ValueError, match="out of range"):
        label_loss(np.eye(3), [[5], None, None])


def test_label_loss_gradient():
    rng = make_rng(5, "t")
    logits = tensor(rng.normal(size=(12, 4)), requires_grad=True)
    labels = {0: [1], 3: [2], 5: [0, 3], 9: [2]}
    assert finite_difference_check(lambda: label_loss(softmax(logits), labels), {"logits": logits},
                                   tolerance=1e-5).passed


def test_joint_total_is_sum_of_parts():
    rng = np.random.default_rng(6)
    g = planted_partition(PlantedPartitionSpec(sizes=[6, 6], p_in=0.6, p_out=0.1, attr_dim=5, seed=1))
    A = g.dense_block(np.arange(12))
    X = rng.normal(size=(12, 5))
    Z = softmax(tensor(rng.normal(size=(12, 3))))
    iu, ju = np.nonzero(np.triu(A))
    layers = (init_linear(rng, 5, 5), init_linear(rng, 5, 5))
    out = joint_loss(Z, X, A, np.stack([iu, ju], 1), layers, 2, rng=rng, labels={0: [0], 7: [1]})
    d = out.as_dict()
    assert d["total"] == pytest.approx(d["sbm"] + d["entropy"] + d["link"] + d["labels"], rel=1e-14)
    zero = LossBreakdown(tensor(0.0), tensor(0.0), tensor(0.0))
    assert zero.total.item() == 0.0


def test_joint_training_decreases_moving_average():
    g = planted_partition(PlantedPartitionSpec(sizes=[6, 6], p_in=0.8, p_out=0.05, attr_dim=4, seed=2))
    m = NSBM(n_communities=2, d_model=8, d_out=8, m=4, free_dim=2, epochs=200, batch_size=12, c=3,
             lr=1e-2, random_state=0).fit(g)
    total = np.array([h["total"] for h in m.loss_history_])
    assert len(total) == 200
    ma = np.convolve(total, np.ones(10) / 10, mode="valid")
    assert ma[-1] < ma[0]


# -- community embeddings -----------------------------------------------------------------------------


@pytest.fixture
def attn():
    rng = make_rng(7, "t")
    return {"layer": init_linear(rng, 3, 3), "w2": tensor(rng.normal(size=3))}


def test_single_member_community_is_its_scaled_row(attn):
    Z = np.array([[0.9, 0.1], [0.05, 0.95], [0.02, 0.98]])
    X = np.arange(9.0).reshape(3, 3)
    ce = community_embeddings(Z, X, attn, theta=0.1)
    np.testing.assert_allclose(ce.vectors[0].data, 0.9 * X[0])
    assert ce.members[0].tolist() == [0]
    assert ce.members[1].tolist() == [0, 1, 2]
    assert all(w.min() >= 0.1 for w in ce.weights)
    np.testing.assert_allclose(ce.attention[1].sum(), 1.0)


def test_identical_members_pool_to_the_row(attn):
    Z = np.array([[0.6, 0.4], [0.6, 0.4]])
    X = np.array([[1.0, -2.0, 3.0], [1.0, -2.0, 3.0]])
    ce = community_embeddings(Z, X, attn)
    np.testing.assert_allclose(ce.vectors[0].data, 0.6 * X[0])


def test_empty_community_flagged(attn):
    Z = np.array([[1.0, 0.0], [1.0, 0.0]])
    ce = community_embeddings(Z, np.ones((2, 3)), attn, theta=0.1)
    assert ce.empty.tolist() == [False, True]
    assert not ce.vectors[1].data.any()
    with pytest.raises(ValueError):
        community_embeddings(Z, np.ones((2, 3)), attn, theta=1.0)


# -- assignment and batches ----------------------------------------------------------------------------------


def two_cliques():
    edges = [(b + i, b + j) for b in (0, 5) for i in range(5) for j in range(i + 1, 5)]
    return Graph.from_edges(10, edges)


def test_init_assignment_two_cliques():
    z = init_assignment(two_cliques(), 2)
    assert len(set(z[:5])) == 1 and len(set(z[5:])) == 1 and z[0] != z[5]
    assert set(z.tolist()) <= {0, 1}


def test_init_assignment_k1_connected():
    g = Graph.from_edges(4, [(0, 1), (1, 2), (2, 3)])
    assert init_assignment(g, 1).tolist() == [0, 0, 0, 0]


def test_init_assignment_edgeless_leftovers_go_to_pseudo():
    z = init_assignment(Graph(5, [], []), 2)
    # no node has an edge, so none can seed a community
    assert z.tolist() == [2] * 5
    z = init_assignment(Graph(5, [], []), 2, pseudo=False)
    assert set(z.tolist()) == {0, 1}


def test_sample_batch_from_sampled_communities():
    a = np.repeat(np.arange(4), 10)
    nodes, chosen = sample_batch(a, 2, 8, np.random.default_rng(0))
    assert len(nodes) == 8 == len(set(nodes.tolist()))
    assert set(a[nodes].tolist()) <= set(chosen.tolist()) and len(chosen) == 2
    nodes, _ = sample_batch(a, 4, 40, np.random.default_rng(0))
    assert nodes.tolist() == list(range(40))


def test_sample_batch_community_frequencies():
    a = np.repeat(np.arange(4), 5)
    rng = np.random.default_rng(11)
    counts = np.zeros(4, dtype=int)
    for _ in range(10_000):
        _, chosen = sample_batch(a, 1, 3, rng)
        counts[chosen[0]] += 1
    assert np.all(np.abs(counts - 2500) <= 150)


def test_update_assignment_rules():
    a = np.array([0, 0, 1, 2])
    Z = np.array([[0.0, 1.0, 0.0], [0.5, 0.5, 0.0]])
    out = update_assignment(a, np.array([0, 3]), Z)
    assert out.tolist() == [1, 0, 1, 0]
    assert a.tolist() == [0, 0, 1, 2]


# -- checkpoints --------------------------------------------------------------------------------------


def test_checkpoint_format_roundtrip(tmp_path):
    arrays = {"a": np.arange(6.0).reshape(2, 3), "b": np.array(2.5), "c": np.zeros((0, 4))}
    path = tmp_path / "x.nsbm"
    save_checkpoint(path, arrays, {"note": "hi"})
    raw = path.read_bytes()
    assert raw.startswith(b"NSBM1\n")
    back, meta = load_checkpoint(path)
    assert meta == {"note": "hi"}
    for k in arrays:
        np.testing.assert_array_equal(back[k], arrays[k])
    # payload is little-endian float64 in manifest order
    assert raw.endswith(np.arange(6.0).astype("<f8").tobytes() + np.array(2.5).astype("<f8").tobytes())


def test_checkpoint_rejects_truncation(tmp_path):
    path = tmp_path / "x.nsbm"
    save_checkpoint(path, {"a": np.ones(4)})
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(ValueError, match="truncated"):
        load_checkpoint(path)
