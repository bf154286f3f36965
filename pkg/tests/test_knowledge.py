import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from knowmvg.kg import KnowledgeGraph, Node
from knowmvg.knowledge import (
    GCN,
    GcnWeights,
    HashBagEmbedder,
    NodeEmbeddings,
    cosine_scores,
    embed_nodes,
    gcn_forward,
    normalized_adjacency,
    score_similarity,
    select_topk,
    select_topk_batch,
)
from knowmvg.numerics import ContractError, check_gradients

from oracles import cosine, dense_gcn, hash_bag, sort_prefix


def graph(texts, triples=()):
    kinds = ["entity"] + ["localization"] * (len(texts) - 1)
    return KnowledgeGraph(tuple(Node(i, t, k) for i, (t, k) in enumerate(zip(texts, kinds))), tuple(triples))


def propagated(rows) -> NodeEmbeddings:
    return NodeEmbeddings(torch.as_tensor(rows, dtype=torch.float64), "propagated")


def random_graph(rng, n):
    upper = np.triu(rng.random((n, n)) < 0.4, 1)
    return (upper | upper.T).astype(np.int8)


# -- embeddings -----------------------------------------------------------------

def test_identical_text_identical_rows():
    emb = embed_nodes(graph(["opacity", "lung base", "lung base"]), HashBagEmbedder(64))
    assert torch.equal(emb.matrix[1], emb.matrix[2])
    assert emb.stage == "initial"


def test_empty_graph_embeds_to_zero_rows():
    assert embed_nodes(KnowledgeGraph((), ()), HashBagEmbedder(16)).matrix.shape == (0, 16)


@pytest.mark.parametrize("text", ["pleural space", "right upper lung zone", "cardiac silhouette heart", "x"])
def test_hash_bag_matches_standalone_recompute(text):
    np.testing.assert_array_equal(HashBagEmbedder(64, seed=7, n_hashes=4)(text), hash_bag(text, 64, 7, 4))


def test_embedder_dimension_mismatch():
    with pytest.raises(ContractError):
        embed_nodes(graph(["opacity"]), HashBagEmbedder(32), dim=64)


# -- GCN ----------------------------------------------------------------------

def test_two_node_identity_example():
    a_hat = normalized_adjacency(np.array([[0, 1], [1, 0]]))
    torch.testing.assert_close(a_hat, torch.full((2, 2), 0.5, dtype=torch.float64), atol=1e-12, rtol=0)
    out = gcn_forward(NodeEmbeddings(torch.tensor([[2.0, 0.0], [0.0, 2.0]], dtype=torch.float64)),
                      np.array([[0, 1], [1, 0]]), GcnWeights([torch.eye(2, dtype=torch.float64)]))
    assert out.stage == "propagated"
    torch.testing.assert_close(out.matrix, torch.ones(2, 2, dtype=torch.float64), atol=1e-12, rtol=0)


def test_single_node_is_identity():
    h = torch.randn(1, 5, dtype=torch.float64)
    out = gcn_forward(NodeEmbeddings(h), np.zeros((1, 1)), GcnWeights([torch.eye(5, dtype=torch.float64)]))
    assert torch.equal(out.matrix, h)


def test_empty_graph_propagates_to_empty():
    w = GcnWeights([torch.eye(3, dtype=torch.float64)])
    assert gcn_forward(NodeEmbeddings(torch.zeros(0, 3, dtype=torch.float64)), np.zeros((0, 0)), w).matrix.shape == (0, 3)


def test_five_node_two_layer_matches_dense_oracle():
    rng = np.random.default_rng(5)
    adj = random_graph(rng, 5)
    h = rng.normal(size=(5, 6))
    ws = [rng.normal(size=(6, 6)), rng.normal(size=(6, 6))]
    bs = [rng.normal(size=6), rng.normal(size=6)]
    got = gcn_forward(NodeEmbeddings(torch.tensor(h)), adj,
                      GcnWeights([torch.tensor(w) for w in ws], [torch.tensor(b) for b in bs]))
    np.testing.assert_allclose(got.matrix.numpy(), dense_gcn(h, adj, ws, bs), atol=1e-10, rtol=0)


def test_gcn_contract_errors():
    w = GcnWeights([torch.eye(2, dtype=torch.float64)])
    with pytest.raises(ContractError):
        gcn_forward(NodeEmbeddings(torch.zeros(3, 2, dtype=torch.float64)), np.zeros((2, 2)), w)
    with pytest.raises(ContractError):
        gcn_forward(propagated([[1.0, 0.0]]), np.zeros((1, 1)), w)
    with pytest.raises(ContractError):
        GcnWeights([torch.zeros(2, 3), torch.zeros(4, 2)])


def test_gcn_gradient_check():
    rng = np.random.default_rng(2)
    adj = random_graph(rng, 6)
    h = torch.tensor(rng.normal(size=(6, 4)), requires_grad=True)
    gcn = GCN(4, depth=2).double()
    a_hat = normalized_adjacency(adj)
    target = torch.tensor(rng.normal(size=(6, 4)))
    params = dict(gcn.named_parameters()) | {"h": h}
    reports = check_gradients(lambda: ((gcn(h, a_hat) - target) ** 2).sum(), params, step=1e-5, tol=1e-4)
    assert all(r.passed for r in reports), [(r.parameter_name, r.max_rel_error) for r in reports]


@given(st.integers(0, 2**32 - 1))
def test_gcn_permutation_equivariance(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 9))
    adj = random_graph(rng, n)
    h = rng.normal(size=(n, 4))
    w = GcnWeights([torch.tensor(rng.normal(size=(4, 4))), torch.tensor(rng.normal(size=(4, 3)))])
    perm = rng.permutation(n)
    base = gcn_forward(NodeEmbeddings(torch.tensor(h)), adj, w).matrix
    moved = gcn_forward(NodeEmbeddings(torch.tensor(h[perm])), adj[np.ix_(perm, perm)], w).matrix
    np.testing.assert_allclose(moved.numpy(), base.numpy()[perm], atol=1e-12, rtol=0)


# -- similarity and top-k ---------------------------------------------------------

@pytest.mark.parametrize("x, y, expected, degenerate", [
    ([1, 0], [2, 0], 1.0, False),
    ([1, 0], [0, 3], 0.0, False),
    ([0, 0], [1, 1], 0.0, True),
])
def test_score_similarity_examples(x, y, expected, degenerate):
    s = score_similarity(x, y)
    assert s.value == expected and s.degenerate == degenerate


vec = arrays(np.float64, 6, elements=st.floats(-100, 100, allow_nan=False))


@given(vec, vec)
def test_cosine_matches_oracle_and_range(x, y):
    s = score_similarity(x, y).value
    assert -1.0 <= s <= 1.0
    assert s == pytest.approx(cosine(x, y), abs=1e-12)


@given(vec, vec, st.integers(-20, 20))
def test_cosine_exact_under_power_of_two_scaling(x, y, e):
    c = 2.0 ** e
    assert score_similarity(c * x, y).value == score_similarity(x, y).value


@given(vec, vec, st.floats(1e-3, 1e3))
def test_cosine_scale_invariance_general(x, y, c):
    assert score_similarity(c * x, y).value == pytest.approx(score_similarity(x, y).value, abs=1e-12)


@pytest.mark.parametrize("scores, k, expected", [
    ([0.9, 0.1, 0.5], 2, [0, 2]),
    ([0.5, 0.5, 0.1], 1, [0]),
])
def test_topk_examples(scores, k, expected):
    # rows chosen so that the cosine with query e0 equals each score
    rows = [[s, (1 - s * s) ** 0.5] for s in scores]
    res = select_topk(propagated(rows), torch.tensor([1.0, 0.0], dtype=torch.float64), k)
    assert res.source_indices == expected


def test_topk_clamps_to_n():
    res = select_topk(propagated([[1.0, 0.0], [0.0, 1.0]]), torch.tensor([1.0, 1.0], dtype=torch.float64), 4)
    assert res.k == 2 and res.requested_k == 4 and res.source_indices == [0, 1]


def test_topk_requires_propagated():
    with pytest.raises(ContractError):
        select_topk(NodeEmbeddings(torch.eye(2, dtype=torch.float64)), torch.ones(2, dtype=torch.float64), 1)


@given(st.integers(0, 2**32 - 1), st.integers(0, 10))
def test_topk_invariants(seed, k):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 12))
    # coarse rounding makes ties common
    rows = np.round(rng.normal(size=(n, 3)), 0)
    q = torch.tensor(rng.normal(size=3))
    res = select_topk(propagated(rows), q, k)
    s = res.scores.tolist()
    assert res.k == min(k, n) == len(set(res.source_indices))
    assert all(a >= b for a, b in zip(s, s[1:]))
    assert all(-1 <= v <= 1 for v in s)
    assert res.source_indices == sort_prefix(cosine_scores(torch.tensor(rows), q).tolist(), k)
    assert torch.equal(res.embeddings, torch.tensor(rows)[res.source_indices])
    assert select_topk(propagated(rows), q * 8.0, k).source_indices == res.source_indices


def test_prompt_locality():
    rng = np.random.default_rng(0)
    rows = rng.normal(size=(6, 4))
    q = torch.tensor(rng.normal(size=4))
    res = select_topk(propagated(rows), q, 2)
    others = [i for i in range(6) if i not in res.source_indices]
    bumped = rows.copy()
    bumped[others] *= 0.5  # same cosines, so the selection cannot change
    res2 = select_topk(propagated(bumped), q, 2)
    assert res2.source_indices == res.source_indices
    assert torch.equal(res2.embeddings, res.embeddings)


def test_batched_selection_matches_single():
    rng = np.random.default_rng(1)
    nodes = torch.tensor(rng.normal(size=(7, 5)))
    queries = torch.tensor(rng.normal(size=(3, 5)))
    emb, idx, scores = select_topk_batch(nodes, queries, 3)
    for b in range(3):
        single = select_topk(propagated(nodes), queries[b], 3)
        assert idx[b].tolist() == single.source_indices
        assert torch.equal(emb[b], single.embeddings)
        assert torch.equal(scores[b], single.scores)


def test_zero_norm_rows_score_zero_and_have_finite_grad():
    nodes = torch.tensor([[0.0, 0.0], [1.0, 2.0]], dtype=torch.float64, requires_grad=True)
    q = torch.tensor([[0.0, 1.0]], dtype=torch.float64, requires_grad=True)
    s = cosine_scores(nodes.unsqueeze(0), q)
    assert s[0, 0].item() == 0.0
    s.sum().backward()
    assert torch.isfinite(nodes.grad).all() and torch.isfinite(q.grad).all()
