"""Graph encoder tests.

The vectorized encoder is checked against a straight-line loop oracle that
re-implements projection, per-head node attention, and semantic mixing
directly from the definitions.
"""
import numpy as np
import pytest

from remex.autodiff import Tensor, check_gradients, ops, parameter
from remex.data import (InitialEmbeddings, KnowledgeGraph, RelationVocab,
                        Triplet)
from remex.errors import ShapeError, VocabularyError
from remex.graph_encoder import (GraphEncoder, HanParams, MetaPath,
                                 default_metapaths, metapath_neighbors,
                                 node_level_attention,
                                 semantic_level_attention)

VOCAB = RelationVocab()


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def _softmax(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - x.max())
    return e / e.sum()


def han_oracle(kg, metapaths, params, h_init, node_names):
    """Loop reimplementation of projection + both attention levels."""
    K, dh = params.n_heads, params.d_head
    proj_w = params.proj_w["disease"].data
    proj_b = params.proj_b["disease"].data
    hp = h_init @ proj_w + proj_b
    z_per_path = []
    for path in metapaths:
        a_path = params.att[path.name].data
        Z = np.zeros((len(node_names), K * dh))
        for row, name in enumerate(node_names):
            nbrs = sorted(metapath_neighbors(kg, path, name))
            i = kg.node_index[name]
            heads = []
            for k in range(K):
                a = a_path[k]
                hi = hp[i, k * dh:(k + 1) * dh]
                scores = []
                for nb in nbrs:
                    hj = hp[kg.node_index[nb], k * dh:(k + 1) * dh]
                    scores.append(_sigmoid(a[:dh] @ hi + a[dh:] @ hj))
                weights = _softmax(scores)
                mixed = np.zeros(dh)
                for w, nb in zip(weights, nbrs):
                    mixed += w * hp[kg.node_index[nb], k * dh:(k + 1) * dh]
                heads.append(_sigmoid(mixed))
            Z[row] = np.concatenate(heads)
        z_per_path.append(Z)
    w_scores = []
    for Z in z_per_path:
        vals = [params.sem_q.data @ np.tanh(params.sem_w.data @ z
                                            + params.sem_b.data) for z in Z]
        w_scores.append(np.mean(vals))
    beta = _softmax(w_scores)
    combined = sum(b * Z for b, Z in zip(beta, z_per_path))
    return combined, beta, z_per_path


def _chain_kg():
    return KnowledgeGraph([Triplet("A", "MC", "B"), Triplet("B", "MC", "C"),
                           Triplet("A", "DDx", "C")], VOCAB)


def _params(rng, d_hi=5, d_ha=4, n_heads=2, paths=("MC", "DDx", "MC,MC"),
            dtype=np.float64):
    return HanParams.create(rng, d_hi=d_hi, d_ha=d_ha, n_heads=n_heads,
                            path_names=list(paths), dtype=dtype)


class TestMetapathNeighbors:
    def test_one_hop_plus_self(self):
        kg = KnowledgeGraph([Triplet("A", "MC", "B")], VOCAB)
        assert metapath_neighbors(kg, MetaPath("MC", ("MC",)), "A") == {"A", "B"}

    def test_two_hop_chain(self):
        kg = KnowledgeGraph([Triplet("A", "MC", "B"), Triplet("B", "MC", "C")],
                            VOCAB)
        path = MetaPath.from_string("MC,MC")
        assert metapath_neighbors(kg, path, "A") == {"A", "C"}

    def test_isolated_node_gets_self(self):
        kg = KnowledgeGraph([Triplet("A", "MC", "B")], VOCAB)
        assert metapath_neighbors(kg, MetaPath("MC", ("MC",)), "B") == {"B"}

    def test_unknown_node(self):
        kg = KnowledgeGraph([Triplet("A", "MC", "B")], VOCAB)
        with pytest.raises(VocabularyError):
            metapath_neighbors(kg, MetaPath("MC", ("MC",)), "Z")

    def test_default_paths(self):
        names = [p.name for p in default_metapaths(VOCAB)]
        assert names == ["DDx", "MC", "MBC", "MC,MC"]

    def test_path_validates_relations(self):
        with pytest.raises(VocabularyError):
            MetaPath.from_string("MC,TREATS").validate(VOCAB)


class TestNodeLevelAttention:
    def test_self_only_neighborhood(self):
        rng = np.random.default_rng(0)
        params = _params(rng, paths=("MC",))
        hp = Tensor(rng.normal(size=(3, 4)))
        z = node_level_attention(params, hp, MetaPath("MC", ("MC",)),
                                 node_position=1, neighbor_positions=[1])
        np.testing.assert_allclose(z.data, _sigmoid(hp.data[1]), atol=1e-12)

    def test_identical_neighbors_balanced(self):
        rng = np.random.default_rng(1)
        params = _params(rng, paths=("MC",))
        row = rng.normal(size=4)
        hp = Tensor(np.stack([row, row]))
        z = node_level_attention(params, hp, MetaPath("MC", ("MC",)),
                                 node_position=0, neighbor_positions=[0, 1])
        # weights 0.5/0.5 over identical rows collapse to sigma(row)
        np.testing.assert_allclose(z.data, _sigmoid(row), atol=1e-12)

    def test_two_node_scalar_softmax_oracle(self):
        # one head, d_head=2, attention vector [1,0,1,0]: the raw score for
        # neighbor j is sigma(h'_i[0] + h'_j[0])
        rng = np.random.default_rng(2)
        params = _params(rng, d_ha=2, n_heads=1, paths=("MC",))
        params.att["MC"].data[:] = np.array([[1.0, 0.0, 1.0, 0.0]])
        hi = np.array([0.3, -0.7])
        hj = np.array([-1.1, 0.4])
        hp = Tensor(np.stack([hi, hj]))
        z = node_level_attention(params, hp, MetaPath("MC", ("MC",)),
                                 node_position=0, neighbor_positions=[0, 1])
        weights = _softmax([_sigmoid(hi[0] + hi[0]), _sigmoid(hi[0] + hj[0])])
        expected = _sigmoid(weights[0] * hi + weights[1] * hj)
        np.testing.assert_allclose(z.data, expected, atol=1e-12)


class TestSemanticLevelAttention:
    def test_single_path(self):
        rng = np.random.default_rng(3)
        params = _params(rng)
        Z1 = Tensor(rng.normal(size=(3, 4)))
        beta, Z = semantic_level_attention(params, [Z1])
        np.testing.assert_allclose(beta.data, [1.0], atol=1e-12)
        np.testing.assert_allclose(Z.data, Z1.data, atol=1e-12)

    def test_identical_paths_balanced(self):
        rng = np.random.default_rng(4)
        params = _params(rng)
        Z1 = Tensor(rng.normal(size=(3, 4)))
        beta, Z = semantic_level_attention(params, [Z1, Tensor(Z1.data.copy())])
        np.testing.assert_allclose(beta.data, [0.5, 0.5], atol=1e-12)
        np.testing.assert_allclose(Z.data, Z1.data, atol=1e-12)

    def test_scalar_oracle_two_paths(self):
        rng = np.random.default_rng(5)
        params = HanParams.create(rng, d_hi=1, d_ha=1, n_heads=1,
                                  path_names=["p1", "p2"], d_sem=1,
                                  dtype=np.float64)
        Z1 = Tensor(np.array([[0.6]]))
        Z2 = Tensor(np.array([[-0.2]]))
        beta, _ = semantic_level_attention(params, [Z1, Z2])
        q = params.sem_q.data
        W = params.sem_w.data
        b = params.sem_b.data
        w1 = float(q @ np.tanh(W @ Z1.data[0] + b))
        w2 = float(q @ np.tanh(W @ Z2.data[0] + b))
        np.testing.assert_allclose(beta.data, _softmax([w1, w2]), atol=1e-12)

    def test_shape_mismatch(self):
        rng = np.random.default_rng(6)
        params = _params(rng)
        with pytest.raises(ShapeError):
            semantic_level_attention(params, [Tensor(np.ones((2, 4))),
                                              Tensor(np.ones((3, 4)))])


class TestEncode:
    def test_single_node_single_path(self):
        rng = np.random.default_rng(7)
        params = _params(rng, paths=("MC",))
        kg = KnowledgeGraph([], VOCAB, extra_nodes=["X"])
        h_init = rng.normal(size=(1, 5))
        enc = GraphEncoder(kg, [MetaPath("MC", ("MC",))], params, h_init)
        out = enc.encode_detailed(["X"])
        projected = h_init @ params.proj_w["disease"].data \
            + params.proj_b["disease"].data
        np.testing.assert_allclose(out.Z.data, _sigmoid(projected), atol=1e-12)
        np.testing.assert_allclose(out.beta.data, [1.0], atol=1e-12)

    def test_out_of_dictionary_node_uses_fallback(self):
        emb = InitialEmbeddings(5, {"A": np.ones(5), "B": 3.0 * np.ones(5)})
        kg = KnowledgeGraph([Triplet("A", "MC", "Z")], VOCAB,
                            extra_nodes=["B"])
        h_init = emb.matrix_for(kg.nodes)
        row = list(kg.nodes).index("Z")
        np.testing.assert_allclose(h_init[row], 2.0 * np.ones(5))

    def test_chain_matches_loop_oracle(self):
        rng = np.random.default_rng(8)
        kg = _chain_kg()
        paths = [MetaPath.from_string(s) for s in ("MC", "DDx", "MC,MC")]
        params = _params(rng)
        h_init = rng.normal(size=(3, 5))
        enc = GraphEncoder(kg, paths, params, h_init)
        out = enc.encode_detailed(["A", "B", "C"])
        expected_Z, expected_beta, expected_paths = han_oracle(
            kg, paths, params, h_init, ["A", "B", "C"])
        np.testing.assert_allclose(out.Z.data, expected_Z, atol=1e-10)
        np.testing.assert_allclose(out.beta.data, expected_beta, atol=1e-10)
        for path, expected in zip(paths, expected_paths):
            np.testing.assert_allclose(out.per_path[path.name].data, expected,
                                       atol=1e-10)

    def test_subset_rows_match_full_encode(self):
        # per-path embeddings are batch-independent; the semantic weights
        # average over the batch node set, so with one path Z rows are too
        rng = np.random.default_rng(9)
        kg = _chain_kg()
        paths = [MetaPath.from_string(s) for s in ("MC", "DDx")]
        params = _params(rng, paths=("MC", "DDx"))
        h_init = rng.normal(size=(3, 5))
        enc = GraphEncoder(kg, paths, params, h_init)
        full = enc.encode_detailed(["A", "B", "C"])
        sub = enc.encode_detailed(["C", "A"])
        for name in ("MC", "DDx"):
            np.testing.assert_allclose(sub.per_path[name].data[0],
                                       full.per_path[name].data[2], atol=1e-12)
            np.testing.assert_allclose(sub.per_path[name].data[1],
                                       full.per_path[name].data[0], atol=1e-12)
        single = GraphEncoder(kg, paths[:1], params, h_init)
        full_z = single.encode(["A", "B", "C"]).data
        sub_z = single.encode(["C", "A"]).data
        np.testing.assert_allclose(sub_z[0], full_z[2], atol=1e-12)
        np.testing.assert_allclose(sub_z[1], full_z[0], atol=1e-12)

    def test_beta_is_probability_vector(self):
        for seed in range(5):
            rng = np.random.default_rng(seed)
            kg = _chain_kg()
            paths = [MetaPath.from_string(s) for s in ("MC", "DDx", "MC,MC")]
            params = _params(rng)
            enc = GraphEncoder(kg, paths, params, rng.normal(size=(3, 5)))
            beta = enc.encode_detailed(["A", "C"]).beta.data
            assert (beta >= 0).all()
            assert abs(beta.sum() - 1.0) < 1e-9

    def test_permutation_invariance(self):
        rng = np.random.default_rng(10)
        edges = [Triplet("A", "MC", "B"), Triplet("B", "MC", "C"),
                 Triplet("A", "DDx", "C"), Triplet("C", "MC", "A")]
        params = _params(rng)
        h_init = rng.normal(size=(3, 5))
        paths = [MetaPath.from_string(s) for s in ("MC", "DDx", "MC,MC")]
        enc1 = GraphEncoder(KnowledgeGraph(edges, VOCAB), paths, params, h_init)
        enc2 = GraphEncoder(KnowledgeGraph(edges[::-1], VOCAB), paths, params,
                            h_init)
        np.testing.assert_array_equal(enc1.encode(["A", "B", "C"]).data,
                                      enc2.encode(["A", "B", "C"]).data)

    def test_unknown_node_rejected(self):
        rng = np.random.default_rng(11)
        params = _params(rng, paths=("MC",))
        kg = KnowledgeGraph([Triplet("A", "MC", "B")], VOCAB)
        enc = GraphEncoder(kg, [MetaPath("MC", ("MC",))], params,
                           rng.normal(size=(2, 5)))
        with pytest.raises(VocabularyError):
            enc.encode(["A", "NOPE"])

    def test_neighbor_cap_keeps_self_and_is_stable(self):
        rng = np.random.default_rng(12)
        edges = [Triplet("H", "MC", f"N{i}") for i in range(6)]
        kg = KnowledgeGraph(edges, VOCAB)
        params = _params(rng, paths=("MC",))
        h_init = rng.normal(size=(kg.num_nodes, 5))
        enc1 = GraphEncoder(kg, [MetaPath("MC", ("MC",))], params, h_init,
                            neighbor_cap=3, seed=99)
        enc2 = GraphEncoder(KnowledgeGraph(edges[::-1], VOCAB),
                            [MetaPath("MC", ("MC",))], params, h_init,
                            neighbor_cap=3, seed=99)
        idx, mask = enc1._neighborhoods["MC"]
        h_row = kg.node_index["H"]
        kept = idx[h_row][mask[h_row]]
        assert len(kept) == 3
        assert h_row in kept
        np.testing.assert_array_equal(enc1.encode(["H"]).data,
                                      enc2.encode(["H"]).data)

    def test_gradients_through_encoder(self):
        rng = np.random.default_rng(13)
        kg = _chain_kg()
        paths = [MetaPath.from_string(s) for s in ("MC", "MC,MC")]
        params = _params(rng, d_hi=3, d_ha=4, paths=("MC", "MC,MC"))
        enc = GraphEncoder(kg, paths, params, rng.normal(size=(3, 3)))
        weights = Tensor(rng.normal(size=(3, 4)))

        def loss_fn():
            return ops.sum_(ops.mul(enc.encode(["A", "B", "C"]), weights))

        err = check_gradients(loss_fn, list(params.parameters().values()),
                              step=1e-5, max_coords=8,
                              rng=np.random.default_rng(0))
        assert err < 1e-6

    def test_leaky_relu_attention_differs(self):
        rng = np.random.default_rng(14)
        kg = _chain_kg()
        params = _params(rng, paths=("MC",))
        h_init = rng.normal(size=(3, 5))
        sig = GraphEncoder(kg, [MetaPath("MC", ("MC",))], params, h_init,
                           attention="sigmoid")
        leak = GraphEncoder(kg, [MetaPath("MC", ("MC",))], params, h_init,
                            attention="leaky_relu")
        assert not np.allclose(sig.encode(["A"]).data, leak.encode(["A"]).data)
