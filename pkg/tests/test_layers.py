import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import elu, gcn_layer, random_symmetric
from robustnas import autodiff as ad
from robustnas.autodiff import Tensor
from robustnas.graph import Graph
from robustnas.layers import (Dims, EdgeSet, GraphContext, build_bank, compute_coefficients, forward_layer,
                              forward_network, genome_param_shapes, initial_state, space_param_shapes)
from robustnas.space import (AGGR_OPS, COEFF_OPS, COMB_OPS, Genome, LayerGene, SearchSpaceConfig,
                             recover_named_arch)


def make_graph(adj, features, num_classes=2):
    n = adj.shape[0]
    iu, ju = np.nonzero(np.triu(adj, 1))
    labels = np.arange(n) % num_classes
    return Graph(n, np.stack([iu, ju], 1), features, labels, num_classes, *(np.zeros(n, bool),) * 3)


PATH3 = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]], dtype=float)


def test_gcn_coefficients():
    a = np.zeros((5, 5))
    a[0, 1:4] = a[1:4, 0] = 1.0  # node 0: augmented degree 4; leaves: 2; node 4 isolated
    a[0, 3] = a[3, 0] = 0.25  # a down-weighted edge lowers both weighted degrees
    edges = EdgeSet.from_masked(a)
    e = compute_coefficients("GCN", Tensor(np.ones((5, 2))), edges, None, 1).data[:, 0]
    lookup = {(d, s): v for d, s, v in zip(edges.dst, edges.src, e)}
    assert lookup[(4, 4)] == 1.0
    assert lookup[(0, 1)] == pytest.approx(1 / np.sqrt(3.25 * 2))
    assert lookup[(3, 0)] == pytest.approx(1 / np.sqrt(1.25 * 3.25))
    assert lookup[(0, 0)] == pytest.approx(1 / 3.25)


def test_gat_zero_attention_is_uniform():
    bank = build_bank({"layer1.coeff.GAT.a_l": (2, 1), "layer1.coeff.GAT.a_r": (2, 1)}, 0)
    for k in ("a_l", "a_r"):
        bank[f"layer1.coeff.GAT.{k}"].data[:] = 0.0
    edges = EdgeSet.from_masked(PATH3)
    e = compute_coefficients("GAT", Tensor(np.random.default_rng(0).normal(size=(3, 2))), edges, bank, 1).data[:, 0]
    expected = 1.0 / edges.count[edges.dst, 0]
    assert np.allclose(e, expected)


def test_linear_coefficient_is_uniform_within_neighborhood():
    bank = build_bank({"layer1.coeff.Linear.w_l": (2, 4)}, 0)
    edges = EdgeSet.from_masked(PATH3)
    e = compute_coefficients("Linear", Tensor(np.random.default_rng(1).normal(size=(3, 2))), edges, bank, 1)
    assert np.allclose(e.data[:, 0], 1.0 / edges.count[edges.dst, 0])


def unit_bank(genome, space, dims):
    bank = build_bank(genome_param_shapes(genome, space, dims), 0)
    for name in bank.names():
        t = bank[name].data
        t[:] = 0.0
        if name.endswith(".w") or name.endswith("mlp_w"):
            t[:] = np.eye(*t.shape)
    return bank


def test_gcn_layer_matches_hand_propagation():
    x = np.array([[1.0, -0.5], [0.2, 0.3], [-1.0, 2.0]])
    g = make_graph(PATH3, x)
    space = SearchSpaceConfig(num_layers=1, hidden_dim=2)
    genome = recover_named_arch("GCN", 1)
    bank = unit_bank(genome, space, Dims(2, 2, 2))
    ctx = GraphContext(g)
    out = forward_layer(genome.layers[0], 1, initial_state(ctx), bank, ctx, space).hidden.data
    ref = gcn_layer(PATH3.tolist(), x.tolist(), np.eye(2).tolist(), [0.0, 0.0])
    assert np.max(np.abs(out - np.array(ref))) < 1e-6


def test_max_over_self_loop_only():
    x = np.array([[1.0, -2.0], [0.5, 0.5]])
    g = make_graph(np.zeros((2, 2)), x)
    space = SearchSpaceConfig(num_layers=1, hidden_dim=2)
    genome = Genome((LayerGene("Identity", "Identity", "Max", "Identity", "Identity"),), "Concat")
    bank = unit_bank(genome, space, Dims(2, 2, 2))
    ctx = GraphContext(g)
    out = forward_layer(genome.layers[0], 1, initial_state(ctx), bank, ctx, space).hidden.data
    assert np.allclose(out, np.vectorize(elu)(x))


def test_zero_mask_isolates_nodes():
    rng = np.random.default_rng(2)
    a = random_symmetric(6, 0.6, rng)
    x = rng.normal(size=(6, 3))
    g = make_graph(a, x)
    space = SearchSpaceConfig(num_layers=1, hidden_dim=4)
    gene = LayerGene("Identity", "GCN", "Sum", "Identity", "Identity")
    genome = Genome((gene,), "Concat")
    bank = build_bank(genome_param_shapes(genome, space, Dims(3, 4, 2)), 0)
    masked = forward_layer(gene, 1, initial_state(GraphContext(g, adjacency=np.zeros((6, 6)))), bank,
                           GraphContext(g, adjacency=np.zeros((6, 6))), space).hidden.data
    alone = forward_layer(gene, 1, initial_state(GraphContext(make_graph(np.zeros((6, 6)), x))), bank,
                          GraphContext(make_graph(np.zeros((6, 6)), x)), space).hidden.data
    p = "layer1.linear.Identity."
    expected = np.vectorize(elu)(x @ bank[p + "w"].data + bank[p + "b"].data)
    assert np.allclose(masked, expected) and np.allclose(alone, expected)


def test_concat_classifier_width_and_probabilities(small_graph):
    space = SearchSpaceConfig(num_layers=2, hidden_dim=4)
    dims = Dims(small_graph.feature_dim, 4, small_graph.num_classes)
    shapes = space_param_shapes(space, dims)
    assert shapes["classifier.Concat.w"] == (8, dims.classes)
    genome = recover_named_arch("JK-Net", 2)
    bank = build_bank(shapes, 0)
    logits, probs = forward_network(genome, bank, GraphContext(small_graph), space)
    assert logits.shape == (small_graph.n, small_graph.num_classes)
    assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-9)


def test_single_layer_concat_is_classifier_of_first_layer(small_graph):
    space = SearchSpaceConfig(num_layers=1, hidden_dim=4)
    genome = recover_named_arch("GCN", 1)
    bank = build_bank(space_param_shapes(space, Dims(small_graph.feature_dim, 4, 3)), 0)
    ctx = GraphContext(small_graph)
    h = forward_layer(genome.layers[0], 1, initial_state(ctx), bank, ctx, space).hidden.data
    logits, _ = forward_network(genome, bank, ctx, space)
    assert np.allclose(logits.data, h @ bank["classifier.Concat.w"].data + bank["classifier.Concat.b"].data)


def test_max_layer_aggregator_of_identical_outputs(small_graph):
    space = SearchSpaceConfig(num_layers=2, hidden_dim=4)
    bank = build_bank(space_param_shapes(space, Dims(small_graph.feature_dim, 4, 3)), 0)
    from robustnas.layers import aggregate_layers
    h = Tensor(np.random.default_rng(0).normal(size=(5, 4)))
    assert np.array_equal(aggregate_layers("Max", [h, h], bank, 4).data, h.data)


def test_zero_skip_layers_have_no_influence(small_graph):
    space = SearchSpaceConfig(num_layers=3, hidden_dim=4)
    bank = build_bank(space_param_shapes(space, Dims(small_graph.feature_dim, 4, 3)), 0)
    genome = Genome((LayerGene("Identity", "GAT", "Sum", "GIN", "Identity"),
                     LayerGene("NIE", "Cos", "Max", "SAGE", "Zero"),
                     LayerGene("VPO", "GCN", "Mean", "Identity", "Zero")), "LSTM")
    ctx = GraphContext(small_graph)
    before, _ = forward_network(genome, bank, ctx, space)
    for name in bank.names():
        if name.startswith(("layer2.", "layer3.")):
            bank[name].data += 3.0
    after, _ = forward_network(genome, bank, ctx, space)
    assert np.array_equal(before.data, after.data)


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(["Identity", "NIE", "VPO", "LRA", "NFS"]), st.sampled_from(COEFF_OPS),
       st.sampled_from(AGGR_OPS), st.sampled_from(COMB_OPS), st.sampled_from(["Concat", "Max", "LSTM"]),
       st.integers(0, 10**6))
def test_permutation_equivariance(mask, coeff, aggr, comb, layer_aggr, seed):
    rng = np.random.default_rng(seed)
    a = random_symmetric(6, 0.5, rng)
    x = rng.normal(size=(6, 3))
    space = SearchSpaceConfig(num_layers=2, hidden_dim=4, att_dim=3)
    second = "NIE" if mask in ("LRA", "NFS") else mask
    genome = Genome((LayerGene(mask, coeff, aggr, comb, "Identity"),
                     LayerGene(second, coeff, aggr, comb, "Identity")), layer_aggr)
    bank = build_bank(space_param_shapes(space, Dims(3, 4, 2)), seed % 97)
    perm = rng.permutation(6)
    g1 = make_graph(a, x)
    g2 = make_graph(a[np.ix_(perm, perm)], x[perm])
    z1, _ = forward_network(genome, bank, GraphContext(g1), space)
    z2, _ = forward_network(genome, bank, GraphContext(g2), space)
    assert np.max(np.abs(z1.data[perm] - z2.data)) < 1e-8
