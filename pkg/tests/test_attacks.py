import numpy as np
import pytest

from robustnas.attacks import (AttackProxyConfig, attack_dice, attack_features, attack_random, edge_budget,
                               generate_feature_proxies, generate_proxy_set, perturb)
from robustnas.graph import Graph


def graph_from_adj(adj, labels, train=None):
    n = adj.shape[0]
    iu, ju = np.nonzero(np.triu(adj, 1))
    train = np.ones(n, bool) if train is None else train
    return Graph(n, np.stack([iu, ju], 1), np.eye(n), np.asarray(labels), int(max(labels)) + 1,
                 train, np.zeros(n, bool), np.zeros(n, bool))


def two_cliques(k=4):
    adj = np.zeros((2 * k, 2 * k))
    adj[:k, :k] = 1
    adj[k:, k:] = 1
    np.fill_diagonal(adj, 0)
    return graph_from_adj(adj, [0] * k + [1] * k)


def upper_diff(a, b):
    return int(np.sum(np.triu(a != b, 1)))


def test_edge_budget():
    assert edge_budget(100, 0.05) == 5
    assert edge_budget(101, 0.05) == 6
    assert edge_budget(3, 0.01) == 1


def test_random_attack_flip_count_and_symmetry(small_graph):
    adj = attack_random(small_graph, 7, np.random.default_rng(0))
    assert upper_diff(adj, small_graph.adjacency) == 7
    assert np.array_equal(adj, adj.T)
    assert np.all(np.diag(adj) == 0)
    assert set(np.unique(adj)) <= {0.0, 1.0}


def test_random_attack_seeded(small_graph):
    a = attack_random(small_graph, 5, np.random.default_rng(3))
    b = attack_random(small_graph, 5, np.random.default_rng(3))
    assert np.array_equal(a, b)


def test_random_attack_budget_limits():
    g = two_cliques(2)
    with pytest.raises(ValueError):
        attack_random(g, 7, np.random.default_rng(0))
    with pytest.raises(ValueError):
        attack_random(g, 0, np.random.default_rng(0))
    # every pair toggled: complement graph
    full = attack_random(g, 6, np.random.default_rng(0))
    expected = 1 - g.adjacency
    np.fill_diagonal(expected, 0)
    assert np.array_equal(full, expected)


def test_dice_eligibility_on_two_cliques():
    g = two_cliques()
    for seed in range(20):
        adj = attack_dice(g, 4, g.labels, np.random.default_rng(seed))
        removed = np.argwhere(np.triu((g.adjacency > 0) & (adj == 0), 1))
        added = np.argwhere(np.triu((g.adjacency == 0) & (adj > 0), 1))
        assert all(g.labels[i] == g.labels[j] for i, j in removed)
        assert all(g.labels[i] != g.labels[j] for i, j in added)
        assert len(removed) + len(added) == 4


def test_dice_deletion_only_drops_homophilous_count():
    # no different-label pair is absent, so every flip must be a deletion
    adj = np.ones((6, 6)) - np.eye(6)
    g = graph_from_adj(adj, [0, 0, 0, 1, 1, 1])
    same_before = sum(g.labels[i] == g.labels[j] for i, j in np.argwhere(np.triu(adj, 1)))
    budget = int(same_before)
    out = attack_dice(g, budget, g.labels, np.random.default_rng(1))
    same_after = sum(g.labels[i] == g.labels[j] for i, j in np.argwhere(np.triu(out, 1)))
    assert same_before - same_after == budget
    with pytest.raises(ValueError):
        attack_dice(g, budget + 1, g.labels, np.random.default_rng(1))


def test_dice_only_consults_known_labels():
    g = two_cliques()
    known = np.array([True, True, False, False, True, True, False, False])
    for seed in range(10):
        adj = attack_dice(g, 3, g.labels, np.random.default_rng(seed), known=known)
        changed = np.argwhere(np.triu(adj != g.adjacency, 1))
        assert all(known[i] and known[j] for i, j in changed)
    with pytest.raises(ValueError):
        attack_dice(g, 1, g.labels, np.random.default_rng(0), known=np.arange(8) < 4)


def test_dice_seeded(small_graph):
    a = perturb(small_graph, "dice", 0.2, np.random.default_rng(5))
    b = perturb(small_graph, "dice", 0.2, np.random.default_rng(5))
    assert np.array_equal(a, b)


def test_proxy_set(small_graph):
    proxies = generate_proxy_set(small_graph, AttackProxyConfig(T=5, seed=2))
    assert len(proxies) == 5
    for i in range(5):
        for j in range(i + 1, 5):
            assert not np.array_equal(proxies[i], proxies[j])
    again = generate_proxy_set(small_graph, AttackProxyConfig(T=5, seed=2))
    assert all(np.array_equal(a, b) for a, b in zip(proxies, again))
    budget = edge_budget(small_graph.num_edges, 0.05)
    assert all(upper_diff(p, small_graph.adjacency) == budget for p in proxies)


def test_single_flip_proxy(small_graph):
    (proxy,) = generate_proxy_set(small_graph, AttackProxyConfig(ptb_rate=1e-6, T=1))
    assert upper_diff(proxy, small_graph.adjacency) == 1


def test_proxy_config_validation():
    for kw in ({"kind": "mettack"}, {"ptb_rate": 0.0}, {"ptb_rate": 1.0}, {"T": 0}):
        with pytest.raises(ValueError):
            AttackProxyConfig(**kw)


def test_feature_attack(small_graph):
    x = (small_graph.features > 0).astype(float)
    out = attack_features(x, 0.1, np.random.default_rng(0))
    assert int(np.sum(out != x)) == edge_budget(int(np.count_nonzero(x)), 0.1)
    assert set(np.unique(out)) <= {0.0, 1.0}
    proxies = generate_feature_proxies(small_graph, 0.05, 3, 0)
    assert len(proxies) == 3 and proxies[0].shape == small_graph.features.shape
