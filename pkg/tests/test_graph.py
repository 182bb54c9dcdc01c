import json
import warnings
from math import comb

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from robustnas.graph import (Graph, SbmParams, canonical_edges, generate_sbm, load_dataset,
                             save_dataset, split_nodes)


def write_manifest(tmp_path, edges_text, n=3, d0=2, c=2, labels=None, splits=None, features=None):
    (tmp_path / "g.edges.txt").write_text(edges_text)
    feats = np.arange(n * d0, dtype=float).reshape(n, d0) if features is None else features
    np.savetxt(tmp_path / "g.features.csv", feats, delimiter=",")
    (tmp_path / "g.labels.txt").write_text("\n".join(str(y) for y in (labels or [i % c for i in range(n)])))
    (tmp_path / "g.splits.txt").write_text("\n".join(splits or ["train"] * n))
    manifest = {"edges": "g.edges.txt", "features": "g.features.csv", "labels": "g.labels.txt",
                "splits": "g.splits.txt", "n": n, "d0": d0, "c": c}
    path = tmp_path / "g.manifest.json"
    path.write_text(json.dumps(manifest))
    return path


def test_load_path_graph(tmp_path):
    g = load_dataset(write_manifest(tmp_path, "0 1\n1 2\n"))
    assert g.edges.tolist() == [[0, 1], [1, 2]]
    assert g.degrees.tolist() == [1, 2, 1]
    assert np.array_equal(g.adjacency, g.adjacency.T)


def test_load_symmetrizes_duplicates(tmp_path):
    g = load_dataset(write_manifest(tmp_path, "0 1\n1 0\n"))
    assert g.edges.tolist() == [[0, 1]]


def test_load_drops_self_loop_with_warning(tmp_path):
    with pytest.warns(UserWarning, match="dropped 1 self-loop"):
        g = load_dataset(write_manifest(tmp_path, "2 2\n0 1\n"))
    assert g.num_edges == 1


def test_load_errors(tmp_path):
    path = write_manifest(tmp_path, "0 1\n")
    (tmp_path / "g.labels.txt").write_text("0\n1\n5\n")
    with pytest.raises(ValueError, match="label"):
        load_dataset(path)
    path = write_manifest(tmp_path, "0 1\n", d0=3)
    np.savetxt(tmp_path / "g.features.csv", np.zeros((3, 2)), delimiter=",")
    with pytest.raises(ValueError, match="shape"):
        load_dataset(path)
    path = write_manifest(tmp_path, "0 1\n", features=np.array([[0.0, np.nan], [1, 1], [2, 2]]))
    with pytest.raises(ValueError, match="non-finite"):
        load_dataset(path)
    (tmp_path / "g.edges.txt").unlink()
    with pytest.raises(FileNotFoundError):
        load_dataset(path)


def test_graph_rejects_bad_edges():
    with pytest.raises(ValueError):
        Graph(3, np.array([[1, 0]]), np.zeros((3, 1)), np.zeros(3, int), 1, *(np.zeros(3, bool),) * 3)


def test_sbm_degenerate_cliques():
    g = generate_sbm(SbmParams(blocks=2, nodes_per_block=3, p_in=1.0, p_out=0.0, feature_dim=4))
    assert g.edges.tolist() == [[0, 1], [0, 2], [1, 2], [3, 4], [3, 5], [4, 5]]
    assert g.labels.tolist() == [0, 0, 0, 1, 1, 1]


def test_sbm_deterministic():
    p = SbmParams(blocks=3, nodes_per_block=20, seed=5)
    a, b = generate_sbm(p), generate_sbm(p)
    assert a.digest == b.digest
    assert np.array_equal(a.features, b.features)


def test_sbm_rejects_heterophily_and_empty():
    with pytest.raises(ValueError):
        SbmParams(p_in=0.01, p_out=0.2)
    with pytest.raises(ValueError):
        generate_sbm(SbmParams(blocks=0))


def test_sbm_edge_count_within_three_sigma():
    blocks, size, p_in, p_out = 4, 100, 0.2, 0.02
    intra = blocks * comb(size, 2)
    inter = comb(blocks * size, 2) - intra
    mean = intra * p_in + inter * p_out
    sd = np.sqrt(intra * p_in * (1 - p_in) + inter * p_out * (1 - p_out))
    for seed in range(20):
        g = generate_sbm(SbmParams(blocks, size, p_in, p_out, feature_dim=2, seed=seed))
        assert abs(g.num_edges - mean) < 3 * sd


def test_split_sizes_and_errors():
    g = generate_sbm(SbmParams(blocks=2, nodes_per_block=50, feature_dim=2))
    s = split_nodes(g, (0.1, 0.1, 0.8), seed=0)
    assert (s.train_mask.sum(), s.val_mask.sum(), s.test_mask.sum()) == (10, 10, 80)
    assert not np.any(s.train_mask & s.test_mask)
    all_train = split_nodes(g, (1.0, 0.0, 0.0))
    assert all_train.train_mask.all()
    other = split_nodes(g, (0.1, 0.1, 0.8), seed=1)
    assert not np.array_equal(s.train_mask, other.train_mask)
    with pytest.raises(ValueError):
        split_nodes(g, (0.01, 0.1, 0.8))


def test_save_load_roundtrip(tmp_path):
    g = split_nodes(generate_sbm(SbmParams(blocks=2, nodes_per_block=10, feature_dim=3, seed=2)), seed=3)
    back = load_dataset(save_dataset(g, tmp_path))
    assert np.array_equal(back.edges, g.edges)
    assert np.array_equal(back.labels, g.labels)
    for name in ("train_mask", "val_mask", "test_mask"):
        assert np.array_equal(getattr(back, name), getattr(g, name))
    assert np.max(np.abs(back.features - g.features)) <= 1e-12


def test_with_adjacency_keeps_nodes():
    g = generate_sbm(SbmParams(blocks=2, nodes_per_block=4, feature_dim=2, p_in=1.0, p_out=0.0))
    a = np.zeros((8, 8))
    a[0, 7] = a[7, 0] = 1
    h = g.with_adjacency(a)
    assert h.edges.tolist() == [[0, 7]]
    assert np.array_equal(h.labels, g.labels)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 12), st.lists(st.tuples(st.integers(0, 11), st.integers(0, 11)), max_size=40))
def test_degree_sum_is_twice_edges(n, pairs):
    pairs = [(u % n, v % n) for u, v in pairs]
    edges, loops = canonical_edges(pairs, n)
    g = Graph(n, edges, np.zeros((n, 1)), np.zeros(n, int), 1, *(np.zeros(n, bool),) * 3)
    assert g.degrees.sum() == 2 * g.num_edges
    assert loops == sum(u == v for u, v in pairs)
