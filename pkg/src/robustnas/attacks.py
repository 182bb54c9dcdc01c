"""Cheap structure and feature perturbations used as attack proxies and for poisoning runs."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .graph import Graph

ATTACK_KINDS = ("random", "dice")


@dataclass(frozen=True)
class AttackProxyConfig:
    kind: str = "random"
    ptb_rate: float = 0.05
    T: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}; expected one of {ATTACK_KINDS}")
        if not 0.0 < self.ptb_rate < 1.0:
            raise ValueError("ptb_rate must lie in (0, 1)")
        if self.T < 1:
            raise ValueError("T must be >= 1")


def edge_budget(num_edges: int, ptb_rate: float) -> int:
    """Number of undirected flips for a perturbation rate (at least one)."""
    return max(1, math.ceil(ptb_rate * num_edges - 1e-9))


def _pair_from_index(idx: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    # row-major enumeration of the strict upper triangle
    i, j = np.triu_indices(n, k=1)
    return i[idx], j[idx]


def _symmetric_toggle(adjacency: np.ndarray, rows, cols) -> np.ndarray:
    out = (np.asarray(adjacency) > 0).astype(np.float64)
    out[rows, cols] = 1.0 - out[rows, cols]
    out[cols, rows] = out[rows, cols]
    np.fill_diagonal(out, 0.0)
    return out


def attack_random(graph: Graph, budget: int, rng: np.random.Generator) -> np.ndarray:
    """Toggle ``budget`` distinct, uniformly chosen unordered node pairs."""
    n = graph.n
    pairs = n * (n - 1) // 2
    if budget < 1:
        raise ValueError("budget must be >= 1")
    if budget > pairs:
        raise ValueError(f"budget {budget} exceeds the {pairs} flippable pairs")
    idx = rng.choice(pairs, size=budget, replace=False)
    rows, cols = _pair_from_index(np.sort(idx), n)
    return _symmetric_toggle(graph.adjacency, rows, cols)


def attack_dice(graph: Graph, budget: int, labels: np.ndarray, rng: np.random.Generator,
                known: np.ndarray | None = None) -> np.ndarray:
    """Delete same-label edges / connect different-label pairs, judged on ``known`` nodes only.

    Each step deletes w.p. 1/2 and inserts otherwise, falling back to the other
    action when its pool is empty. ``known`` defaults to the training mask.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    labels = np.asarray(labels)
    known = graph.train_mask if known is None else np.asarray(known, dtype=bool)
    if len(np.unique(labels[known])) < 2:
        raise ValueError("DICE needs at least two classes among the known nodes")
    a = graph.adjacency > 0
    iu, ju = np.triu_indices(graph.n, k=1)
    both = known[iu] & known[ju]
    same = labels[iu] == labels[ju]
    present = a[iu, ju]
    # Removing a same-label edge never creates a different-label non-edge (and
    # vice versa), so each pool is consumed without replacement independently.
    delete_pool = np.flatnonzero(both & same & present)
    insert_pool = np.flatnonzero(both & ~same & ~present)
    delete_pool = delete_pool[rng.permutation(len(delete_pool))]
    insert_pool = insert_pool[rng.permutation(len(insert_pool))]
    chosen = []
    d = i = 0
    for _ in range(budget):
        can_delete, can_insert = d < len(delete_pool), i < len(insert_pool)
        if not (can_delete or can_insert):
            raise ValueError(f"DICE exhausted both pools after {len(chosen)} of {budget} flips")
        want_delete = rng.random() < 0.5
        if want_delete and not can_delete:
            want_delete = False
        elif not want_delete and not can_insert:
            want_delete = True
        if want_delete:
            chosen.append(delete_pool[d])
            d += 1
        else:
            chosen.append(insert_pool[i])
            i += 1
    idx = np.asarray(chosen, dtype=np.int64)
    return _symmetric_toggle(graph.adjacency, iu[idx], ju[idx])


def attack_features(features: np.ndarray, ptb_rate: float, rng: np.random.Generator) -> np.ndarray:
    """Toggle ceil(ptb_rate * nnz) distinct entries: nonzero -> 0, zero -> 1."""
    x = np.asarray(features, dtype=np.float64)
    if not 0.0 < ptb_rate < 1.0:
        raise ValueError("ptb_rate must lie in (0, 1)")
    budget = edge_budget(int(np.count_nonzero(x)), ptb_rate)
    if budget > x.size:
        raise ValueError("feature budget exceeds the number of entries")
    flat = rng.choice(x.size, size=budget, replace=False)
    out = x.copy().ravel()
    out[flat] = np.where(out[flat] != 0, 0.0, 1.0)
    return out.reshape(x.shape)


def perturb(graph: Graph, kind: str, ptb_rate: float, rng: np.random.Generator,
            known: np.ndarray | None = None) -> np.ndarray:
    budget = edge_budget(graph.num_edges, ptb_rate)
    if kind == "random":
        return attack_random(graph, budget, rng)
    if kind == "dice":
        return attack_dice(graph, budget, graph.labels, rng, known)
    raise ValueError(f"unknown attack kind {kind!r}")


def generate_proxy_set(graph: Graph, config: AttackProxyConfig) -> list[np.ndarray]:
    """T perturbed adjacencies, each drawn from its own child seed of ``config.seed``."""
    children = np.random.SeedSequence(config.seed).spawn(config.T)
    return [perturb(graph, config.kind, config.ptb_rate, np.random.default_rng(c)) for c in children]


def generate_feature_proxies(graph: Graph, ptb_rate: float, T: int, seed: int) -> list[np.ndarray]:
    children = np.random.SeedSequence(seed).spawn(T)
    return [attack_features(graph.features, ptb_rate, np.random.default_rng(c)) for c in children]
