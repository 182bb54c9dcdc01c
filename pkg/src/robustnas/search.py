"""Prediction-stability metric, fitness, evolutionary search and stand-alone retraining."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .graph import Graph
from .layers import Dims
from .space import (Genome, SearchSpaceConfig, crossover, mutate, random_genome,
                    validate_genome)
from .supernet import Supernet, TrainConfig, accuracy, build_standalone, infer, train_paths

log = logging.getLogger(__name__)

KL_EPS = 1e-12

# model_infer(genome, graph, adjacency_override=None, features_override=None) -> (N, C) probabilities
InferFn = Callable[..., np.ndarray]


def kl_divergence(p, q, eps: float = KL_EPS) -> float:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {q.shape}")
    for name, v in (("p", p), ("q", q)):
        if abs(v.sum() - 1.0) > 1e-6:
            raise ValueError(f"{name} does not sum to 1")
    return float(np.sum(p * np.log((p + eps) / (q + eps))))


def kl_rows(p: np.ndarray, q: np.ndarray, eps: float = KL_EPS) -> np.ndarray:
    """Row-wise KL(p_i || q_i) for two (N, C) probability tables."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {q.shape}")
    return np.sum(p * np.log((p + eps) / (q + eps)), axis=1)


def supernet_infer(net: Supernet) -> InferFn:
    def run(genome, graph, adjacency_override=None, features_override=None):
        return infer(net, genome, graph, adjacency_override, features_override)
    return run


def _as_infer(model) -> InferFn:
    return supernet_infer(model) if isinstance(model, Supernet) else model


def _stability(model_infer: InferFn, genome: Genome, graph: Graph, proxies, clean: np.ndarray | None,
               which: str) -> tuple[float, list[float]]:
    if len(proxies) == 0:
        raise ValueError("proxy set is empty")
    if clean is None:
        clean = model_infer(genome, graph)
    reference = graph.adjacency if which == "adjacency" else graph.features
    per_proxy = []
    for proxy in proxies:
        proxy = np.asarray(proxy, dtype=np.float64)
        if proxy.shape == reference.shape and np.array_equal(proxy, reference):
            perturbed = clean
        elif which == "adjacency":
            perturbed = model_infer(genome, graph, adjacency_override=proxy)
        else:
            perturbed = model_infer(genome, graph, features_override=proxy)
        per_proxy.append(float(np.mean(kl_rows(clean, perturbed))))
    r = 0.0 - float(np.mean(per_proxy))
    if not r <= 0.0:
        raise AssertionError(f"robustness metric must be <= 0, got {r}")
    return r, per_proxy


def robustness_metric(model_infer, genome: Genome, graph: Graph, proxies: Sequence[np.ndarray],
                      clean: np.ndarray | None = None) -> float:
    """Negated mean KL between clean and perturbed predictions over all nodes and proxies."""
    return _stability(_as_infer(model_infer), genome, graph, proxies, clean, "adjacency")[0]


def robustness_metric_features(model_infer, genome: Genome, graph: Graph,
                               feature_proxies: Sequence[np.ndarray], clean: np.ndarray | None = None) -> float:
    return _stability(_as_infer(model_infer), genome, graph, feature_proxies, clean, "features")[0]


@dataclass(frozen=True)
class RobustnessReport:
    genome: Genome
    R: float
    acc_val: float
    fitness: float
    per_proxy_kl: tuple[float, ...] = ()

    def __post_init__(self):
        if self.R > 0:
            raise ValueError("R must be <= 0")
        if not np.isfinite(self.fitness):
            raise ValueError("fitness is not finite")

    def sort_key(self):
        # ascending order == best first
        return (-self.fitness, -self.acc_val, self.genome.to_json())

    def to_dict(self) -> dict:
        return {"genome": self.genome.to_dict(), "genome_id": self.genome.genome_id, "R": self.R,
                "acc_val": self.acc_val, "fitness": self.fitness, "per_proxy_kl": list(self.per_proxy_kl)}

    @classmethod
    def from_dict(cls, d: dict) -> "RobustnessReport":
        return cls(Genome.from_dict(d["genome"]), d["R"], d["acc_val"], d["fitness"],
                   tuple(d.get("per_proxy_kl", ())))


def fitness(genome: Genome, supernet, graph: Graph, proxies: Sequence[np.ndarray],
            lam: float) -> RobustnessReport:
    """Validation accuracy plus ``lam`` times the robustness metric."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    run = _as_infer(supernet)
    clean = run(genome, graph)
    acc_val = accuracy(clean, graph.labels, graph.val_mask)
    r, per_proxy = _stability(run, genome, graph, proxies, clean, "adjacency")
    return RobustnessReport(genome, r, acc_val, acc_val + lam * r, tuple(per_proxy))


@dataclass(frozen=True)
class EvoConfig:
    P: int = 50
    s: int = 25
    p: float = 0.1
    n: int = 25
    k: int = 10
    max_iter: int = 20
    lam: float = 0.05
    seed: int = 0
    max_evals: int | None = None

    def __post_init__(self):
        if self.s + self.n != self.P:
            raise ValueError("mutation size s plus crossover size n must equal population P")
        if not 1 <= self.k <= self.P:
            raise ValueError("k must lie in [1, P]")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if not 0.0 <= self.p <= 1.0:
            raise ValueError("mutation probability must lie in [0, 1]")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.max_evals is not None and self.max_evals < 1:
            raise ValueError("max_evals must be >= 1")


def select_top(reports: Sequence[RobustnessReport], k: int) -> list[RobustnessReport]:
    """Best ``k`` distinct genomes: fitness desc, then acc_val desc, then genome JSON."""
    unique = {r.genome.to_json(): r for r in reports}
    return sorted(unique.values(), key=RobustnessReport.sort_key)[:k]


@dataclass
class SearchResult:
    top_k: list[RobustnessReport]
    trajectory: list[dict]
    evaluations: int
    archive: dict[str, RobustnessReport] = field(repr=False, default_factory=dict)


class _BudgetExhausted(Exception):
    pass


def evolutionary_search(supernet, graph: Graph, proxies: Sequence[np.ndarray], evo: EvoConfig,
                        space: SearchSpaceConfig | None = None,
                        evaluate: Callable[[Genome], RobustnessReport] | None = None) -> SearchResult:
    """Generational evolution with a global archive of every evaluated genome.

    ``evaluate`` overrides the supernet fitness (it must be deterministic);
    evaluations are memoized so repeated genomes cost nothing and
    ``evo.max_evals`` caps the number of distinct genomes evaluated.
    """
    if space is None:
        if not isinstance(supernet, Supernet):
            raise ValueError("a search space is required when the model is not a Supernet")
        space = supernet.space
    if evaluate is None:
        evaluate = lambda g: fitness(g, supernet, graph, proxies, evo.lam)
    rng = np.random.default_rng(np.random.SeedSequence([evo.seed, 0x65766F]))
    archive: dict[str, RobustnessReport] = {}

    def score(g: Genome) -> RobustnessReport:
        key = g.to_json()
        hit = archive.get(key)
        if hit is None:
            if evo.max_evals is not None and len(archive) >= evo.max_evals:
                raise _BudgetExhausted
            problems = validate_genome(g, space)
            if problems:
                raise ValueError(f"search produced an invalid genome: {problems}")
            hit = archive[key] = evaluate(g)
        return hit

    population = [random_genome(space, rng) for _ in range(evo.P)]
    trajectory = []
    for iteration in range(1, evo.max_iter + 1):
        reports = []
        try:
            for g in population:
                reports.append(score(g))
        except _BudgetExhausted:
            log.info("evaluation budget of %d reached at iteration %d", evo.max_evals, iteration)
        if reports:
            best = select_top(archive.values(), 1)[0]
            trajectory.append({
                "iteration": iteration, "best_fitness": best.fitness,
                "mean_fitness": float(np.mean([r.fitness for r in reports])),
                "best_acc_val": best.acc_val, "best_R": best.R, "best_genome_json": best.genome.to_json(),
            })
        if len(reports) < len(population) or iteration == evo.max_iter:
            break
        parents = select_top(reports, evo.k)
        children = []
        for _ in range(evo.n):
            a, b = rng.integers(len(parents), size=2)
            children.append(crossover(parents[a].genome, parents[b].genome, rng))
        for _ in range(evo.s):
            children.append(mutate(parents[int(rng.integers(len(parents)))].genome, evo.p, space, rng))
        population = children
    return SearchResult(select_top(archive.values(), evo.k), trajectory, len(archive), archive)


TRAJECTORY_FIELDS = ("iteration", "best_fitness", "mean_fitness", "best_acc_val", "best_R", "best_genome_json")


def write_trajectory(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TRAJECTORY_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def write_top_k(reports: Sequence[RobustnessReport], path, metadata: dict | None = None) -> None:
    payload = {"metadata": metadata or {}, "top_k": [r.to_dict() for r in reports]}
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_top_k(path) -> tuple[dict, list[RobustnessReport]]:
    with open(path) as fh:
        payload = json.load(fh)
    return payload.get("metadata", {}), [RobustnessReport.from_dict(d) for d in payload["top_k"]]


@dataclass
class RetrainResult:
    model: Supernet
    clean_test_acc: float
    perturbed_test_acc: list[float]
    trajectory: list[tuple[int, str, float]] = field(repr=False, default_factory=list)


def retrain_from_scratch(genome: Genome, graph: Graph, train_config: TrainConfig,
                         space: SearchSpaceConfig, perturbed: Sequence[np.ndarray] = ()) -> RetrainResult:
    """Train a fresh bank for ``genome`` alone on ``graph``; test accuracy clean and on ``perturbed``.

    For the poisoning setting pass a graph whose adjacency is already perturbed.
    """
    problems = validate_genome(genome, space)
    if problems:
        raise ValueError("invalid genome: " + "; ".join(problems))
    dims = Dims(graph.feature_dim, space.hidden_dim, graph.num_classes)
    model = build_standalone(genome, space, dims, train_config.seed)
    traj = train_paths(model, graph, train_config, lambda rng: genome)
    clean = accuracy(infer(model, genome, graph), graph.labels, graph.test_mask)
    ptb = [accuracy(infer(model, genome, graph, adjacency_override=a), graph.labels, graph.test_mask)
           for a in perturbed]
    return RetrainResult(model, clean, ptb, traj)
