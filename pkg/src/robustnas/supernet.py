"""Weight-sharing supernet trained by uniform single-path sampling."""
from __future__ import annotations

import json
import logging
from collections import OrderedDict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .graph import Graph
from .layers import (DropoutConfig, Dims, GraphContext, build_bank, forward_network,
                     genome_param_shapes, space_param_shapes)
from .space import Genome, SearchSpaceConfig, random_genome, validate_genome

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    def __init__(self, message: str, genome: Genome | None = None, epoch: int | None = None):
        super().__init__(message)
        self.genome = genome
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1000
    lr: float = 0.005
    weight_decay: float = 3e-4
    dropout: float = 0.5
    attn_dropout: float = 0.6
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.lr <= 0:
            raise ValueError("epochs and lr must be positive")


class Supernet:
    """All (layer, op) parameter banks of a search space plus a context cache for inference."""

    def __init__(self, space: SearchSpaceConfig, dims: Dims, bank: ad.ParamBank):
        self.space = space
        self.dims = dims
        self.bank = bank
        self._contexts: OrderedDict[str, GraphContext] = OrderedDict()

    def context(self, graph: Graph) -> GraphContext:
        key = graph.digest
        ctx = self._contexts.get(key)
        if ctx is None:
            ctx = self._contexts[key] = GraphContext(graph)
            while len(self._contexts) > 16:
                self._contexts.popitem(last=False)
        return ctx

    def save(self, bank_path, sidecar_path) -> None:
        ad.save_bank(self.bank, bank_path)
        meta = {"space": self.space.to_dict(), "dims": asdict(self.dims), "checksum": self.bank.checksum()}
        Path(sidecar_path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, bank_path, sidecar_path) -> "Supernet":
        meta = json.loads(Path(sidecar_path).read_text())
        bank = ad.load_bank(bank_path)
        if bank.checksum() != meta["checksum"]:
            raise ValueError(f"{bank_path}: checksum does not match {sidecar_path}")
        return cls(SearchSpaceConfig.from_dict(meta["space"]), Dims(**meta["dims"]), bank)


def build_supernet(space: SearchSpaceConfig, dims: Dims, seed: int = 0) -> Supernet:
    if min(dims.d0, dims.hidden, dims.classes) < 1:
        raise ValueError("dims must be positive")
    return Supernet(space, dims, build_bank(space_param_shapes(space, dims), seed))


def build_standalone(genome: Genome, space: SearchSpaceConfig, dims: Dims, seed: int = 0) -> Supernet:
    """A bank holding only the parameters ``genome`` uses (same init as the supernet entries)."""
    return Supernet(space, dims, build_bank(genome_param_shapes(genome, space, dims), seed))


def sample_path(space: SearchSpaceConfig, rng: np.random.Generator) -> Genome:
    return random_genome(space, rng)


def _streams(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    ss = np.random.SeedSequence(seed)
    path_ss, drop_ss = ss.spawn(2)
    return np.random.default_rng(path_ss), np.random.default_rng(drop_ss)


def train_paths(net: Supernet, graph: Graph, config: TrainConfig,
                sampler: Callable[[np.random.Generator], Genome]) -> list[tuple[int, str, float]]:
    """Full-batch training where each epoch updates only the path chosen by ``sampler``."""
    if not graph.train_mask.any():
        raise ValueError("graph has an empty training mask")
    ctx = net.context(graph)
    path_rng, drop_rng = _streams(config.seed)
    drop = DropoutConfig(config.dropout, config.attn_dropout, drop_rng)
    trajectory = []
    for epoch in range(1, config.epochs + 1):
        genome = sampler(path_rng)
        try:
            with ad.Tape() as tape:
                logits, _ = forward_network(genome, net.bank, ctx, net.space, drop)
                loss = ad.cross_entropy(logits, graph.labels, graph.train_mask)
                tape.backward(loss)
        except FloatingPointError as exc:
            net.bank.zero_grad()
            raise DivergenceError(f"training diverged at epoch {epoch} on {genome.to_json()}",
                                  genome, epoch) from exc
        ad.adam_step(net.bank, config.lr, config.weight_decay)
        trajectory.append((epoch, genome.genome_id, float(loss.data)))
        if epoch % 100 == 0:
            log.debug("epoch %d loss %.4f", epoch, float(loss.data))
    return trajectory


def train_supernet(net: Supernet, graph: Graph, config: TrainConfig,
                   sampler: Callable[[np.random.Generator], Genome] | None = None) -> list[tuple[int, str, float]]:
    """Uniform single-path training; returns (epoch, genome id, loss) rows."""
    if sampler is None:
        sampler = lambda rng: sample_path(net.space, rng)
    return train_paths(net, graph, config, sampler)


def infer(net: Supernet, genome: Genome, graph: Graph, adjacency_override: np.ndarray | None = None,
          features_override: np.ndarray | None = None) -> np.ndarray:
    """Class probabilities with dropout off; overrides replace A or X of ``graph``."""
    problems = validate_genome(genome, net.space)
    if problems:
        raise ValueError("invalid genome: " + "; ".join(problems))
    if adjacency_override is None and features_override is None:
        ctx = net.context(graph)
    else:
        ctx = GraphContext(graph, adjacency_override, features_override)
    _, probs = forward_network(genome, net.bank, ctx, net.space, None)
    return probs


def accuracy(probs: np.ndarray, labels: np.ndarray, mask: np.ndarray) -> float:
    """Fraction of masked rows whose argmax (ties to the smaller class id) equals the label."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("accuracy over an empty mask")
    pred = np.argmax(np.asarray(probs)[mask], axis=1)
    return float(np.mean(pred == np.asarray(labels)[mask]))
