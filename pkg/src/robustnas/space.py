"""Architecture genomes over the defensive message-passing search space."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .masks import FIRST_LAYER_ONLY, MASK_OPS, MaskOpParams

COEFF_OPS = ("Identity", "GCN", "GAT", "GAT-Sym", "Cos", "Linear", "Gene-Linear")
AGGR_OPS = ("Sum", "Mean", "Max")
COMB_OPS = ("Identity", "GIN", "SAGE")
SKIP_OPS = ("Identity", "Zero")
LAYER_AGGR_OPS = ("Concat", "Max", "LSTM")

GENE_FIELDS = ("mask", "coeff", "aggr", "comb", "skip")


@dataclass(frozen=True)
class SearchSpaceConfig:
    num_layers: int = 3
    masks: tuple[str, ...] = MASK_OPS
    coeffs: tuple[str, ...] = COEFF_OPS
    aggrs: tuple[str, ...] = AGGR_OPS
    combs: tuple[str, ...] = COMB_OPS
    skips: tuple[str, ...] = SKIP_OPS
    layer_aggrs: tuple[str, ...] = LAYER_AGGR_OPS
    hidden_dim: int = 32
    att_dim: int = 8
    mask_params: MaskOpParams = field(default_factory=MaskOpParams)
    first_layer_only: tuple[str, ...] = FIRST_LAYER_ONLY

    def __post_init__(self):
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        universe = {"masks": MASK_OPS, "coeffs": COEFF_OPS, "aggrs": AGGR_OPS, "combs": COMB_OPS,
                    "skips": SKIP_OPS, "layer_aggrs": LAYER_AGGR_OPS}
        for name, allowed in universe.items():
            vocab = tuple(getattr(self, name))
            object.__setattr__(self, name, vocab)
            if not vocab:
                raise ValueError(f"{name} vocabulary is empty")
            unknown = set(vocab) - set(allowed)
            if unknown:
                raise ValueError(f"unknown {name} op(s): {sorted(unknown)}")
        if "Identity" not in self.skips:
            raise ValueError("skip vocabulary must contain Identity")
        if self.num_layers > 1 and not [m for m in self.masks if m not in self.first_layer_only]:
            raise ValueError("no mask op is legal beyond the first layer")
        if self.hidden_dim < 2 or self.att_dim < 1:
            raise ValueError("hidden_dim must be >= 2 and att_dim >= 1")

    def vocabulary(self, gene: str, layer: int) -> tuple[str, ...]:
        """Legal values of ``gene`` at 1-based ``layer``."""
        if gene == "mask":
            if layer == 1:
                return self.masks
            return tuple(m for m in self.masks if m not in self.first_layer_only)
        return {"coeff": self.coeffs, "aggr": self.aggrs, "comb": self.combs, "skip": self.skips}[gene]

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["mask_params"] = {f.name: getattr(self.mask_params, f.name) for f in fields(self.mask_params)}
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SearchSpaceConfig":
        d = dict(d)
        mp = d.pop("mask_params", None)
        if mp is not None:
            mp = dict(mp)
            if "theta" in mp:
                mp["theta"] = tuple(mp["theta"])
            d["mask_params"] = MaskOpParams(**mp)
        for k, v in list(d.items()):
            if isinstance(v, list):
                d[k] = tuple(v)
        return cls(**d)

    def size(self) -> int:
        """Number of valid genomes."""
        total = 1
        for layer in range(1, self.num_layers + 1):
            for gene in ("mask", "coeff", "aggr", "comb"):
                total *= len(self.vocabulary(gene, layer))
        skip_combos = len(self.skips) ** self.num_layers
        if "Zero" in self.skips:
            skip_combos -= 1
        return total * skip_combos * len(self.layer_aggrs)


@dataclass(frozen=True)
class LayerGene:
    mask: str
    coeff: str
    aggr: str
    comb: str
    skip: str

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in GENE_FIELDS}


@dataclass(frozen=True)
class Genome:
    layers: tuple[LayerGene, ...]
    layer_aggr: str

    def to_dict(self) -> dict:
        return {"layers": [g.to_dict() for g in self.layers], "layer_aggr": self.layer_aggr}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "Genome":
        layers = tuple(LayerGene(**{k: g[k] for k in GENE_FIELDS}) for g in d["layers"])
        return cls(layers, d["layer_aggr"])

    @classmethod
    def from_json(cls, s: str) -> "Genome":
        return cls.from_dict(json.loads(s))

    @property
    def genome_id(self) -> str:
        return hashlib.sha1(self.to_json().encode()).hexdigest()[:12]

    def __str__(self) -> str:
        body = " | ".join(f"{g.mask},{g.coeff},{g.aggr},{g.comb},{g.skip}" for g in self.layers)
        return f"[{body}] -> {self.layer_aggr}"


def effective_depth(genome: Genome) -> int:
    """Index (1-based) of the deepest layer whose output reaches the layer aggregator."""
    depth = 0
    for i, g in enumerate(genome.layers, 1):
        if g.skip == "Identity":
            depth = i
    return depth


def validate_genome(genome: Genome, space: SearchSpaceConfig) -> list[str]:
    problems = []
    if len(genome.layers) != space.num_layers:
        problems.append(f"expected {space.num_layers} layers, got {len(genome.layers)}")
    for i, g in enumerate(genome.layers, 1):
        for gene in GENE_FIELDS:
            value = getattr(g, gene)
            if gene == "mask" and i > 1 and value in space.first_layer_only:
                problems.append(f"first-layer-only op {value} at layer {i}")
            elif value not in space.vocabulary(gene, 1 if gene == "mask" else i):
                problems.append(f"unknown {gene} op {value!r} at layer {i}")
    if genome.layer_aggr not in space.layer_aggrs:
        problems.append(f"unknown layer aggregator {genome.layer_aggr!r}")
    if genome.layers and all(g.skip != "Identity" for g in genome.layers):
        problems.append("no contributing layer: every skip is Zero")
    return problems


def _choice(rng: np.random.Generator, values):
    return values[int(rng.integers(len(values)))]


def _repair(layers: list[dict]) -> None:
    if all(g["skip"] != "Identity" for g in layers):
        layers[0]["skip"] = "Identity"


def random_genome(space: SearchSpaceConfig, rng: np.random.Generator) -> Genome:
    """Uniform draw over valid genomes.

    Each gene is uniform over its layer-legal vocabulary; skip patterns with no
    contributing layer are redrawn, so the result is uniform over valid genomes.
    """
    layers = []
    for i in range(1, space.num_layers + 1):
        layers.append({gene: _choice(rng, space.vocabulary(gene, i)) for gene in ("mask", "coeff", "aggr", "comb")})
    while True:
        skips = [_choice(rng, space.skips) for _ in layers]
        if "Identity" in skips:
            break
    for g, s in zip(layers, skips):
        g["skip"] = s
    layer_aggr = _choice(rng, space.layer_aggrs)
    return Genome(tuple(LayerGene(**g) for g in layers), layer_aggr)


def mutate(genome: Genome, p: float, space: SearchSpaceConfig, rng: np.random.Generator) -> Genome:
    """Replace each gene w.p. ``p`` by a different legal value, then repair validity."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("mutation probability must lie in [0, 1]")
    layers = [g.to_dict() for g in genome.layers]
    for i, g in enumerate(layers, 1):
        for gene in GENE_FIELDS:
            if rng.random() < p:
                others = [v for v in space.vocabulary(gene, i) if v != g[gene]]
                if others:
                    g[gene] = _choice(rng, others)
    layer_aggr = genome.layer_aggr
    if rng.random() < p:
        others = [v for v in space.layer_aggrs if v != layer_aggr]
        if others:
            layer_aggr = _choice(rng, others)
    _repair(layers)
    return Genome(tuple(LayerGene(**g) for g in layers), layer_aggr)


def crossover(g1: Genome, g2: Genome, rng: np.random.Generator) -> Genome:
    """Uniform crossover: every gene (and the layer aggregator) from either parent w.p. 1/2."""
    if len(g1.layers) != len(g2.layers):
        raise ValueError("parents come from spaces with different depths")
    layers = []
    for a, b in zip(g1.layers, g2.layers):
        layers.append({gene: getattr(a if rng.random() < 0.5 else b, gene) for gene in GENE_FIELDS})
    layer_aggr = g1.layer_aggr if rng.random() < 0.5 else g2.layer_aggr
    _repair(layers)
    return Genome(tuple(LayerGene(**g) for g in layers), layer_aggr)


def enumerate_genomes(space: SearchSpaceConfig):
    """Yield every valid genome (only sensible for small spaces)."""
    import itertools

    per_layer = []
    for i in range(1, space.num_layers + 1):
        per_layer.append(list(itertools.product(*(space.vocabulary(g, i) for g in ("mask", "coeff", "aggr", "comb")))))
    for combo in itertools.product(*per_layer):
        for skips in itertools.product(space.skips, repeat=space.num_layers):
            if "Identity" not in skips:
                continue
            for la in space.layer_aggrs:
                yield Genome(tuple(LayerGene(*c, s) for c, s in zip(combo, skips)), la)


# Layer genes of classic and robust GNNs: (mask, coeff, aggr, comb).
NAMED_LAYERS = {
    "GCN": ("Identity", "GCN", "Sum", "Identity"),
    "JK-Net": ("Identity", "GCN", "Sum", "Identity"),
    "GAT": ("Identity", "GAT", "Sum", "Identity"),
    "GIN": ("Identity", "Identity", "Sum", "GIN"),
    "GraphSAGE": ("Identity", "Identity", "Mean", "SAGE"),
    "GNN-Guard": ("NIE", "GCN", "Sum", "Identity"),
    "VPN": ("VPO", "GCN", "Sum", "Identity"),
    "GCN-SVD": ("LRA", "GCN", "Sum", "Identity"),
    "GCN-Jaccard": ("NFS", "GCN", "Sum", "Identity"),
}


def recover_named_arch(name: str, num_layers: int = 2, depth: int | None = None,
                       layer_aggr: str = "Concat") -> Genome:
    """Genome reproducing a known GNN with ``depth`` message-passing layers.

    Non-JK models feed only their last layer to the output, so only that layer
    keeps an Identity skip; JK-Net keeps every layer. Layers past ``depth`` are
    padded with Zero skips. First-layer-only masks fall back to Identity after
    layer 1.
    """
    if name not in NAMED_LAYERS:
        raise KeyError(f"unknown architecture {name!r}; known: {sorted(NAMED_LAYERS)}")
    depth = num_layers if depth is None else depth
    if not 1 <= depth <= num_layers:
        raise ValueError("depth must lie in [1, num_layers]")
    mask, coeff, aggr, comb = NAMED_LAYERS[name]
    layers = []
    for i in range(1, num_layers + 1):
        m = mask if (i == 1 or mask not in FIRST_LAYER_ONLY) else "Identity"
        if name == "JK-Net":
            skip = "Identity" if i <= depth else "Zero"
        else:
            skip = "Identity" if i == depth else "Zero"
        layers.append(LayerGene(m, coeff, aggr, comb, skip))
    return Genome(tuple(layers), layer_aggr)


def restrict_space(space: SearchSpaceConfig, genome: Genome) -> SearchSpaceConfig:
    """Smallest space (same depth and dims) whose vocabularies cover ``genome``."""
    pick = lambda gene: tuple(sorted({getattr(g, gene) for g in genome.layers}))
    return replace(space, masks=pick("mask"), coeffs=pick("coeff"), aggrs=pick("aggr"),
                   combs=pick("comb"), skips=tuple(sorted(set(pick("skip")) | {"Identity"})),
                   layer_aggrs=(genome.layer_aggr,))
