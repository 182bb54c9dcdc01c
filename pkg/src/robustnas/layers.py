"""Message-passing layer and network forward over a genome.

A layer computes its structure mask from the previous layer, reweights the
original adjacency with it, scores edges with a correlation coefficient,
aggregates ``m_ij * e_ij * h_j`` over the self-loop-augmented neighborhood,
combines with ``h_i`` and applies a linear map and ELU. Skip-connected layer
outputs are merged by the layer aggregator and classified by one linear head.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import Graph
from .masks import MaskState, apply_mask, compute_mask
from .space import Genome, LayerGene, SearchSpaceConfig, effective_depth

ATTENTION_OPS = ("GAT", "GAT-Sym", "Cos", "Linear", "Gene-Linear")


@dataclass(frozen=True)
class Dims:
    d0: int
    hidden: int
    classes: int


# ---------------------------------------------------------------- parameters

def coeff_shapes(layer: int, op: str, d_in: int, att: int) -> dict:
    p = f"layer{layer}.coeff.{op}."
    if op in ("GAT", "GAT-Sym"):
        return {p + "a_l": (d_in, 1), p + "a_r": (d_in, 1)}
    if op == "Cos":
        return {p + "w_l": (d_in, att), p + "w_r": (d_in, att)}
    if op == "Linear":
        return {p + "w_l": (d_in, att)}
    if op == "Gene-Linear":
        return {p + "w_l": (d_in, att), p + "w_r": (d_in, att), p + "w_a": (att, 1)}
    return {}


def comb_shapes(layer: int, op: str, d_in: int, hidden: int) -> dict:
    p = f"layer{layer}.comb.{op}."
    if op == "GIN":
        out = {p + "eps": (1, 1), p + "mlp_w": (d_in, hidden), p + "mlp_b": (1, hidden)}
    elif op == "SAGE":
        out = {p + "w_self": (d_in, hidden), p + "w_neigh": (d_in, hidden), p + "b": (1, hidden)}
    else:
        out = {}
    width = d_in if op == "Identity" else hidden
    out[f"layer{layer}.linear.{op}.w"] = (width, hidden)
    out[f"layer{layer}.linear.{op}.b"] = (1, hidden)
    return out


def head_shapes(layer_aggr: str, space: SearchSpaceConfig, dims: Dims) -> dict:
    out = {}
    hidden = dims.hidden
    if layer_aggr == "LSTM":
        h2 = hidden // 2
        for d in ("fwd", "bwd"):
            p = f"layer_aggr.LSTM.{d}."
            out.update({p + "w_ih": (hidden, 4 * h2), p + "w_hh": (h2, 4 * h2), p + "b": (1, 4 * h2)})
        out["layer_aggr.LSTM.att"] = (2 * h2, 1)
    width = space.num_layers * hidden if layer_aggr == "Concat" else hidden
    out[f"classifier.{layer_aggr}.w"] = (width, dims.classes)
    out[f"classifier.{layer_aggr}.b"] = (1, dims.classes)
    return out


def _d_in(layer: int, dims: Dims) -> int:
    return dims.d0 if layer == 1 else dims.hidden


def space_param_shapes(space: SearchSpaceConfig, dims: Dims) -> "OrderedDict[str, tuple]":
    """Every parameter any genome of ``space`` can address."""
    shapes = OrderedDict()
    for layer in range(1, space.num_layers + 1):
        d_in = _d_in(layer, dims)
        for op in space.coeffs:
            shapes.update(coeff_shapes(layer, op, d_in, space.att_dim))
        for op in space.combs:
            shapes.update(comb_shapes(layer, op, d_in, dims.hidden))
    for la in space.layer_aggrs:
        shapes.update(head_shapes(la, space, dims))
    return shapes


def genome_param_shapes(genome: Genome, space: SearchSpaceConfig, dims: Dims) -> "OrderedDict[str, tuple]":
    """Parameters touched by a forward pass of ``genome``."""
    shapes = OrderedDict()
    for layer, gene in enumerate(genome.layers[:effective_depth(genome)], 1):
        d_in = _d_in(layer, dims)
        shapes.update(coeff_shapes(layer, gene.coeff, d_in, space.att_dim))
        shapes.update(comb_shapes(layer, gene.comb, d_in, dims.hidden))
    shapes.update(head_shapes(genome.layer_aggr, space, dims))
    return shapes


def init_param(name: str, shape: tuple, seed: int) -> np.ndarray:
    leaf = name.rsplit(".", 1)[-1]
    if leaf in ("b", "mlp_b", "eps"):
        return np.zeros(shape)
    return ad.glorot(ad.entry_rng(seed, name), shape)


def build_bank(shapes: dict, seed: int) -> ad.ParamBank:
    bank = ad.ParamBank()
    for name, shape in shapes.items():
        bank.add(name, init_param(name, shape, seed))
    return bank


# ---------------------------------------------------------------- structure

@dataclass
class EdgeSet:
    """Self-loop-augmented edges of a masked structure, sorted by (dst, src)."""

    n: int
    dst: np.ndarray
    src: np.ndarray
    weight: np.ndarray  # mask value m_ij, 1 on self-loops
    count: np.ndarray  # |N~(i)| as an (n, 1) column
    deg: np.ndarray  # self-loop-augmented weighted degree

    @classmethod
    def from_masked(cls, a_l: np.ndarray) -> "EdgeSet":
        n = a_l.shape[0]
        support = a_l > 0
        np.fill_diagonal(support, True)
        dst, src = np.nonzero(support)
        weight = np.where(dst == src, 1.0, a_l[dst, src])
        count = np.bincount(dst, minlength=n).astype(np.float64)[:, None]
        deg = 1.0 + a_l.sum(axis=1) - np.diag(a_l)
        return cls(n, dst, src, weight[:, None], count, deg)


class GraphContext:
    """Per-graph forward state; caches structures of mask chains that do not use NIE."""

    def __init__(self, graph: Graph, adjacency: np.ndarray | None = None, features: np.ndarray | None = None):
        self.graph = graph
        self.adjacency = np.asarray(graph.adjacency if adjacency is None else adjacency, dtype=np.float64)
        self.features = np.asarray(graph.features if features is None else features, dtype=np.float64)
        self.n = graph.n
        self._structures: dict = {}

    def structure(self, key, build):
        if key is None:
            return build()
        hit = self._structures.get(key)
        if hit is None:
            hit = self._structures[key] = build()
        return hit


@dataclass
class LayerState:
    hidden: Tensor
    masked_adjacency: np.ndarray
    mask_state: MaskState
    chain: tuple | None = ()  # mask ops so far; None once NIE made the structure data dependent


def initial_state(ctx: GraphContext) -> LayerState:
    return LayerState(Tensor(ctx.features), ctx.adjacency, MaskState(ctx.adjacency), ())


# ---------------------------------------------------------------- coefficients

def compute_coefficients(op: str, h: Tensor, edges: EdgeSet, bank, layer: int) -> Tensor | None:
    """Edge coefficients e_ij as an (E, 1) tensor; None means all ones.

    Attention-family scores are softmax-normalized over each neighborhood.
    """
    dst, src, n = edges.dst, edges.src, edges.n
    p = f"layer{layer}.coeff.{op}."
    if op == "Identity":
        return None
    if op == "GCN":
        d = edges.deg
        return Tensor((1.0 / np.sqrt(d[dst] * d[src]))[:, None])
    if op in ("GAT", "GAT-Sym"):
        sl = ad.matmul(h, bank[p + "a_l"])
        sr = ad.matmul(h, bank[p + "a_r"])
        logits = ad.leaky_relu(ad.add(ad.gather_rows(sl, dst), ad.gather_rows(sr, src)))
        if op == "GAT-Sym":
            back = ad.leaky_relu(ad.add(ad.gather_rows(sl, src), ad.gather_rows(sr, dst)))
            logits = ad.add(logits, back)
    elif op == "Cos":
        hl = ad.matmul(h, bank[p + "w_l"])
        hr = ad.matmul(h, bank[p + "w_r"])
        logits = ad.row_sum(ad.hadamard(ad.gather_rows(hl, dst), ad.gather_rows(hr, src)))
    elif op == "Linear":
        node = ad.tanh(ad.row_sum(ad.matmul(h, bank[p + "w_l"])))
        logits = ad.gather_rows(node, dst)
    elif op == "Gene-Linear":
        hl = ad.matmul(h, bank[p + "w_l"])
        hr = ad.matmul(h, bank[p + "w_r"])
        mixed = ad.tanh(ad.add(ad.gather_rows(hl, dst), ad.gather_rows(hr, src)))
        logits = ad.matmul(mixed, bank[p + "w_a"])
    else:
        raise ValueError(f"unknown coefficient op {op!r}")
    return ad.segment_softmax(logits, dst, n)


def aggregate(op: str, h: Tensor, weights, edges: EdgeSet) -> Tensor:
    """Aggregate messages weights[e] * h[src[e]] into each dst over the neighborhood."""
    if op in ("Sum", "Mean"):
        out = ad.weighted_neighbor_sum(weights, h, edges.src, edges.dst)
        if op == "Mean":
            out = ad.hadamard(out, 1.0 / edges.count)
        return out
    if op == "Max":
        msgs = ad.hadamard(ad.gather_rows(h, edges.src), weights)
        return ad.segment_max(msgs, edges.dst, edges.n)
    raise ValueError(f"unknown aggregator {op!r}")


def combine(op: str, h: Tensor, agg: Tensor, bank, layer: int) -> Tensor:
    p = f"layer{layer}.comb.{op}."
    if op == "Identity":
        return agg
    if op == "GIN":
        mixed = ad.add(ad.hadamard(h, ad.add(bank[p + "eps"], 1.0)), agg)
        return ad.elu(ad.add(ad.matmul(mixed, bank[p + "mlp_w"]), bank[p + "mlp_b"]))
    if op == "SAGE":
        return ad.add(ad.add(ad.matmul(h, bank[p + "w_self"]), ad.matmul(agg, bank[p + "w_neigh"])), bank[p + "b"])
    raise ValueError(f"unknown combine op {op!r}")


# ---------------------------------------------------------------- forward

@dataclass
class DropoutConfig:
    linear: float = 0.5
    attention: float = 0.6
    rng: np.random.Generator | None = None


def layer_structure(gene: LayerGene, state: LayerState, ctx: GraphContext, space: SearchSpaceConfig):
    chain = None if state.chain is None or gene.mask == "NIE" else state.chain + (gene.mask,)

    def build():
        m = compute_mask(gene.mask, state.masked_adjacency, adjacency=ctx.adjacency, features=ctx.features,
                         mask_prev=state.mask_state.matrix, hidden_prev=state.hidden.data,
                         params=space.mask_params)
        a_l = apply_mask(ctx.adjacency, m)
        return MaskState(m, state.mask_state.matrix), a_l, EdgeSet.from_masked(a_l)

    return chain, ctx.structure(chain, build)


def forward_layer(gene: LayerGene, layer: int, state: LayerState, bank, ctx: GraphContext,
                  space: SearchSpaceConfig, drop: DropoutConfig | None = None) -> LayerState:
    chain, (mask_state, a_l, edges) = layer_structure(gene, state, ctx, space)
    rng = drop.rng if drop else None
    h = ad.dropout(state.hidden, drop.linear, rng) if drop else state.hidden
    coef = compute_coefficients(gene.coeff, h, edges, bank, layer)
    if coef is None:
        weights = Tensor(edges.weight)
    else:
        if gene.coeff in ATTENTION_OPS and drop:
            coef = ad.dropout(coef, drop.attention, rng)
        weights = ad.hadamard(coef, edges.weight)
    agg = aggregate(gene.aggr, h, weights, edges)
    c = combine(gene.comb, h, agg, bank, layer)
    p = f"layer{layer}.linear.{gene.comb}."
    out = ad.elu(ad.add(ad.matmul(c, bank[p + "w"]), bank[p + "b"]))
    return LayerState(out, a_l, mask_state, chain)


def _lstm_pass(seq: list[Tensor], bank, prefix: str, h2: int) -> list[Tensor]:
    n = seq[0].shape[0]
    h = Tensor(np.zeros((n, h2)))
    c = Tensor(np.zeros((n, h2)))
    w_ih, w_hh, b = bank[prefix + "w_ih"], bank[prefix + "w_hh"], bank[prefix + "b"]
    outs = []
    for x in seq:
        gates = ad.add(ad.add(ad.matmul(x, w_ih), ad.matmul(h, w_hh)), b)
        i = ad.sigmoid(ad.slice_cols(gates, 0, h2))
        f = ad.sigmoid(ad.slice_cols(gates, h2, 2 * h2))
        g = ad.tanh(ad.slice_cols(gates, 2 * h2, 3 * h2))
        o = ad.sigmoid(ad.slice_cols(gates, 3 * h2, 4 * h2))
        c = ad.add(ad.hadamard(f, c), ad.hadamard(i, g))
        h = ad.hadamard(o, ad.tanh(c))
        outs.append(h)
    return outs


def lstm_attention(seq: list[Tensor], bank, hidden: int) -> Tensor:
    """Bidirectional LSTM over the layer sequence of every node, then attention-weighted sum."""
    h2 = hidden // 2
    fwd = _lstm_pass(seq, bank, "layer_aggr.LSTM.fwd.", h2)
    bwd = _lstm_pass(seq[::-1], bank, "layer_aggr.LSTM.bwd.", h2)[::-1]
    att = bank["layer_aggr.LSTM.att"]
    scores = [ad.matmul(ad.concat_cols([f, b]), att) for f, b in zip(fwd, bwd)]
    alpha = ad.row_softmax(ad.concat_cols(scores))
    out = None
    for k, x in enumerate(seq):
        term = ad.hadamard(ad.slice_cols(alpha, k, k + 1), x)
        out = term if out is None else ad.add(out, term)
    return out


def aggregate_layers(layer_aggr: str, outputs: list[Tensor | None], bank, hidden: int) -> Tensor:
    kept = [o for o in outputs if o is not None]
    if layer_aggr == "Concat":
        n = kept[0].shape[0]
        return ad.concat_cols([o if o is not None else Tensor(np.zeros((n, hidden))) for o in outputs])
    if layer_aggr == "Max":
        out = kept[0]
        for o in kept[1:]:
            out = ad.maximum(out, o)
        return out
    if layer_aggr == "LSTM":
        return lstm_attention(kept, bank, hidden)
    raise ValueError(f"unknown layer aggregator {layer_aggr!r}")


def forward_network(genome: Genome, bank, ctx: GraphContext, space: SearchSpaceConfig,
                    drop: DropoutConfig | None = None) -> tuple[Tensor, np.ndarray]:
    """Logits (n, C) and row-softmax probabilities for ``genome`` on ``ctx``."""
    depth = effective_depth(genome)
    if depth == 0:
        raise ValueError("genome has no contributing layer")
    state = initial_state(ctx)
    outputs: list[Tensor | None] = [None] * space.num_layers
    for layer in range(1, depth + 1):
        gene = genome.layers[layer - 1]
        state = forward_layer(gene, layer, state, bank, ctx, space, drop)
        if gene.skip == "Identity":
            outputs[layer - 1] = state.hidden
    hidden = bank[f"layer1.linear.{genome.layers[0].comb}.w"].shape[1]
    x = aggregate_layers(genome.layer_aggr, outputs, bank, hidden)
    if drop:
        x = ad.dropout(x, drop.linear, drop.rng)
    p = f"classifier.{genome.layer_aggr}."
    logits = ad.add(ad.matmul(x, bank[p + "w"]), bank[p + "b"])
    probs = ad.row_softmax(Tensor(logits.data)).data
    return logits, probs
