"""Graph container, dataset files, SBM generator and node splits."""
from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

SPLIT_NAMES = ("train", "val", "test", "none")


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Graph:
    """Undirected, unweighted graph with node features, labels and splits.

    ``edges`` holds each undirected edge once as ``(u, v)`` with ``u < v``,
    sorted lexicographically. Self-loops are never stored.
    """

    n: int
    edges: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    train_mask: np.ndarray
    val_mask: np.ndarray
    test_mask: np.ndarray

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        features = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if features.ndim != 2 or features.shape[0] != self.n:
            raise ValueError(f"features must be ({self.n}, D0), got {features.shape}")
        if labels.shape != (self.n,):
            raise ValueError("labels must have one entry per node")
        if not np.all(np.isfinite(features)):
            raise ValueError("features contain non-finite values")
        if self.n and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValueError(f"label ids must lie in [0, {self.num_classes})")
        if len(edges):
            if np.any(edges[:, 0] >= edges[:, 1]) or edges.min() < 0 or edges.max() >= self.n:
                raise ValueError("edges must be (u, v) pairs with 0 <= u < v < n")
            order = np.lexsort((edges[:, 1], edges[:, 0]))
            edges = edges[order]
            if np.any(np.all(np.diff(edges, axis=0) == 0, axis=1)):
                raise ValueError("duplicate edges")
        masks = [np.asarray(m, dtype=bool) for m in (self.train_mask, self.val_mask, self.test_mask)]
        for m in masks:
            if m.shape != (self.n,):
                raise ValueError("split masks must have one entry per node")
        if np.any(masks[0] & masks[1]) or np.any(masks[0] & masks[2]) or np.any(masks[1] & masks[2]):
            raise ValueError("split masks must be disjoint")
        object.__setattr__(self, "edges", _frozen(edges))
        object.__setattr__(self, "features", _frozen(features))
        object.__setattr__(self, "labels", _frozen(labels))
        for name, m in zip(("train_mask", "val_mask", "test_mask"), masks):
            object.__setattr__(self, name, _frozen(m))

    @classmethod
    def from_edge_pairs(cls, n, pairs, features, labels, num_classes=None, splits=None) -> "Graph":
        """Build from arbitrary (u, v) pairs: symmetrize, dedupe, drop self-loops."""
        edges, _ = canonical_edges(pairs, n)
        labels = np.asarray(labels, dtype=np.int64)
        if num_classes is None:
            num_classes = int(labels.max()) + 1 if labels.size else 0
        if splits is None:
            splits = (np.zeros(n, bool),) * 3
        return cls(n, edges, features, labels, num_classes, *splits)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @cached_property
    def adjacency(self) -> np.ndarray:
        """Dense symmetric 0/1 adjacency (read-only)."""
        a = np.zeros((self.n, self.n))
        if self.num_edges:
            a[self.edges[:, 0], self.edges[:, 1]] = 1.0
            a[self.edges[:, 1], self.edges[:, 0]] = 1.0
        return _frozen(a)

    @cached_property
    def degrees(self) -> np.ndarray:
        d = np.bincount(self.edges.reshape(-1), minlength=self.n)
        return _frozen(d)

    @cached_property
    def digest(self) -> str:
        h = hashlib.blake2b(digest_size=16)
        h.update(np.int64(self.n).tobytes())
        h.update(self.edges.tobytes())
        h.update(self.features.tobytes())
        return h.hexdigest()

    def with_adjacency(self, adjacency: np.ndarray) -> "Graph":
        """Same nodes, features, labels and splits over a new binary adjacency."""
        adjacency = np.asarray(adjacency)
        if adjacency.shape != (self.n, self.n):
            raise ValueError("adjacency shape mismatch")
        if not np.array_equal(adjacency, adjacency.T):
            raise ValueError("adjacency must be symmetric")
        iu, ju = np.nonzero(np.triu(adjacency, 1))
        return Graph(self.n, np.stack([iu, ju], axis=1), self.features, self.labels, self.num_classes,
                     self.train_mask, self.val_mask, self.test_mask)

    def with_features(self, features: np.ndarray) -> "Graph":
        return Graph(self.n, self.edges, features, self.labels, self.num_classes,
                     self.train_mask, self.val_mask, self.test_mask)

    def with_splits(self, train, val, test) -> "Graph":
        return Graph(self.n, self.edges, self.features, self.labels, self.num_classes, train, val, test)


def canonical_edges(pairs, n: int) -> tuple[np.ndarray, int]:
    """Normalize raw (u, v) pairs; returns (edges with u < v, number of self-loops dropped)."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if len(pairs) and (pairs.min() < 0 or pairs.max() >= n):
        raise ValueError(f"edge endpoint outside [0, {n})")
    loops = pairs[:, 0] == pairs[:, 1]
    pairs = np.sort(pairs[~loops], axis=1)
    if len(pairs):
        pairs = np.unique(pairs, axis=0)
    return pairs.reshape(-1, 2), int(loops.sum())


# ---------------------------------------------------------------- files

@dataclass
class DatasetManifest:
    edges: Path
    features: Path
    labels: Path
    splits: Path
    n: int
    d0: int
    c: int

    @classmethod
    def from_json(cls, path) -> "DatasetManifest":
        path = Path(path)
        raw = json.loads(path.read_text())
        missing = {"edges", "features", "labels", "splits", "n", "d0", "c"} - set(raw)
        if missing:
            raise ValueError(f"{path}: manifest missing keys {sorted(missing)}")
        base = path.parent
        return cls(*(base / raw[k] for k in ("edges", "features", "labels", "splits")),
                   int(raw["n"]), int(raw["d0"]), int(raw["c"]))


def load_dataset(manifest) -> Graph:
    """Read the four dataset files named by a manifest (object or JSON path)."""
    if not isinstance(manifest, DatasetManifest):
        manifest = DatasetManifest.from_json(manifest)
    for p in (manifest.edges, manifest.features, manifest.labels, manifest.splits):
        if not Path(p).is_file():
            raise FileNotFoundError(f"dataset file not found: {p}")
    n = manifest.n

    raw_pairs = []
    for lineno, line in enumerate(Path(manifest.edges).read_text(encoding="utf-8").splitlines(), 1):
        tok = line.split()
        if not tok:
            continue
        if len(tok) != 2:
            raise ValueError(f"{manifest.edges}:{lineno}: expected 'u v'")
        raw_pairs.append((int(tok[0]), int(tok[1])))
    if raw_pairs and max(max(p) for p in raw_pairs) >= n:
        raise ValueError(f"{manifest.edges}: node id >= declared n={n}")
    edges, loops = canonical_edges(raw_pairs, n)
    if loops:
        warnings.warn(f"dropped {loops} self-loop(s) from {manifest.edges}", stacklevel=2)

    features = np.loadtxt(manifest.features, delimiter=",", ndmin=2, dtype=np.float64)
    if features.shape != (n, manifest.d0):
        raise ValueError(f"{manifest.features}: expected shape ({n}, {manifest.d0}), got {features.shape}")
    if not np.all(np.isfinite(features)):
        raise ValueError(f"{manifest.features}: non-finite feature value")

    labels = np.array([int(t) for t in Path(manifest.labels).read_text().split()], dtype=np.int64)
    if labels.shape != (n,):
        raise ValueError(f"{manifest.labels}: expected {n} labels, got {labels.size}")
    if labels.size and (labels.min() < 0 or labels.max() >= manifest.c):
        raise ValueError(f"{manifest.labels}: label id outside [0, {manifest.c})")

    tags = Path(manifest.splits).read_text().split()
    if len(tags) != n:
        raise ValueError(f"{manifest.splits}: expected {n} split tags, got {len(tags)}")
    bad = set(tags) - set(SPLIT_NAMES)
    if bad:
        raise ValueError(f"{manifest.splits}: unknown split tag(s) {sorted(bad)}")
    tags = np.array(tags)
    return Graph(n, edges, features, labels, manifest.c, tags == "train", tags == "val", tags == "test")


def save_dataset(graph: Graph, directory, stem: str = "graph") -> Path:
    """Write edges/features/labels/splits plus a manifest; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = {k: f"{stem}.{ext}" for k, ext in
             (("edges", "edges.txt"), ("features", "features.csv"), ("labels", "labels.txt"), ("splits", "splits.txt"))}
    (directory / names["edges"]).write_text("".join(f"{u} {v}\n" for u, v in graph.edges), encoding="utf-8")
    np.savetxt(directory / names["features"], graph.features, delimiter=",", fmt="%.17g")
    (directory / names["labels"]).write_text("".join(f"{y}\n" for y in graph.labels))
    tags = np.full(graph.n, "none", dtype=object)
    tags[graph.train_mask] = "train"
    tags[graph.val_mask] = "val"
    tags[graph.test_mask] = "test"
    (directory / names["splits"]).write_text("".join(f"{t}\n" for t in tags))
    manifest = dict(names, n=graph.n, d0=graph.feature_dim, c=graph.num_classes)
    path = directory / f"{stem}.manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------- generators

@dataclass(frozen=True)
class SbmParams:
    blocks: int = 4
    nodes_per_block: int = 100
    p_in: float = 0.25
    p_out: float = 0.01
    feature_dim: int = 32
    feature_noise: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.p_out <= self.p_in <= 1.0:
            raise ValueError("need 0 <= p_out <= p_in <= 1")
        if self.feature_noise < 0:
            raise ValueError("feature_noise must be >= 0")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be >= 1")


def generate_sbm(params: SbmParams) -> Graph:
    """Planted-partition graph; features are a per-block centroid in [0,1]^D0 plus Gaussian noise.

    The returned graph has empty split masks; see :func:`split_nodes`.
    """
    n = params.blocks * params.nodes_per_block
    if n == 0:
        raise ValueError("SBM with zero nodes")
    rng = np.random.default_rng(params.seed)
    labels = np.repeat(np.arange(params.blocks), params.nodes_per_block)
    iu, ju = np.triu_indices(n, 1)
    prob = np.where(labels[iu] == labels[ju], params.p_in, params.p_out)
    keep = rng.random(iu.size) < prob
    edges = np.stack([iu[keep], ju[keep]], axis=1)
    centroids = rng.random((params.blocks, params.feature_dim))
    features = centroids[labels] + rng.normal(0.0, params.feature_noise, (n, params.feature_dim))
    empty = np.zeros(n, dtype=bool)
    return Graph(n, edges, features, labels, params.blocks, empty, empty, empty)


def split_nodes(graph: Graph, fractions=(0.1, 0.1, 0.8), seed: int = 0) -> Graph:
    """Random train/val/test split of sizes floor(n * fraction).

    When the fractions sum to one the rounding remainder goes to test.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or min(fractions) < 0 or sum(fractions) > 1 + 1e-9:
        raise ValueError("fractions must be three nonnegative numbers summing to <= 1")
    n = graph.n
    n_train = math.floor(n * fractions[0] + 1e-9)
    n_val = math.floor(n * fractions[1] + 1e-9)
    if math.isclose(sum(fractions), 1.0):
        n_test = n - n_train - n_val
    else:
        n_test = math.floor(n * fractions[2] + 1e-9)
    classes = np.unique(graph.labels).size
    if fractions[0] > 0 and n_train < classes:
        raise ValueError(f"{n_train} training nodes cannot cover {classes} classes")
    perm = np.random.default_rng(seed).permutation(n)
    masks = []
    for lo, hi in ((0, n_train), (n_train, n_train + n_val), (n_train + n_val, n_train + n_val + n_test)):
        m = np.zeros(n, dtype=bool)
        m[perm[lo:hi]] = True
        masks.append(m)
    return graph.with_splits(*masks)
