"""Defensive graph-structure masks.

Every operation maps the previous layer's structure to a mask ``M`` with
entries in [0, 1] that is zero off the edge support; the layer then uses
``A * M`` (elementwise, against the original adjacency).
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
import hashlib
import threading

import numpy as np

MASK_OPS = ("Identity", "LRA", "NFS", "NIE", "VPO")
FIRST_LAYER_ONLY = ("LRA", "NFS")


class DegenerateMaskError(ValueError):
    pass


@dataclass(frozen=True)
class MaskOpParams:
    rank: int = 20
    tau: float = 0.01
    beta: float = 0.9
    p0: float = 0.1
    theta: tuple[float, ...] = (0.9, 0.1)

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("LRA rank must be >= 1")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("NFS threshold must lie in [0, 1]")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("NIE beta must lie in [0, 1]")
        if not 0.0 <= self.p0 < 1.0:
            raise ValueError("NIE p0 must lie in [0, 1)")
        if len(self.theta) < 1:
            raise ValueError("VPO needs at least one power coefficient")

    @property
    def power(self) -> int:
        return len(self.theta)


@dataclass
class MaskState:
    """Mask of one layer; ``previous`` is the mask it was derived from (NIE memory)."""

    matrix: np.ndarray
    previous: np.ndarray | None = field(default=None, repr=False)


def check_mask(m: np.ndarray, support: np.ndarray) -> None:
    if np.any(m < 0) or np.any(m > 1):
        raise AssertionError("mask entries outside [0, 1]")
    if np.any(m[support <= 0] != 0):
        raise AssertionError("mask nonzero off the edge support")


def _project(m: np.ndarray, support: np.ndarray, symmetric: bool) -> np.ndarray:
    if symmetric:
        m = 0.5 * (m + m.T)
    m = np.clip(m, 0.0, 1.0)
    m = np.where(support > 0, m, 0.0)
    np.fill_diagonal(m, 0.0)
    return m


def _is_symmetric(a: np.ndarray) -> bool:
    return a.shape[0] == a.shape[1] and np.array_equal(a, a.T)


def mask_identity(a_prev: np.ndarray) -> np.ndarray:
    return np.array(a_prev, dtype=np.float64)


class _DigestCache:
    """Small LRU keyed on array content; SVDs and matrix powers are reused across genomes."""

    def __init__(self, size: int = 64):
        self.size = size
        self._data: OrderedDict = OrderedDict()
        self._lock = threading.Lock()

    @staticmethod
    def key(*parts) -> str:
        h = hashlib.blake2b(digest_size=16)
        for p in parts:
            if isinstance(p, np.ndarray):
                h.update(str(p.shape).encode())
                h.update(np.ascontiguousarray(p).tobytes())
            else:
                h.update(repr(p).encode())
        return h.hexdigest()

    def get(self, key):
        with self._lock:
            if key in self._data:
                self._data.move_to_end(key)
                return self._data[key]
        return None

    def put(self, key, value):
        with self._lock:
            self._data[key] = value
            self._data.move_to_end(key)
            while len(self._data) > self.size:
                self._data.popitem(last=False)


_cache = _DigestCache()


def low_rank_reconstruction(a: np.ndarray, rank: int) -> np.ndarray:
    """U_r S_r V_r^T from a full SVD (no clamping)."""
    try:
        u, s, vt = np.linalg.svd(a)
    except np.linalg.LinAlgError as exc:
        raise RuntimeError("SVD did not converge") from exc
    r = min(rank, len(s))
    return (u[:, :r] * s[:r]) @ vt[:r]


def mask_lra(a_prev: np.ndarray, rank: int) -> np.ndarray:
    key = _cache.key("lra", rank, a_prev)
    hit = _cache.get(key)
    if hit is not None:
        return hit.copy()
    m = _project(low_rank_reconstruction(a_prev, rank), a_prev, _is_symmetric(a_prev))
    _cache.put(key, m)
    return m.copy()


def jaccard_matrix(features: np.ndarray) -> np.ndarray:
    """Pairwise Jaccard similarity of the supports ``x > 0``; 1 when both supports are empty."""
    b = (np.asarray(features) > 0).astype(np.float64)
    inter = b @ b.T
    size = b.sum(axis=1)
    union = size[:, None] + size[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        j = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 1.0)
    return j


def mask_nfs(a_prev: np.ndarray, features: np.ndarray, tau: float) -> np.ndarray:
    key = _cache.key("jaccard", features)
    j = _cache.get(key)
    if j is None:
        j = jaccard_matrix(features)
        _cache.put(key, j)
    a_prev = np.asarray(a_prev, dtype=np.float64)
    m = np.where((a_prev > 0) & (j < tau), 0.0, a_prev)
    np.fill_diagonal(m, 0.0)
    return m


def neighbor_importance(hidden: np.ndarray, adjacency: np.ndarray, p0: float) -> np.ndarray:
    """Cosine similarity on edges, floored at p0, row-normalized, then symmetrized."""
    h = np.asarray(hidden, dtype=np.float64)
    norms = np.linalg.norm(h, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    unit = h / safe[:, None]
    cos = unit @ unit.T
    cos[norms == 0, :] = 0.0
    cos[:, norms == 0] = 0.0
    edge = (adjacency > 0)
    np.fill_diagonal(edge, False)
    s = np.where(edge, np.maximum(cos, 0.0), 0.0)
    s[s < p0] = 0.0
    alpha = s / (s.sum(axis=1, keepdims=True) + 1e-12)
    return 0.5 * (alpha + alpha.T)


def mask_nie(mask_prev: np.ndarray, hidden_prev: np.ndarray, adjacency: np.ndarray,
             beta: float, p0: float) -> np.ndarray:
    """beta * previous mask + (1 - beta) * importance weights, on the edges of ``adjacency``."""
    mask_prev = np.asarray(mask_prev, dtype=np.float64)
    if beta == 1.0:
        return mask_prev.copy()
    alpha = neighbor_importance(hidden_prev, adjacency, p0)
    m = beta * mask_prev + (1.0 - beta) * alpha
    return _project(m, adjacency, symmetric=False)


def mask_vpo(a_prev: np.ndarray, theta, adjacency: np.ndarray | None = None) -> np.ndarray:
    """Weighted sum of adjacency powers, max-normalized over the edge support."""
    theta = tuple(float(t) for t in theta)
    if not theta:
        raise ValueError("VPO needs at least one coefficient")
    if all(t == 0 for t in theta):
        raise DegenerateMaskError("all VPO coefficients are zero")
    a_prev = np.asarray(a_prev, dtype=np.float64)
    support = a_prev if adjacency is None else adjacency
    key = _cache.key("vpo", theta, a_prev, support)
    hit = _cache.get(key)
    if hit is not None:
        return hit.copy()
    raw = np.zeros_like(a_prev)
    power = np.eye(a_prev.shape[0])
    for t in theta:
        power = power @ a_prev
        if t:
            raw += t * power
    on = support > 0
    np.fill_diagonal(on, False)
    if np.any(a_prev[on] > 0):
        peak = raw[on].max()
        if peak <= 0:
            raise DegenerateMaskError("VPO mask is zero on every edge")
        m = _project(raw / max(peak, 1e-12), support, _is_symmetric(a_prev))
    else:
        m = np.zeros_like(a_prev)
    _cache.put(key, m)
    return m.copy()


def apply_mask(adjacency: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Masked structure ``A * M`` against the original adjacency."""
    adjacency = np.asarray(adjacency)
    mask = np.asarray(mask)
    if adjacency.shape != mask.shape:
        raise ValueError("mask and adjacency shapes differ")
    out = adjacency * mask
    np.fill_diagonal(out, 0.0)
    return out


def compute_mask(op: str, a_prev: np.ndarray, *, adjacency: np.ndarray, features: np.ndarray,
                 mask_prev: np.ndarray, hidden_prev: np.ndarray | None,
                 params: MaskOpParams) -> np.ndarray:
    """Dispatch one mask operation; the result is checked against the [0, 1] / support invariants."""
    if op == "Identity":
        m = mask_identity(a_prev)
    elif op == "LRA":
        m = mask_lra(a_prev, params.rank)
    elif op == "NFS":
        m = mask_nfs(a_prev, features, params.tau)
    elif op == "NIE":
        m = mask_nie(mask_prev, hidden_prev, adjacency, params.beta, params.p0)
    elif op == "VPO":
        m = mask_vpo(a_prev, params.theta, adjacency)
    else:
        raise ValueError(f"unknown mask op {op!r}")
    check_mask(m, adjacency)
    return m
