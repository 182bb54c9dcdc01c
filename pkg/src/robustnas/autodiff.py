"""Small dense reverse-mode autodiff on top of numpy.

Operations executed inside an active :class:`Tape` are recorded whenever one
of their inputs is trainable. ``Tape.backward`` replays the record in reverse
and accumulates gradients into the trainable leaves (normally the tensors held
by a :class:`ParamBank`). Outside a tape nothing is recorded, which makes
inference cheap.
"""
from __future__ import annotations

import contextvars
import hashlib
import struct
import zlib
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar("tape", default=None)

LEAKY_SLOPE = 0.2


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "parents", "backward_fn", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self.backward_fn is None

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return hadamard(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of the differentiable operations of one forward pass."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every trainable leaf."""
        if loss.backward_fn is None or not any(node is loss for node in self.nodes):
            raise RuntimeError("backward called on a tensor that was not produced on this tape")
        if loss.data.size != 1:
            raise ValueError("loss must be a scalar")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.is_leaf:
                    parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
                else:
                    key = id(parent)
                    grads[key] = pg if key not in grads else grads[key] + pg
        self.nodes.clear()


def _record(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value produced in forward pass")
    tape = _ACTIVE_TAPE.get()
    if tape is None or not any(p.requires_grad for p in parents):
        return Tensor(data)
    out = Tensor(data, requires_grad=True)
    out.parents = tuple(parents)
    out.backward_fn = backward_fn
    tape.nodes.append(out)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- primitives

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def back(g):
        return (g @ B.T if a.requires_grad else None, A.T @ g if b.requires_grad else None)

    return _record(A @ B, (a, b), back)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    sa, sb = a.shape, b.shape

    def back(g):
        return (_unbroadcast(g, sa) if a.requires_grad else None,
                _unbroadcast(g, sb) if b.requires_grad else None)

    return _record(out, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def hadamard(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    A, B = a.data, b.data

    def back(g):
        return (_unbroadcast(g * B, A.shape) if a.requires_grad else None,
                _unbroadcast(g * A, B.shape) if b.requires_grad else None)

    return _record(A * B, (a, b), back)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _record(a.data * c, (a,), lambda g: (g * c,))


def row_softmax(a) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _record(s, (a,), back)


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _record(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def elu(a, alpha: float = 1.0) -> Tensor:
    a = as_tensor(a)
    x = a.data
    neg = alpha * np.expm1(np.minimum(x, 0.0))
    out = np.where(x > 0, x, neg)
    deriv = np.where(x > 0, 1.0, neg + alpha)
    return _record(out, (a,), lambda g: (g * deriv,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.data)
    return _record(t, (a,), lambda g: (g * (1.0 - t * t),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _record(s, (a,), lambda g: (g * s * (1.0 - s),))


def leaky_relu(a, slope: float = LEAKY_SLOPE) -> Tensor:
    a = as_tensor(a)
    factor = np.where(a.data > 0, 1.0, slope)
    return _record(a.data * factor, (a,), lambda g: (g * factor,))


def concat_cols(parts: Sequence) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    widths = np.cumsum([0] + [p.shape[1] for p in parts])

    def back(g):
        return tuple(g[:, widths[k]:widths[k + 1]] for k in range(len(parts)))

    return _record(np.concatenate([p.data for p in parts], axis=1), parts, back)


def slice_cols(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return _record(a.data[:, start:stop], (a,), back)


def row_max(a) -> Tensor:
    """Row-wise max as an (n, 1) column; the gradient goes to the first argmax."""
    a = as_tensor(a)
    idx = np.argmax(a.data, axis=1)
    rows = np.arange(a.shape[0])
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        full[rows, idx] = g[:, 0]
        return (full,)

    return _record(a.data[rows, idx][:, None], (a,), back)


def row_sum(a) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    return _record(a.data.sum(axis=1, keepdims=True), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def row_mean(a) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    k = shape[1]
    return _record(a.data.mean(axis=1, keepdims=True), (a,), lambda g: (np.broadcast_to(g / k, shape).copy(),))


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    return _record(np.array(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),))


def maximum(a, b) -> Tensor:
    """Elementwise max; ties resolve to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data >= b.data
    return _record(np.where(take_a, a.data, b.data), (a, b), lambda g: (g * take_a, g * ~take_a))


def gather_rows(a, index: np.ndarray) -> Tensor:
    a = as_tensor(a)
    index = np.asarray(index)
    n = a.shape[0]

    def back(g):
        return (_scatter_matrix(index, n) @ g,)

    return _record(a.data[index], (a,), back)


def _scatter_matrix(index: np.ndarray, n: int) -> sp.csr_matrix:
    m = len(index)
    return sp.csr_matrix((np.ones(m), (index, np.arange(m))), shape=(n, m))


def scatter_add_rows(a, index: np.ndarray, n: int) -> Tensor:
    """out[index[e]] += a[e]; rows never addressed stay zero."""
    a = as_tensor(a)
    index = np.asarray(index)
    if len(index) != a.shape[0]:
        raise ValueError("scatter index length must match row count")
    S = _scatter_matrix(index, n)
    out = np.asarray(S @ a.data)
    return _record(out, (a,), lambda g: (g[index],))


def weighted_neighbor_sum(weights, h, src: np.ndarray, dst: np.ndarray) -> Tensor:
    """out[dst[e]] += weights[e] * h[src[e]].

    Same result as gather_rows -> hadamard -> scatter_add_rows, computed with
    one sparse product so no (E, d) intermediate is kept.
    """
    w, h = as_tensor(weights), as_tensor(h)
    n = h.shape[0]
    wv = w.data.reshape(-1)
    S = sp.csr_matrix((wv, (dst, src)), shape=(n, n))
    H = h.data

    def back(g):
        gw = gh = None
        if w.requires_grad:
            if n <= 4000:
                gw = (g @ H.T)[dst, src].reshape(w.shape)
            else:
                gw = np.einsum("ij,ij->i", g[dst], H[src]).reshape(w.shape)
        if h.requires_grad:
            gh = np.asarray(S.T @ g)
        return (gw, gh)

    return _record(np.asarray(S @ H), (w, h), back)


def segment_max(a, index: np.ndarray, n: int) -> Tensor:
    """Per-column max of the rows of ``a`` (shape (E, d)) grouped by ``index`` (sorted ascending).

    Ties go to the earliest row of the group. Empty groups give zero rows.
    """
    a = as_tensor(a)
    index = np.asarray(index)
    x = a.data
    if x.ndim != 2:
        raise ValueError("segment_max expects an (E, d) input")
    if len(index) and np.any(np.diff(index) < 0):
        raise ValueError("segment_max expects a sorted index")
    E, d = x.shape
    counts = np.bincount(index, minlength=n)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    pos = np.arange(E) - starts[index]
    width = int(counts.max()) if E else 0
    padded = np.full((n, max(width, 1), d), -np.inf)
    padded[index, pos] = x
    arg = np.argmax(padded, axis=1)
    out = np.take_along_axis(padded, arg[:, None, :], axis=1)[:, 0, :]
    out[counts == 0] = 0.0
    arg_edge = starts[:, None] + arg

    def back(g):
        full = np.zeros((E, d))
        rows = np.flatnonzero(counts)
        cols = np.broadcast_to(np.arange(d), (rows.size, d))
        full[arg_edge[rows], cols] = g[rows]
        return (full,)

    return _record(out, (a,), back)


def segment_softmax(a, index: np.ndarray, n: int) -> Tensor:
    """Softmax of the entries of ``a`` (shape (E, 1)) within each index group."""
    a = as_tensor(a)
    index = np.asarray(index)
    x = a.data
    seg_max = np.full(n, -np.inf)
    np.maximum.at(seg_max, index, x[:, 0])
    e = np.exp(x[:, 0] - seg_max[index])
    S = _scatter_matrix(index, n)
    denom = S @ e
    s = (e / denom[index])[:, None]

    def back(g):
        inner = S @ (g[:, 0] * s[:, 0])
        return (s * (g - inner[index][:, None]),)

    return _record(s, (a,), back)


def dropout(a, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rng`` is None or ``rate`` is 0."""
    a = as_tensor(a)
    if rng is None or rate <= 0.0:
        return a
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return hadamard(a, keep)


def cross_entropy(logits, labels: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of ``labels`` over the rows selected by ``mask``."""
    logits = as_tensor(logits)
    mask = np.asarray(mask, dtype=bool)
    rows = np.flatnonzero(mask)
    if rows.size == 0:
        raise ValueError("cross_entropy needs at least one selected row")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    y = np.asarray(labels)[rows]
    loss = float(np.mean(lse[rows] - z[rows, y]))

    def back(g):
        p = np.exp(z[rows] - lse[rows, None])
        p[np.arange(rows.size), y] -= 1.0
        full = np.zeros_like(z)
        full[rows] = p * (float(g) / rows.size)
        return (full,)

    return _record(np.array(loss), (logits,), back)


# ---------------------------------------------------------------- parameters

class ParamBank:
    """Named trainable tensors plus their Adam moments."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.steps: dict[str, int] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self.params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        self.steps[name] = 0
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __len__(self) -> int:
        return len(self.params)

    def names(self) -> list[str]:
        return list(self.params)

    def num_parameters(self) -> int:
        return int(sum(t.data.size for t in self.params.values()))

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data).tobytes())
        return h.hexdigest()

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}


def adam_step(bank: ParamBank, lr: float, weight_decay: float = 0.0,
              betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> list[str]:
    """One Adam update with decoupled weight decay on every parameter holding a gradient.

    Parameters without a gradient (not on the sampled path) are left untouched,
    including their moment estimates. Returns the names that were updated.
    """
    b1, b2 = betas
    touched = [k for k, t in bank.params.items() if t.grad is not None]
    if not touched:
        raise RuntimeError("adam_step called without any gradients")
    for name in touched:
        t = bank.params[name]
        g = t.grad
        bank.steps[name] += 1
        step = bank.steps[name]
        m = bank.m[name] = b1 * bank.m[name] + (1.0 - b1) * g
        v = bank.v[name] = b2 * bank.v[name] + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** step)
        v_hat = v / (1.0 - b2 ** step)
        if weight_decay:
            t.data = t.data * (1.0 - lr * weight_decay)
        t.data = t.data - lr * m_hat / (np.sqrt(v_hat) + eps)
        t.grad = None
    return touched


# ---------------------------------------------------------------- persistence

_MAGIC = b"PBNK"
_VERSION = 1


def save_bank(bank: ParamBank, path) -> None:
    """Write parameters as: magic, version, count, then (name, shape, float64 LE data) per entry."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(bank.params)))
        for name, t in bank.params.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", t.data.ndim))
            fh.write(struct.pack(f"<{t.data.ndim}I", *t.data.shape))
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_bank(path) -> ParamBank:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise ValueError(f"{path}: not a parameter bank file")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported bank version {version}")
    off = 12
    bank = ParamBank()
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<B", blob, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(blob, dtype="<f8", count=size, offset=off).reshape(shape)
        off += 8 * size
        bank.add(name, data.astype(np.float64))
    return bank


def glorot(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_in = shape[0]
    fan_out = shape[1] if len(shape) > 1 else 1
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def entry_rng(seed: int, name: str) -> np.random.Generator:
    """Generator keyed by (seed, name) so an entry's init ignores which other entries exist."""
    return np.random.default_rng([seed, zlib.crc32(name.encode("utf-8"))])


def numerical_gradient(f: Callable[[], float], params: Iterable[Tensor], h: float = 1e-5) -> list[np.ndarray]:
    """Central finite differences of scalar ``f`` w.r.t. each tensor in ``params``."""
    out = []
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            fp = f()
            flat[k] = orig - h
            fm = f()
            flat[k] = orig
            gflat[k] = (fp - fm) / (2.0 * h)
        out.append(g)
    return out
