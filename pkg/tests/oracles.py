"""Independent, loop-based reference computations used as test oracles."""
import math

import numpy as np


def jaccard_pair(xi, xj):
    si = {k for k, v in enumerate(xi) if v > 0}
    sj = {k for k, v in enumerate(xj) if v > 0}
    if not si and not sj:
        return 1.0
    return len(si & sj) / len(si | sj)


def nfs_pruned_edges(adj, features, tau):
    n = len(adj)
    pruned = set()
    for i in range(n):
        for j in range(n):
            if i != j and adj[i][j] > 0 and jaccard_pair(features[i], features[j]) < tau:
                pruned.add((i, j))
    return pruned


def cosine(a, b):
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(x * x for x in b))
    if na == 0 or nb == 0:
        return 0.0
    return sum(x * y for x, y in zip(a, b)) / (na * nb)


def nie_mask(mask_prev, hidden, adj, beta, p0):
    n = len(adj)
    s = [[0.0] * n for _ in range(n)]
    for i in range(n):
        for j in range(n):
            if i != j and adj[i][j] > 0:
                c = max(0.0, cosine(hidden[i], hidden[j]))
                s[i][j] = 0.0 if c < p0 else c
    alpha = [[0.0] * n for _ in range(n)]
    for i in range(n):
        total = sum(s[i]) + 1e-12
        for j in range(n):
            alpha[i][j] = s[i][j] / total
    out = [[0.0] * n for _ in range(n)]
    for i in range(n):
        for j in range(n):
            if i == j or adj[i][j] <= 0:
                continue
            sym = 0.5 * (alpha[i][j] + alpha[j][i])
            out[i][j] = min(1.0, max(0.0, beta * mask_prev[i][j] + (1 - beta) * sym))
    return out


def kl(p, q, eps=1e-12):
    return sum(pi * math.log((pi + eps) / (qi + eps)) for pi, qi in zip(p, q))


def elu(x):
    return x if x > 0 else math.exp(x) - 1.0


def matvec_rows(h, w, b=None):
    """Row-wise h @ w (+ b) with plain loops."""
    out = []
    for row in h:
        r = []
        for k in range(len(w[0])):
            v = sum(row[t] * w[t][k] for t in range(len(row)))
            if b is not None:
                v += b[k]
            r.append(v)
        out.append(r)
    return out


def gcn_layer(adj, h, w, b):
    """elu( sum_{j in N(i) + i} h_j / sqrt(d_i d_j) @ W + b ), d = 1 + degree."""
    n = len(adj)
    d = [1.0 + sum(adj[i][j] for j in range(n) if j != i) for i in range(n)]
    agg = []
    for i in range(n):
        row = [0.0] * len(h[0])
        for j in range(n):
            weight = 1.0 if i == j else adj[i][j]
            if weight == 0:
                continue
            c = weight / math.sqrt(d[i] * d[j])
            for k in range(len(row)):
                row[k] += c * h[j][k]
        agg.append(row)
    return [[elu(v) for v in r] for r in matvec_rows(agg, w, b)]


def gin_layer(adj, h, eps, mlp_w, mlp_b, w, b):
    """elu( elu(((1+eps) h_i + sum_{j in N(i) + i} h_j) @ M + c) @ W + b )."""
    n = len(adj)
    mixed = []
    for i in range(n):
        row = [(1.0 + eps) * v for v in h[i]]
        for j in range(n):
            weight = 1.0 if i == j else adj[i][j]
            if weight:
                for k in range(len(row)):
                    row[k] += weight * h[j][k]
        mixed.append(row)
    inner = [[elu(v) for v in r] for r in matvec_rows(mixed, mlp_w, mlp_b)]
    return [[elu(v) for v in r] for r in matvec_rows(inner, w, b)]


def softmax(z):
    m = max(z)
    e = [math.exp(v - m) for v in z]
    s = sum(e)
    return [v / s for v in e]


def random_symmetric(n, p, rng, weighted=False):
    a = np.triu((rng.random((n, n)) < p).astype(float), 1)
    if weighted:
        a *= rng.uniform(0.1, 1.0, size=a.shape)
    return a + a.T
