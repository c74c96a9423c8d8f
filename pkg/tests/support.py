"""Shared builders and brute-force reference implementations for the tests."""

import itertools
import math

import numpy as np
import torch

from stmtvd.codegraph import DependencyEdge, EdgeKind, StatementGraph, StatementNode, StatementType
from stmtvd.embed import EmbeddingSet
from stmtvd.gnn import GraphSample, ModelConfig, StatementDetector, collate

# (number, name, passed, detail) for every acceptance criterion that ran
ACCEPTANCE = []


def record(number, name, ok, detail=""):
    """Note the outcome, print one status line and fail the calling test if needed."""
    ACCEPTANCE.append((number, name, bool(ok), detail))
    print(f"[{'PASS' if ok else 'FAIL'}] {number:2d} {name}: {detail}")
    assert ok, f"criterion {number} ({name}) failed: {detail}"


def random_graph(rng, n, p=0.4, function_id="g"):
    """Graph on lines 1..n with random control/data edges (self pairs allowed)."""
    nodes = tuple(StatementNode(i + 1, f"s{i + 1};", StatementType.OTHER_OPERATION) for i in range(n))
    edges = []
    for s in range(n):
        for d in range(n):
            if rng.random() < p:
                kind = EdgeKind.CONTROL if rng.random() < 0.5 else EdgeKind.DATA
                edges.append(DependencyEdge(s + 1, d + 1, kind))
    return StatementGraph(function_id, nodes, tuple(edges))


def random_sample(rng, n, dim, function_id="g", p=0.4, func_label=None):
    g = random_graph(rng, n, p, function_id)
    emb = EmbeddingSet(rng.normal(size=dim), rng.normal(size=(n, dim)))
    labels = (rng.random(n) < 0.4).astype(np.int64)
    if func_label is None:
        func_label = int(labels.any())
    return GraphSample(function_id, g, labels, func_label, embeddings=emb)


def tiny_model(rng, gnn_type="gat", dim=3, hidden=(4, 4), heads=1, seed=0, **kw):
    torch.manual_seed(seed)
    cfg = ModelConfig(gnn_type=gnn_type, in_dim=dim, hidden_dims=hidden, mlp_dim=4, dropout=0.0, heads=heads, **kw)
    return StatementDetector(cfg).double()


def batch_of(samples, model):
    return collate(samples, model.config, torch.float64)


def dense_adjacency(edge_index, n):
    """A[i, j] = 1 when j sends to i."""
    A = np.zeros((n, n))
    for s, d in edge_index.t().tolist():
        A[d, s] = 1.0
    return A


def leaky(x, slope):
    return x if x > 0 else slope * x


def act(x, name):
    if name == "relu":
        return np.maximum(x, 0)
    if name == "elu":
        return np.where(x > 0, x, np.expm1(np.minimum(x, 0)))
    return x


def dense_gat(h, A, W, a, heads, slope=0.2, activation="relu"):
    """Node-by-node evaluation of multi-head graph attention, plus the attention weights."""
    n = h.shape[0]
    d_out = W.shape[0]
    dh = d_out // heads
    z = h @ W.T
    out = np.zeros((n, d_out))
    alphas = np.zeros((heads, n, n))
    for k in range(heads):
        zk = z[:, k * dh : (k + 1) * dh]
        for i in range(n):
            nbrs = [j for j in range(n) if A[i, j]]
            e = [leaky(float(a[k, :dh] @ zk[i] + a[k, dh:] @ zk[j]), slope) for j in nbrs]
            m = max(e)
            w = [math.exp(v - m) for v in e]
            tot = sum(w)
            for j, wj in zip(nbrs, w):
                alphas[k, i, j] = wj / tot
                out[i, k * dh : (k + 1) * dh] += (wj / tot) * zk[j]
    return act(out, activation), alphas


def dense_gcn(h, A, W, activation="relu"):
    deg = A.sum(axis=1)
    D = np.diag(1.0 / np.sqrt(deg))
    return act(D @ A @ D @ h @ W.T, activation)


# --------------------------------------------------------------------------- ranking references


def ranked(scores, labels):
    """Labels ordered by descending score, ties by ascending position."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return [labels[i] for i in order]


def ref_ap_at_k(rel, k):
    hits, total = 0, 0.0
    for r in range(1, min(k, len(rel)) + 1):
        if rel[r - 1]:
            hits += 1
            total += hits / r
    norm = min(k, sum(rel))
    return total / norm if norm else 0.0


def ref_ndcg_at_k(rel, k):
    dcg = sum(rel[r - 1] / math.log2(r + 1) for r in range(1, min(k, len(rel)) + 1))
    ideal = sorted(rel, reverse=True)
    idcg = sum(ideal[r - 1] / math.log2(r + 1) for r in range(1, min(k, len(ideal)) + 1))
    return dcg / idcg if idcg else 0.0


def ref_first_rank(rel):
    for r, v in enumerate(rel, start=1):
        if v:
            return r
    raise ValueError("no relevant item")


def ref_roc_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    wins = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p in pos for q in neg)
    return wins / (len(pos) * len(neg))


def ref_wilcoxon_p(d):
    """Two-sided exact p by enumerating every sign assignment of the ranked |d|."""
    d = [x for x in d if x != 0]
    mags = np.abs(d)
    ranks = np.empty(len(d))
    s = sorted(mags)
    for i, m in enumerate(mags):
        idx = [j for j, v in enumerate(s) if v == m]
        ranks[i] = np.mean(idx) + 1
    w_plus = sum(r for r, x in zip(ranks, d) if x > 0)
    total = ranks.sum()
    observed = min(w_plus, total - w_plus)
    count = 0
    n_all = 0
    for signs in itertools.product((0, 1), repeat=len(d)):
        wp = sum(r for r, sg in zip(ranks, signs) if sg)
        if min(wp, total - wp) <= observed + 1e-9:
            count += 1
        n_all += 1
    return min(1.0, count / n_all)
