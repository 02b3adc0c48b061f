"""Node2Vec topological embeddings and pairwise social similarity.

Walks are second-order biased random walks; the walk corpus is fed to a
skip-gram model with negative sampling whose center vectors become the
(frozen) topological embeddings consumed by the cascade model.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numba
import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .data import SocialGraph, Vocab
from .exceptions import ConfigError, ParseError

logger = logging.getLogger(__name__)


@dataclass
class WalkConfig:
    p: float = 1.0
    q: float = 1.0
    walk_length: int = 80
    walks_per_node: int = 10
    seed: int = 0

    def __post_init__(self):
        if not (self.p > 0 and self.q > 0):
            raise ConfigError(f"p and q must be positive, got p={self.p}, q={self.q}")
        if self.walk_length < 2:
            raise ConfigError(f"walk_length must be at least 2, got {self.walk_length}")
        if self.walks_per_node < 1:
            raise ConfigError("walks_per_node must be at least 1")


@dataclass
class EmbeddingMatrix:
    rows: np.ndarray
    trained: bool = False
    isolated: np.ndarray = field(default=None)
    loss_history: List[float] = field(default_factory=list)

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64)
        if self.isolated is None:
            self.isolated = ~self.rows.any(axis=1)

    @property
    def shape(self):
        return self.rows.shape


def transition_probs(graph: SocialGraph, prev: Optional[int], cur: int,
                     p: float, q: float):
    """Neighbors of ``cur`` and the normalized probability of stepping to each.

    ``prev`` is the node the walk arrived from (None on the first step). The
    unnormalized weight is 1/p for returning to ``prev``, 1 for a neighbor
    adjacent to ``prev`` and 1/q otherwise.
    """
    nbrs = graph.adjacency[cur]
    if len(nbrs) == 0:
        return nbrs, np.zeros(0)
    if prev is None:
        return nbrs, np.full(len(nbrs), 1.0 / len(nbrs))
    w = _bias_weights(graph, prev, nbrs, p, q)
    return nbrs, w / w.sum()


def _bias_weights(graph: SocialGraph, prev: int, nbrs: np.ndarray, p: float, q: float):
    back = graph.adjacency[prev]
    if graph.directed:
        linked = np.array([graph.has_edge(int(x), prev) for x in nbrs], dtype=bool)
    elif len(back):
        pos = np.minimum(np.searchsorted(back, nbrs), len(back) - 1)
        linked = back[pos] == nbrs
    else:
        linked = np.zeros(len(nbrs), dtype=bool)
    w = np.where(linked, 1.0, 1.0 / q)
    w[nbrs == prev] = 1.0 / p
    return w


def sample_step(graph: SocialGraph, prev: Optional[int], cur: int,
                p: float, q: float, rng: np.random.Generator) -> Optional[int]:
    """Draw the next node of a walk, or None at a node without out-neighbors."""
    nbrs = graph.adjacency[cur]
    if len(nbrs) == 0:
        return None
    if prev is None or (p == 1.0 and q == 1.0):
        return int(nbrs[rng.integers(len(nbrs))])
    cum = np.cumsum(_bias_weights(graph, prev, nbrs, p, q))
    return int(nbrs[np.searchsorted(cum, rng.random() * cum[-1], side="right")])


def node2vec_walks(graph: SocialGraph, cfg: WalkConfig) -> List[np.ndarray]:
    """``walks_per_node`` walks from every node with at least one neighbor.

    Each start node draws from its own generator seeded with ``seed ^ node``.
    """
    if graph.n_nodes == 0:
        raise ConfigError("cannot walk an empty graph")
    starts = [u for u in range(graph.n_nodes) if graph.degree(u) > 0]
    skipped = graph.n_nodes - len(starts)
    if skipped:
        logger.info("skipping %d isolated node(s)", skipped)
    rngs = {u: np.random.default_rng(cfg.seed ^ u) for u in starts}
    walks = []
    for _ in range(cfg.walks_per_node):
        for u in starts:
            rng = rngs[u]
            walk = [u]
            prev = None
            while len(walk) < cfg.walk_length:
                nxt = sample_step(graph, prev, walk[-1], cfg.p, cfg.q, rng)
                if nxt is None:
                    break
                prev = walk[-1]
                walk.append(nxt)
            walks.append(np.array(walk, dtype=np.int64))
    return walks


def context_pairs(walk: Sequence[int], window: int):
    """(center, context) index arrays for all positions within ``window``."""
    walk = np.asarray(walk, dtype=np.int64)
    centers, contexts = [], []
    for off in range(1, window + 1):
        if off >= len(walk):
            break
        centers.append(walk[:-off])
        contexts.append(walk[off:])
        centers.append(walk[off:])
        contexts.append(walk[:-off])
    if not centers:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    return np.concatenate(centers), np.concatenate(contexts)


@numba.njit(cache=True)
def _sgns_chunk(w_in, w_out, centers, contexts, negs, lr_start, lr_end):
    """Sequential SGD over one chunk of pairs; returns the summed loss."""
    n, k = negs.shape
    d = w_in.shape[1]
    grad_c = np.empty(d)
    total = 0.0
    for r in range(n):
        alpha = lr_start + (lr_end - lr_start) * r / n
        c = centers[r]
        grad_c[:] = 0.0
        for s in range(k + 1):
            if s == 0:
                o = contexts[r]
                label = 1.0
            else:
                o = negs[r, s - 1]
                label = 0.0
            score = 0.0
            for j in range(d):
                score += w_in[c, j] * w_out[o, j]
            if score >= 0:
                sig = 1.0 / (1.0 + np.exp(-score))
            else:
                ez = np.exp(score)
                sig = ez / (1.0 + ez)
            # -log sigmoid(+-score), stable
            z = score if label == 1.0 else -score
            total += np.log1p(np.exp(-abs(z))) + max(-z, 0.0)
            g = alpha * (label - sig)
            for j in range(d):
                grad_c[j] += g * w_out[o, j]
                w_out[o, j] += g * w_in[c, j]
        for j in range(d):
            w_in[c, j] += grad_c[j]
    return total


def train_sgns(walks: Sequence[np.ndarray], d_g: int = 128, window: int = 5,
               negatives: int = 5, epochs: int = 5, lr: float = 0.025,
               n_nodes: Optional[int] = None, seed: int = 0,
               chunk_size: int = 65536) -> EmbeddingMatrix:
    """Skip-gram with negative sampling over a walk corpus.

    Negatives come from the unigram distribution of walk occurrences raised to
    the 3/4 power. Pairs are visited in a seeded random order with strictly
    sequential updates; the learning rate decays linearly towards ``lr * 1e-4``.
    Nodes that never occur in a walk keep a zero row.
    """
    if n_nodes is None:
        n_nodes = 1 + max((int(w.max()) for w in walks if len(w)), default=-1)
    n_nodes = max(n_nodes, 0)
    pairs = [context_pairs(w, window) for w in walks]
    centers = np.concatenate([c for c, _ in pairs]) if pairs else np.zeros(0, np.int64)
    contexts = np.concatenate([x for _, x in pairs]) if pairs else np.zeros(0, np.int64)
    if len(centers) == 0:
        warnings.warn("no skip-gram pairs (graph without edges); returning zero embeddings",
                      RuntimeWarning, stacklevel=2)
        return EmbeddingMatrix(np.zeros((n_nodes, d_g)), trained=True)

    rng = np.random.default_rng(seed)
    counts = np.bincount(np.concatenate(list(walks)), minlength=n_nodes).astype(np.float64)
    noise = counts ** 0.75
    noise_cum = np.cumsum(noise / noise.sum())
    w_in = rng.uniform(-0.5 / d_g, 0.5 / d_g, size=(n_nodes, d_g))
    w_out = np.zeros((n_nodes, d_g))

    n_pairs = len(centers)
    total = epochs * n_pairs
    done = 0
    history = []
    for epoch in range(epochs):
        order = rng.permutation(n_pairs)
        epoch_loss = 0.0
        for start in range(0, n_pairs, chunk_size):
            idx = order[start:start + chunk_size]
            negs = np.searchsorted(noise_cum, rng.random((len(idx), negatives)), side="right")
            negs = np.minimum(negs, n_nodes - 1)
            lr_a = lr * max(1e-4, 1.0 - done / total)
            done += len(idx)
            lr_b = lr * max(1e-4, 1.0 - done / total)
            epoch_loss += _sgns_chunk(w_in, w_out, centers[idx], contexts[idx], negs, lr_a, lr_b)
        history.append(epoch_loss / n_pairs)
        logger.debug("sgns epoch %d loss %.6f", epoch + 1, history[-1])

    isolated = counts == 0
    w_in[isolated] = 0.0
    return EmbeddingMatrix(w_in, trained=True, isolated=isolated, loss_history=history)


def cosine_similarity_matrix(g: np.ndarray) -> np.ndarray:
    """Pairwise row cosine similarity; works on ``(i, d)`` or batched ``(..., i, d)``.

    A zero row has similarity 0 with everything, itself included.
    """
    g = np.asarray(g, dtype=np.float64)
    norms = np.linalg.norm(g, axis=-1, keepdims=True)
    nonzero = norms > 0
    gn = np.divide(g, norms, out=np.zeros_like(g), where=nonzero)
    e = gn @ np.swapaxes(gn, -1, -2)
    e = 0.5 * (e + np.swapaxes(e, -1, -2))
    e = np.clip(e, -1.0, 1.0)
    diag = np.einsum("...ii->...i", e)
    diag[...] = nonzero[..., 0].astype(np.float64)
    return e


def save_embeddings(emb, vocab: Vocab, path) -> None:
    """Text format: header ``N d_g`` then ``raw_id v1 ... v_dg`` per node."""
    rows = emb.rows if isinstance(emb, EmbeddingMatrix) else np.asarray(emb)
    n, d = rows.shape
    if n != len(vocab):
        raise ConfigError(f"embedding has {n} rows but vocab has {len(vocab)} users")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{n} {d}\n")
        for i, row in enumerate(rows.tolist()):
            fh.write(vocab.raw(i) + " " + " ".join(repr(x) for x in row) + "\n")


def load_embeddings(path, vocab: Vocab) -> EmbeddingMatrix:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise ParseError("expected header 'N d_g'", path, 1)
        try:
            n, d = int(header[0]), int(header[1])
        except ValueError:
            raise ParseError("non-integer header", path, 1) from None
        if n != len(vocab):
            raise ParseError(f"embedding file has {n} nodes, vocab has {len(vocab)}", path, 1)
        rows = np.zeros((n, d))
        seen = np.zeros(n, dtype=bool)
        for lineno, line in enumerate(fh, 2):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != d + 1:
                raise ParseError(f"expected {d} values, got {len(parts) - 1}", path, lineno)
            idx = vocab.get(parts[0])
            if idx is None:
                raise ParseError(f"unknown user {parts[0]!r}", path, lineno)
            try:
                rows[idx] = [float(x) for x in parts[1:]]
            except ValueError:
                raise ParseError("non-numeric embedding value", path, lineno) from None
            seen[idx] = True
    if not seen.all():
        raise ParseError(f"{int((~seen).sum())} vocab user(s) missing from embedding file", path)
    if not np.isfinite(rows).all():
        raise ParseError("non-finite embedding value", path)
    return EmbeddingMatrix(rows, trained=True)


class Node2Vec(BaseEstimator, TransformerMixin):
    """Estimator wrapper: ``fit`` on a :class:`SocialGraph`, ``transform`` node ids."""

    def __init__(self, dimensions=128, p=1.0, q=1.0, walk_length=80, walks_per_node=10,
                 window=5, negatives=5, epochs=5, lr=0.025, seed=0):
        self.dimensions = dimensions
        self.p = p
        self.q = q
        self.walk_length = walk_length
        self.walks_per_node = walks_per_node
        self.window = window
        self.negatives = negatives
        self.epochs = epochs
        self.lr = lr
        self.seed = seed

    def fit(self, graph: SocialGraph, y=None):
        cfg = WalkConfig(self.p, self.q, self.walk_length, self.walks_per_node, self.seed)
        walks = node2vec_walks(graph, cfg)
        self.embedding_ = train_sgns(walks, d_g=self.dimensions, window=self.window,
                                     negatives=self.negatives, epochs=self.epochs, lr=self.lr,
                                     n_nodes=graph.n_nodes, seed=self.seed)
        self.n_walks_ = len(walks)
        return self

    def transform(self, nodes):
        check_is_fitted(self, "embedding_")
        return self.embedding_.rows[np.asarray(nodes, dtype=np.int64)]

    def fit_transform(self, graph, y=None):
        return self.fit(graph).embedding_.rows
