"""Training loop, ranking metrics, diffusion-tree inference and synthetic cascades."""
from __future__ import annotations

import heapq
import logging
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .data import Cascade, CascadeCorpus, PrefixInstance, SocialGraph, Vocab, corpus_instances, make_prefix_instances
from .exceptions import ConfigError, ContractError, NonFiniteError
from .model import ModelConfig, ModelParams, forward, loss_and_grads, make_batch
from .numeric import AdamState, adam_step

logger = logging.getLogger(__name__)

TOP_K = (10, 50, 100)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    max_epochs: int = 200
    patience: int = 10
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError(f"lr must be non-negative, got {self.lr}")
        if self.patience < 1:
            raise ConfigError("patience must be at least 1")
        if self.batch_size < 1 or self.max_epochs < 0:
            raise ConfigError("batch_size must be positive and max_epochs non-negative")


@dataclass
class Metrics:
    rr: float
    precision: Dict[int, float]
    n_instances: int
    mask_mode: str = "none"

    def record(self, split: str = "test") -> dict:
        rec = {"split": split, "RR": self.rr}
        for k in TOP_K:
            rec[f"P@{k}"] = self.precision[k]
        rec["n_instances"] = self.n_instances
        rec["mask_mode"] = self.mask_mode
        return rec

    def table(self) -> str:
        head = ["RR"] + [f"P@{k}" for k in TOP_K]
        vals = [self.rr] + [self.precision[k] for k in TOP_K]
        top = " ".join(f"{h:>8}" for h in head)
        row = " ".join(f"{100 * v:8.2f}" for v in vals)
        return f"{top}\n{row}\n({self.n_instances} instances, scores in %, mask={self.mask_mode})"


def target_ranks(scores: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """1-based rank of each target; ties go to the smaller user index."""
    scores = np.asarray(scores)
    rows = np.arange(len(targets))
    t = scores[rows, targets][:, None]
    idx = np.arange(scores.shape[1])[None, :]
    better = (scores > t) | ((scores == t) & (idx < targets[:, None]))
    return 1 + better.sum(axis=1)


def metrics_from_ranks(ranks: Sequence[int], mask_mode: str = "none") -> Metrics:
    ranks = np.asarray(ranks, dtype=np.int64)
    if ranks.size == 0:
        raise ContractError("cannot compute metrics over zero instances")
    rr = float(np.mean(1.0 / ranks))
    precision = {k: float(np.mean(ranks <= k)) for k in TOP_K}
    return Metrics(rr, precision, int(ranks.size), mask_mode)


def _chunks(seq, size):
    for start in range(0, len(seq), size):
        yield seq[start:start + size]


def predict_instances(params: ModelParams, instances: Sequence[PrefixInstance],
                      config: ModelConfig, t_max: float, topo=None,
                      mask_observed: bool = False, batch_size: int = 256) -> np.ndarray:
    """``(n, N)`` next-user distributions, one row per instance (input order)."""
    topo = topo if config.use_topology else None
    out = []
    for chunk in _chunks(list(instances), batch_size):
        batch = make_batch(chunk, t_max, params.n_bins, topo)
        out.append(forward(params, batch, config, mask_observed=mask_observed).probs)
    return np.concatenate(out) if out else np.zeros((0, params.n_users))


def evaluate(instances: Sequence[PrefixInstance], params: ModelParams, config: ModelConfig,
             t_max: float, topo=None, mask_observed: bool = False,
             batch_size: int = 256) -> Metrics:
    """RR and P@K over prefix instances, ranking all users by predicted probability."""
    instances = list(instances)
    if not instances:
        raise ContractError("evaluation set is empty")
    ranks = []
    for chunk in _chunks(instances, batch_size):
        probs = predict_instances(params, chunk, config, t_max, topo, mask_observed, batch_size)
        targets = np.array([inst.target for inst in chunk], dtype=np.int64)
        ranks.append(target_ranks(probs, targets))
    return metrics_from_ranks(np.concatenate(ranks), "observed" if mask_observed else "none")


def frequency_scores(corpus: CascadeCorpus) -> np.ndarray:
    """Global activation counts per user over ``corpus``."""
    counts = np.zeros(corpus.n_users)
    for c in corpus:
        np.add.at(counts, c.users, 1.0)
    return counts


def evaluate_scores(instances: Sequence[PrefixInstance], scores: np.ndarray,
                    mask_observed: bool = False) -> Metrics:
    """Metrics of a fixed per-user score vector (e.g. the frequency baseline)."""
    instances = list(instances)
    if not instances:
        raise ContractError("evaluation set is empty")
    table = np.tile(np.asarray(scores, dtype=np.float64), (len(instances), 1))
    if mask_observed:
        for r, inst in enumerate(instances):
            table[r, inst.users] = -np.inf
    targets = np.array([inst.target for inst in instances], dtype=np.int64)
    return metrics_from_ranks(target_ranks(table, targets), "observed" if mask_observed else "none")


@dataclass
class TrainResult:
    params: ModelParams
    history: List[dict]
    timings: List[float]
    best_epoch: int
    best_rr: float
    stop_reason: str


def _epoch_batches(instances, batch_size, rng):
    """Shuffle, group by prefix length into batches, shuffle batch order."""
    order = rng.permutation(len(instances))
    order = sorted(order.tolist(), key=lambda i: instances[i].length)
    batches = [order[s:s + batch_size] for s in range(0, len(order), batch_size)]
    return [batches[i] for i in rng.permutation(len(batches))]


def train(train_set: CascadeCorpus, valid_set: CascadeCorpus, params: ModelParams,
          model_cfg: ModelConfig, train_cfg: TrainConfig, *, topo=None,
          on_epoch: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Adam on mini-batches of prefixes with early stopping on validation RR.

    ``params`` is updated in place; the returned result carries a copy of the
    best-validation parameters. A non-finite loss or gradient stops training
    and keeps the last good checkpoint.
    """
    t_max = train_set.t_max
    if model_cfg.use_topology and topo is None:
        raise ConfigError("topology-aware training needs topological embeddings")
    topo = topo if model_cfg.use_topology else None
    instances = corpus_instances(train_set, model_cfg.max_len)
    valid_instances = corpus_instances(valid_set, model_cfg.max_len)
    if not instances or not valid_instances:
        raise ContractError("training and validation sets must yield prefix instances")

    rng = np.random.default_rng(train_cfg.seed)
    state = AdamState.for_params(params.arrays)
    best = params.copy()
    best_rr, best_epoch = -np.inf, 0
    history, timings = [], []
    stale = 0
    reason = "max_epochs"
    for epoch in range(1, train_cfg.max_epochs + 1):
        started = time.perf_counter()
        total, count = 0.0, 0
        try:
            for idx in _epoch_batches(instances, train_cfg.batch_size, rng):
                batch = make_batch([instances[i] for i in idx], t_max, params.n_bins, topo)
                value, grads = loss_and_grads(params, batch, model_cfg, rng)
                if not np.isfinite(value):
                    raise NonFiniteError("non-finite training loss")
                adam_step(params.arrays, grads, state, train_cfg.lr)
                total += value * len(idx)
                count += len(idx)
        except NonFiniteError as exc:
            logger.error("epoch %d: %s; keeping best checkpoint from epoch %d", epoch, exc, best_epoch)
            reason = "non_finite"
            break
        metrics = evaluate(valid_instances, params, model_cfg, t_max, topo)
        timings.append(time.perf_counter() - started)
        record = {"epoch": epoch, "train_loss": total / count, "valid_RR": metrics.rr,
                  **{f"valid_P@{k}": metrics.precision[k] for k in TOP_K}}
        history.append(record)
        if on_epoch is not None:
            on_epoch(record)
        logger.info("epoch %d loss %.5f valid RR %.4f", epoch, record["train_loss"], metrics.rr)
        if metrics.rr > best_rr:
            best_rr, best_epoch, stale = metrics.rr, epoch, 0
            best = params.copy()
        else:
            stale += 1
            if stale >= train_cfg.patience:
                reason = "patience"
                break
    return TrainResult(best, history, timings, best_epoch, float(best_rr), reason)


@dataclass
class DiffusionTree:
    """Parent position of every cascade position; the root has parent -1."""

    cascade_id: str
    users: np.ndarray
    parents: np.ndarray

    def edges(self) -> List[Tuple[int, int]]:
        return [(int(p), c) for c, p in enumerate(self.parents.tolist()) if p >= 0]

    def is_valid_forest(self) -> bool:
        roots = int((self.parents < 0).sum())
        ordered = all(p < c for p, c in self.edges())
        return roots == 1 and self.parents[0] == -1 and ordered

    def position_lines(self) -> List[str]:
        return [f"{c}\t{p}" for p, c in self.edges()]

    def raw_edge_lines(self, vocab: Vocab) -> List[str]:
        return [f"{vocab.raw(int(self.users[p]))}\t{vocab.raw(int(self.users[c]))}"
                for p, c in self.edges()]


def infer_tree(cascade: Cascade, params: ModelParams, config: ModelConfig, t_max: float,
               topo=None) -> DiffusionTree:
    """Parent of each activation = the prefix position with the largest cascade attention."""
    if len(cascade) < 2:
        raise ContractError("tree inference needs at least two events")
    instances = make_prefix_instances(cascade, max_len=len(cascade))
    parents = np.full(len(cascade), -1, dtype=np.int64)
    topo = topo if config.use_topology else None
    for chunk in _chunks(instances, 256):
        batch = make_batch(chunk, t_max, params.n_bins, topo)
        beta = forward(params, batch, config).beta
        for inst, row in zip(chunk, beta):
            parents[inst.length] = int(np.argmax(row[:inst.length]))
    return DiffusionTree(cascade.id, cascade.users.copy(), parents)


def parent_accuracy(predicted: Dict[str, np.ndarray], planted: Dict[str, np.ndarray]) -> float:
    """Fraction of non-root positions whose parent matches, over shared cascades."""
    hit = total = 0
    for cid, truth in planted.items():
        if cid not in predicted:
            continue
        guess = predicted[cid]
        n = min(len(guess), len(truth))
        hit += int((guess[1:n] == truth[1:n]).sum())
        total += n - 1
    return hit / total if total else 0.0


def predecessor_parents(length: int) -> np.ndarray:
    return np.arange(length, dtype=np.int64) - 1


@dataclass
class SynthResult:
    corpus: CascadeCorpus
    parents: Dict[str, np.ndarray]
    attempts: int
    dropped: int = 0


def simulate_cascade(graph: SocialGraph, seed_node: int, prob: float, max_length: int,
                     rng: np.random.Generator):
    """Continuous-time independent cascade from ``seed_node``.

    Each newly activated node gets one chance to activate each neighbor with
    probability ``prob``, at its own time plus an Exp(1) delay; the earliest
    successful attempt wins. Returns ``(nodes, times, parent_positions)``.
    """
    nodes, times, parents = [], [], []
    position: Dict[int, int] = {}
    queue = [(0.0, 0, seed_node, -1)]
    tie = 1
    while queue and len(nodes) < max_length:
        t, _, v, parent = heapq.heappop(queue)
        if v in position:
            continue
        position[v] = len(nodes)
        nodes.append(v)
        times.append(t)
        parents.append(parent)
        for x in graph.neighbors(v).tolist():
            if x in position:
                continue
            if rng.random() < prob:
                heapq.heappush(queue, (t + rng.exponential(1.0), tie, x, position[v]))
                tie += 1
    return nodes, times, parents


def synth_generate(graph: SocialGraph, prob: float, max_length: int, count: int,
                   seed: int = 0, node_names: Optional[Sequence[str]] = None) -> SynthResult:
    """Up to ``count`` cascades of length >= 2 with their planted parent positions.

    Seeds are drawn uniformly; single-node outcomes are dropped. At most
    ``20 * count`` seeds are tried, so a zero activation probability yields an
    empty corpus instead of looping.
    """
    if not 0.0 <= prob <= 1.0:
        raise ConfigError(f"activation probability must be in [0, 1], got {prob}")
    names = list(node_names) if node_names is not None else [f"n{k}" for k in range(graph.n_nodes)]
    vocab = Vocab(names)
    rng = np.random.default_rng(seed)
    cascades, planted = [], {}
    attempts = dropped = 0
    while len(cascades) < count and attempts < 20 * count:
        attempts += 1
        start = int(rng.integers(graph.n_nodes))
        nodes, times, parents = simulate_cascade(graph, start, prob, max_length, rng)
        if len(nodes) < 2:
            dropped += 1
            continue
        cid = f"s{len(cascades)}"
        cascades.append(Cascade(cid, nodes, times))
        planted[cid] = np.array(parents, dtype=np.int64)
    return SynthResult(CascadeCorpus(cascades, vocab), planted, attempts, dropped)


def random_graph(n_nodes: int, mean_degree: float, seed: int = 0) -> SocialGraph:
    """Erdos-Renyi G(n, p) with ``p = mean_degree / (n - 1)``."""
    rng = np.random.default_rng(seed)
    p = mean_degree / max(n_nodes - 1, 1)
    iu, ju = np.triu_indices(n_nodes, k=1)
    keep = rng.random(len(iu)) < p
    return SocialGraph.from_edges(n_nodes, zip(iu[keep].tolist(), ju[keep].tolist()))
