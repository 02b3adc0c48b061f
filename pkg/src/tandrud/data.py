"""Cascade corpora, social graphs, splits, prefix instances and time bins.

File formats
------------
Cascade file, one cascade per line::

    cascade_id<TAB>user,timestamp user,timestamp ...

Edge file, one edge per line, two whitespace separated raw user ids. Lines
starting with ``#`` are comments.
"""
from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .exceptions import ConfigError, ContractError, ParseError

logger = logging.getLogger(__name__)


class Vocab:
    """Bidirectional map between raw user ids and dense indices ``0..N-1``."""

    def __init__(self, raw_ids: Iterable[str] = ()):
        self._index: Dict[str, int] = {}
        self._raw: List[str] = []
        for r in raw_ids:
            self.add(r)

    def add(self, raw: str) -> int:
        idx = self._index.get(raw)
        if idx is None:
            idx = len(self._raw)
            self._index[raw] = idx
            self._raw.append(raw)
        return idx

    def index(self, raw: str) -> int:
        return self._index[raw]

    def raw(self, idx: int) -> str:
        return self._raw[idx]

    def get(self, raw: str, default=None):
        return self._index.get(raw, default)

    def __contains__(self, raw) -> bool:
        return raw in self._index

    def __len__(self) -> int:
        return len(self._raw)

    def __iter__(self):
        return iter(self._raw)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self._raw == other._raw

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self._raw).encode("utf-8")).hexdigest()

    def save(self, path) -> None:
        Path(path).write_text("".join(r + "\n" for r in self._raw), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(line for line in lines if line)


@dataclass
class Cascade:
    id: str
    users: np.ndarray  # int vocab indices, activation order
    times: np.ndarray  # float seconds, non-decreasing

    def __post_init__(self):
        self.users = np.asarray(self.users, dtype=np.int64)
        self.times = np.asarray(self.times, dtype=np.float64)
        if self.users.shape != self.times.shape or self.users.ndim != 1:
            raise ContractError(f"cascade {self.id!r}: users and times must be equal-length vectors")
        if len(self.times) > 1 and (np.diff(self.times) < 0).any():
            raise ContractError(f"cascade {self.id!r}: timestamps must be non-decreasing")

    def __len__(self) -> int:
        return len(self.users)

    @property
    def events(self) -> List[Tuple[int, float]]:
        return list(zip(self.users.tolist(), self.times.tolist()))

    @property
    def span(self) -> float:
        return float(self.times[-1] - self.times[0]) if len(self.times) else 0.0


@dataclass
class CascadeCorpus:
    cascades: List[Cascade]
    vocab: Vocab
    t_max: Optional[float] = None
    dropped: int = 0

    def __post_init__(self):
        if self.t_max is None:
            self.t_max = max((c.span for c in self.cascades), default=0.0)

    @property
    def n_users(self) -> int:
        return len(self.vocab)

    @property
    def n_cascades(self) -> int:
        return len(self.cascades)

    def __len__(self) -> int:
        return len(self.cascades)

    def __iter__(self):
        return iter(self.cascades)

    def subset(self, indices: Sequence[int]) -> "CascadeCorpus":
        """Cascades at ``indices``, sharing this corpus' vocab and ``t_max``."""
        return CascadeCorpus([self.cascades[i] for i in indices], self.vocab, t_max=self.t_max)

    def by_id(self) -> Dict[str, Cascade]:
        return {c.id: c for c in self.cascades}


@dataclass
class SocialGraph:
    adjacency: List[np.ndarray]
    directed: bool = False
    dropped_edges: int = 0
    self_loops: int = 0

    @property
    def n_nodes(self) -> int:
        return len(self.adjacency)

    @property
    def n_edges(self) -> int:
        arcs = sum(len(a) for a in self.adjacency)
        return arcs if self.directed else arcs // 2

    def degree(self, node: int) -> int:
        return len(self.adjacency[node])

    def neighbors(self, node: int) -> np.ndarray:
        return self.adjacency[node]

    def has_edge(self, u: int, v: int) -> bool:
        nbrs = self.adjacency[u]
        k = np.searchsorted(nbrs, v)
        return bool(k < len(nbrs) and nbrs[k] == v)

    @classmethod
    def from_edges(cls, n_nodes: int, edges: Iterable[Tuple[int, int]],
                   directed: bool = False) -> "SocialGraph":
        sets: List[set] = [set() for _ in range(n_nodes)]
        loops = 0
        for u, v in edges:
            if not (0 <= u < n_nodes and 0 <= v < n_nodes):
                raise ContractError(f"edge ({u}, {v}) outside [0, {n_nodes})")
            if u == v:
                loops += 1
                continue
            sets[u].add(v)
            if not directed:
                sets[v].add(u)
        adjacency = [np.array(sorted(s), dtype=np.int64) for s in sets]
        return cls(adjacency, directed=directed, self_loops=loops)

    def edges(self) -> List[Tuple[int, int]]:
        out = []
        for u, nbrs in enumerate(self.adjacency):
            for v in nbrs.tolist():
                if self.directed or u < v:
                    out.append((u, v))
        return out


@dataclass
class PrefixInstance:
    cascade_id: str
    length: int
    users: np.ndarray
    times: np.ndarray
    target: int


def _parse_cascade_line(line: str, path, lineno: int):
    cid, sep, rest = line.partition("\t")
    if not sep or not cid:
        raise ParseError("expected 'cascade_id<TAB>user,timestamp ...'", path, lineno)
    events = []
    for token in rest.split():
        raw, comma, ts = token.rpartition(",")
        if not comma or not raw:
            raise ParseError(f"malformed event token {token!r}", path, lineno)
        try:
            t = float(ts)
        except ValueError:
            raise ParseError(f"non-numeric timestamp {ts!r}", path, lineno) from None
        if not math.isfinite(t) or t < 0:
            raise ParseError(f"timestamp must be a finite non-negative number, got {ts!r}",
                             path, lineno)
        events.append((raw, t))
    return cid, events


def load_cascades(path) -> CascadeCorpus:
    """Read a cascade file into a corpus with a first-seen-order vocabulary.

    Events are stably sorted by timestamp, a user's repeated activations after
    the first are dropped, and cascades left with fewer than two events are
    discarded (counted in ``corpus.dropped``).
    """
    vocab = Vocab()
    cascades = []
    dropped = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            cid, events = _parse_cascade_line(line, path, lineno)
            events.sort(key=lambda e: e[1])
            seen = set()
            kept = []
            for raw, t in events:
                if raw not in seen:
                    seen.add(raw)
                    kept.append((raw, t))
            if len(kept) < 2:
                dropped += 1
                continue
            users = [vocab.add(raw) for raw, _ in kept]
            cascades.append(Cascade(cid, users, [t for _, t in kept]))
    if dropped:
        logger.warning("dropped %d cascade(s) shorter than 2 events from %s", dropped, path)
    return CascadeCorpus(cascades, vocab, dropped=dropped)


def save_cascades(corpus: CascadeCorpus, path) -> None:
    """Write ``corpus`` in the cascade file format; timestamps round-trip exactly."""
    with open(path, "w", encoding="utf-8") as fh:
        for c in corpus.cascades:
            events = " ".join(f"{corpus.vocab.raw(u)},{t!r}"
                              for u, t in zip(c.users.tolist(), c.times.tolist()))
            fh.write(f"{c.id}\t{events}\n")


def split_corpus(corpus: CascadeCorpus, ratios=(8, 1, 1), seed: int = 0):
    """Cascade-level train/valid/test split under a seeded shuffle.

    Sizes are ``floor(M*r0/sum)``, ``floor(M*r1/sum)`` and the remainder.
    """
    m = corpus.n_cascades
    if m < 10:
        raise ConfigError(f"need at least 10 cascades to split, got {m}")
    if len(ratios) != 3 or any(r < 0 for r in ratios) or sum(ratios) <= 0:
        raise ConfigError(f"bad split ratios {ratios!r}")
    total = sum(ratios)
    n_train = m * ratios[0] // total
    n_valid = m * ratios[1] // total
    perm = np.random.default_rng(seed).permutation(m)
    parts = (perm[:n_train], perm[n_train:n_train + n_valid], perm[n_train + n_valid:])
    return tuple(corpus.subset(sorted(p.tolist())) for p in parts)


def time_unit(t_max: float, n_bins: int) -> float:
    """Width of one time-decay interval; 1.0 when no cascade has a positive span."""
    return t_max / n_bins if t_max > 0 else 1.0


def time_bin(dt: float, unit: float, n_bins: int) -> int:
    """0-based bin of elapsed time ``dt``: ``clamp(ceil(dt/unit), 1, n_bins) - 1``."""
    if dt < 0:
        raise ContractError(f"elapsed time must be non-negative, got {dt}")
    if unit <= 0:
        raise ContractError(f"time unit must be positive, got {unit}")
    n = math.ceil(dt / unit)
    return min(max(n, 1), n_bins) - 1


def time_bins(dts: np.ndarray, unit: float, n_bins: int) -> np.ndarray:
    dts = np.asarray(dts, dtype=np.float64)
    if (dts < 0).any():
        raise ContractError("elapsed times must be non-negative")
    n = np.ceil(dts / unit).astype(np.int64)
    return np.clip(n, 1, n_bins) - 1


def load_graph(path, vocab: Vocab, directed: bool = False) -> SocialGraph:
    """Read an edge list over ``vocab``; edges touching unknown users are dropped."""
    edges = []
    dropped = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            parts = s.split()
            if len(parts) != 2:
                raise ParseError(f"expected two user ids, got {len(parts)} field(s)", path, lineno)
            u, v = vocab.get(parts[0]), vocab.get(parts[1])
            if u is None or v is None:
                dropped += 1
                continue
            edges.append((u, v))
    graph = SocialGraph.from_edges(len(vocab), edges, directed=directed)
    graph.dropped_edges = dropped
    if dropped:
        logger.info("dropped %d edge(s) with endpoints outside the vocabulary", dropped)
    return graph


def save_graph(graph: SocialGraph, vocab: Vocab, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for u, v in graph.edges():
            fh.write(f"{vocab.raw(u)} {vocab.raw(v)}\n")


def make_prefix_instances(cascade: Cascade, max_len: int = 200) -> List[PrefixInstance]:
    """One instance per observed prefix length ``1..min(n, max_len)-1``."""
    n = min(len(cascade), max_len)
    return [PrefixInstance(cascade.id, i, cascade.users[:i], cascade.times[:i],
                           int(cascade.users[i]))
            for i in range(1, n)]


def corpus_instances(corpus: Iterable[Cascade], max_len: int = 200) -> List[PrefixInstance]:
    out: List[PrefixInstance] = []
    for c in corpus:
        out.extend(make_prefix_instances(c, max_len))
    return out
