"""Input checks shared by the estimator and the CLI."""
from __future__ import annotations

from typing import List, Optional

import numpy as np

from .data import Cascade, CascadeCorpus, PrefixInstance, corpus_instances
from .exceptions import ConfigError, ContractError, ShapeError
from .graphembed import EmbeddingMatrix


def check_corpus(X) -> CascadeCorpus:
    if isinstance(X, CascadeCorpus):
        return X
    raise ContractError(f"expected a CascadeCorpus, got {type(X).__name__}")


def check_embeddings(emb, n_users: int) -> np.ndarray:
    rows = emb.rows if isinstance(emb, EmbeddingMatrix) else np.asarray(emb, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[0] != n_users:
        raise ShapeError(f"topological embeddings must have shape ({n_users}, d_g), got {rows.shape}")
    if not np.isfinite(rows).all():
        raise ContractError("topological embeddings contain non-finite values")
    return rows


def check_instances(X, n_users: int, max_len: Optional[int] = None) -> List[PrefixInstance]:
    """Accept prefix instances, cascades or a corpus; return validated instances."""
    if isinstance(X, CascadeCorpus):
        X = X.cascades
    items = list(X)
    if items and isinstance(items[0], Cascade):
        items = corpus_instances(items, max_len or max(len(c) for c in items))
    for inst in items:
        if not isinstance(inst, PrefixInstance):
            raise ContractError(f"expected PrefixInstance, got {type(inst).__name__}")
        if inst.length < 1 or len(inst.users) < inst.length:
            raise ContractError(f"instance from {inst.cascade_id!r} has an empty prefix")
        users = np.asarray(inst.users[:inst.length])
        if users.min() < 0 or users.max() >= n_users or not 0 <= inst.target < n_users:
            raise ContractError(f"instance from {inst.cascade_id!r} references a user outside [0, {n_users})")
    return items


def check_positive(name: str, value, allow_zero: bool = False):
    if value < 0 or (value == 0 and not allow_zero):
        raise ConfigError(f"{name} must be {'non-negative' if allow_zero else 'positive'}, got {value}")
    return value
