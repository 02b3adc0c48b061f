"""Dual-role two-level attention network for next-activated-user prediction.

All computation runs on padded batches of cascade prefixes. A batch row holds
one prefix ``c_i`` (positions ``0..i-1``, 0-based) and every representation is
recomputed from that prefix alone, so no event after ``t_i`` can leak into the
prediction of ``u_{i+1}``.

Shapes: ``B`` prefixes, ``L`` padded length, ``d`` role embedding size,
``d_g`` topological embedding size, ``T`` time bins, ``N`` users. Weight
matrices are stored as ``(out, in)`` and applied to row vectors as ``x @ W.T``.
"""
from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import numeric as nm
from .data import PrefixInstance, time_bins, time_unit
from .exceptions import CheckpointError, ConfigError, ContractError, ShapeError
from .graphembed import cosine_similarity_matrix
from .numeric import Tensor

CHECKPOINT_VERSION = 1

PARAM_NAMES = (
    "Xs", "Xr",
    "W_so", "W_rc", "W_ro", "W_sc",
    "W_ms", "W_mr", "W_ns", "W_nr", "b_m", "b_n",
    "W_g", "b_g", "W_t", "b_t", "w",
    "W_c", "b_c",
)
TOPOLOGY_PARAMS = ("W_g", "b_g")


class ModelParams:
    """Named float64 arrays; attribute access returns the array itself."""

    def __init__(self, arrays: Dict[str, np.ndarray]):
        missing = set(PARAM_NAMES) - set(arrays)
        if missing:
            raise ContractError(f"missing parameters: {sorted(missing)}")
        self.arrays = {k: np.ascontiguousarray(arrays[k], dtype=np.float64) for k in PARAM_NAMES}
        n, d = self.arrays["Xs"].shape
        d_g = self.arrays["W_g"].shape[1]
        n_bins = self.arrays["W_t"].shape[1]
        expected = param_shapes(n, d, d_g, n_bins)
        for k, shape in expected.items():
            if self.arrays[k].shape != shape:
                raise ShapeError(f"parameter {k} has shape {self.arrays[k].shape}, expected {shape}")

    def __getattr__(self, name):
        arrays = self.__dict__.get("arrays")
        if arrays is not None and name in arrays:
            return arrays[name]
        raise AttributeError(name)

    def __getitem__(self, name):
        return self.arrays[name]

    @property
    def n_users(self) -> int:
        return self.arrays["Xs"].shape[0]

    @property
    def d(self) -> int:
        return self.arrays["Xs"].shape[1]

    @property
    def d_g(self) -> int:
        return self.arrays["W_g"].shape[1]

    @property
    def n_bins(self) -> int:
        return self.arrays["W_t"].shape[1]

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.arrays.items()})

    def tensors(self, requires_grad: bool = False) -> Dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in self.arrays.items()}


def param_shapes(n_users: int, d: int, d_g: int, n_bins: int):
    sq = (d, d)
    return {
        "Xs": (n_users, d), "Xr": (n_users, d),
        "W_so": sq, "W_rc": sq, "W_ro": sq, "W_sc": sq,
        "W_ms": sq, "W_mr": sq, "W_ns": sq, "W_nr": sq, "b_m": (d,), "b_n": (d,),
        "W_g": (d, d_g), "b_g": (d,), "W_t": (d, n_bins), "b_t": (d,), "w": (d,),
        "W_c": (n_users, d), "b_c": (n_users,),
    }


def is_bias(name: str) -> bool:
    return name.startswith("b_")


def init_params(n_users: int, d: int = 64, d_g: int = 128, n_bins: int = 50,
                seed: int = 0) -> ModelParams:
    """Glorot-uniform weights and zero biases, deterministic under ``seed``."""
    if min(n_users, d, d_g, n_bins) <= 0:
        raise ConfigError("all dimensions must be positive")
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in param_shapes(n_users, d, d_g, n_bins).items():
        if is_bias(name):
            arrays[name] = np.zeros(shape)
        else:
            fan_out = shape[0]
            fan_in = shape[1] if len(shape) > 1 else 1
            a = np.sqrt(6.0 / (fan_in + fan_out))
            arrays[name] = rng.uniform(-a, a, size=shape)
    return ModelParams(arrays)


def zero_params(n_users: int, d: int, d_g: int, n_bins: int) -> ModelParams:
    return ModelParams({k: np.zeros(s) for k, s in param_shapes(n_users, d, d_g, n_bins).items()})


@dataclass
class ModelConfig:
    use_topology: bool = True
    dropout_keep: float = 0.8
    l2_lambda: float = 1e-5
    max_len: int = 200
    raw_logit_adjust: bool = False

    def __post_init__(self):
        if not 0.0 < self.dropout_keep <= 1.0:
            raise ConfigError(f"dropout_keep must be in (0, 1], got {self.dropout_keep}")
        if self.l2_lambda < 0:
            raise ConfigError(f"l2_lambda must be non-negative, got {self.l2_lambda}")
        if self.max_len < 2:
            raise ConfigError(f"max_len must be at least 2, got {self.max_len}")


@dataclass
class PrefixBatch:
    users: np.ndarray    # (B, L) int, padding = 0
    bins: np.ndarray     # (B, L) int time-bin index
    mask: np.ndarray     # (B, L) bool, true on observed positions
    sim: np.ndarray      # (B, L, L) social similarity, all ones without topology
    topo: Optional[np.ndarray]  # (B, L, d_g) raw topological rows
    targets: Optional[np.ndarray]  # (B,) int

    @property
    def size(self) -> int:
        return self.users.shape[0]

    @property
    def lengths(self) -> np.ndarray:
        return self.mask.sum(axis=1)


def make_batch(instances: Sequence[PrefixInstance], t_max: float, n_bins: int,
               topo: Optional[np.ndarray] = None) -> PrefixBatch:
    """Pad prefixes into a batch; ``topo`` is the full ``(N, d_g)`` embedding table."""
    if not instances:
        raise ContractError("empty batch")
    b = len(instances)
    lengths = [inst.length for inst in instances]
    width = max(lengths)
    users = np.zeros((b, width), dtype=np.int64)
    bins = np.zeros((b, width), dtype=np.int64)
    mask = np.zeros((b, width), dtype=bool)
    unit = time_unit(t_max, n_bins)
    for r, inst in enumerate(instances):
        i = inst.length
        users[r, :i] = inst.users[:i]
        mask[r, :i] = True
        bins[r, :i] = time_bins(inst.times[i - 1] - inst.times[:i], unit, n_bins)
    targets = np.array([inst.target for inst in instances], dtype=np.int64)
    if topo is None:
        sim = np.ones((b, width, width))
        raw = None
    else:
        raw = np.asarray(topo, dtype=np.float64)[users] * mask[..., None]
        sim = cosine_similarity_matrix(raw)
    return PrefixBatch(users, bins, mask, sim, raw, targets)


def _linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    out = nm.matmul(x, nm.transpose(weight))
    return out if bias is None else out + bias


def _role_attention(query_emb, key_emb, w_query, w_key, support, sim, raw_logit_adjust):
    """Attention of each position (query) over its support (keys).

    Returns the raw attention and the similarity-adjusted attention, both
    ``(B, L, L)`` with row = attending position, column = attended position.
    """
    scores = nm.matmul(_linear(query_emb, w_query), nm.transpose(_linear(key_emb, w_key)))
    raw = nm.softmax(scores, support, allow_empty=True)
    if raw_logit_adjust:
        adjusted = nm.softmax(scores * sim, support, allow_empty=True)
    else:
        adjusted = nm.softmax(raw * sim, support, allow_empty=True)
    return raw, adjusted


def receiver_support(mask: np.ndarray) -> np.ndarray:
    """``support[b, j, k]``: position k precedes j in the prefix."""
    length = mask.shape[1]
    before = np.tril(np.ones((length, length), dtype=bool), k=-1)
    return before[None] & mask[:, None, :] & mask[:, :, None]


def sender_support(mask: np.ndarray) -> np.ndarray:
    """``support[b, j, k]``: position k follows j within the prefix."""
    length = mask.shape[1]
    after = np.triu(np.ones((length, length), dtype=bool), k=1)
    return after[None] & mask[:, None, :] & mask[:, :, None]


def receiver_roles(p: Dict[str, Tensor], xs: Tensor, xr: Tensor, mask, sim,
                   raw_logit_adjust=False):
    """Receiver-role representation of every position, from its predecessors.

    A position without predecessors keeps only its own receiver embedding.
    """
    raw, alpha = _role_attention(xr, xs, p["W_rc"], p["W_so"], receiver_support(mask), sim,
                                 raw_logit_adjust)
    return nm.matmul(alpha, xs) + xr, raw, alpha


def sender_roles(p: Dict[str, Tensor], xs: Tensor, xr: Tensor, mask, sim,
                 raw_logit_adjust=False):
    """Sender-role representation of every position, from its successors."""
    raw, alpha = _role_attention(xs, xr, p["W_sc"], p["W_ro"], sender_support(mask), sim,
                                 raw_logit_adjust)
    return nm.matmul(alpha, xr) + xs, raw, alpha


def fuse(p: Dict[str, Tensor], ds: Tensor, dr: Tensor) -> Tensor:
    m = nm.sigmoid(_linear(ds, p["W_ms"]) + _linear(dr, p["W_mr"]) + p["b_m"])
    n = nm.sigmoid(_linear(ds, p["W_ns"]) + _linear(dr, p["W_nr"]) + p["b_n"])
    return (1.0 - m) * ds + (1.0 - n) * dr


def project_topology_t(p: Dict[str, Tensor], raw_topo) -> Tensor:
    return nm.tanh(_linear(nm.as_tensor(raw_topo), p["W_g"], p["b_g"]))


def one_hot_bins(bins: np.ndarray, n_bins: int) -> np.ndarray:
    return (bins[..., None] == np.arange(n_bins)).astype(np.float64)


def time_gate_t(p: Dict[str, Tensor], one_hots) -> Tensor:
    one_hots = np.asarray(one_hots, dtype=np.float64)
    if not (np.isin(one_hots, (0.0, 1.0)).all() and (one_hots.sum(axis=-1) == 1).all()):
        raise ContractError("time-decay input must be one-hot over the last axis")
    return nm.sigmoid(_linear(nm.Tensor(one_hots), p["W_t"], p["b_t"]))


@dataclass
class ForwardResult:
    """Numpy views of one batched forward pass (rows are prefixes)."""

    probs: np.ndarray   # (B, N)
    beta: np.ndarray    # (B, L)
    dr: np.ndarray
    ds: np.ndarray
    u: np.ndarray
    f: np.ndarray
    c: np.ndarray       # (B, d)
    alpha_receiver: np.ndarray  # attention over predecessors, (B, L, L)
    alpha_sender: np.ndarray    # attention over successors, (B, L, L)
    alpha_receiver_raw: np.ndarray
    alpha_sender_raw: np.ndarray
    lambdas: np.ndarray
    g: Optional[np.ndarray]


def _dropout(x: Tensor, keep: float, rng) -> Tensor:
    if rng is None or keep >= 1.0:
        return x
    return x * ((rng.random(x.shape) < keep) / keep)


def forward_tensors(p: Dict[str, Tensor], batch: PrefixBatch, config: ModelConfig,
                    rng: Optional[np.random.Generator] = None) -> Dict[str, Tensor]:
    """Full forward pass on tensors; dropout is active only when ``rng`` is given."""
    mask = batch.mask
    b, length = mask.shape
    xs = nm.gather(p["Xs"], batch.users)
    xr = nm.gather(p["Xr"], batch.users)
    if config.use_topology:
        if batch.topo is None:
            raise ContractError("topology-aware model needs topological embeddings")
        sim = batch.sim
    else:
        sim = np.ones((b, length, length))

    dr, a_r_raw, a_r = receiver_roles(p, xs, xr, mask, sim, config.raw_logit_adjust)
    ds, a_s_raw, a_s = sender_roles(p, xs, xr, mask, sim, config.raw_logit_adjust)
    u = _dropout(fuse(p, ds, dr), config.dropout_keep, rng)

    lam = time_gate_t(p, one_hot_bins(batch.bins, p["W_t"].shape[1]))
    if config.use_topology:
        g = project_topology_t(p, batch.topo)
        f = lam * (g + u)
    else:
        g = None
        f = lam * u
    f = _dropout(f, config.dropout_keep, rng)

    d = p["w"].shape[0]
    scores = nm.reshape(nm.matmul(f, nm.reshape(p["w"], (d, 1))), (b, length))
    beta = nm.softmax(scores, mask)
    c = nm.reshape(nm.matmul(nm.reshape(beta, (b, 1, length)), f), (b, d))
    logits = _linear(c, p["W_c"], p["b_c"])
    return {"xs": xs, "xr": xr, "dr": dr, "ds": ds, "u": u, "lambdas": lam, "g": g, "f": f,
            "beta": beta, "c": c, "logits": logits,
            "alpha_receiver": a_r, "alpha_sender": a_s,
            "alpha_receiver_raw": a_r_raw, "alpha_sender_raw": a_s_raw}


def output_probs(logits: np.ndarray, observed: Optional[np.ndarray] = None) -> np.ndarray:
    """Softmax over users; with ``observed`` (B, N) bool those users get 0 mass."""
    z = logits
    if observed is not None:
        z = np.where(observed, -np.inf, z)
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)
    return e / e.sum(axis=-1, keepdims=True)


def observed_mask(batch: PrefixBatch, n_users: int) -> np.ndarray:
    obs = np.zeros((batch.size, n_users), dtype=bool)
    rows = np.repeat(np.arange(batch.size), batch.users.shape[1])
    keep = batch.mask.reshape(-1)
    obs[rows[keep], batch.users.reshape(-1)[keep]] = True
    return obs


def forward(params: ModelParams, batch: PrefixBatch, config: ModelConfig,
            mask_observed: bool = False) -> ForwardResult:
    """Evaluation-mode forward pass (no dropout, no tape)."""
    out = forward_tensors(params.tensors(), batch, config)
    obs = observed_mask(batch, params.n_users) if mask_observed else None
    return ForwardResult(
        probs=output_probs(out["logits"].data, obs),
        beta=out["beta"].data, dr=out["dr"].data, ds=out["ds"].data, u=out["u"].data,
        f=out["f"].data, c=out["c"].data,
        alpha_receiver=out["alpha_receiver"].data, alpha_sender=out["alpha_sender"].data,
        alpha_receiver_raw=out["alpha_receiver_raw"].data,
        alpha_sender_raw=out["alpha_sender_raw"].data,
        lambdas=out["lambdas"].data, g=None if out["g"] is None else out["g"].data,
    )


def regularized_names(config: ModelConfig) -> List[str]:
    return [k for k in PARAM_NAMES
            if not is_bias(k) and (config.use_topology or k not in TOPOLOGY_PARAMS)]


def loss_tensor(p: Dict[str, Tensor], batch: PrefixBatch, config: ModelConfig,
                rng: Optional[np.random.Generator] = None) -> Tensor:
    """Mean negative log-likelihood of the targets plus L2 on weights and embeddings."""
    if batch.targets is None or batch.size == 0:
        raise ContractError("loss needs a non-empty batch with targets")
    out = forward_tensors(p, batch, config, rng)
    total = nm.mean(nm.softmax_cross_entropy(out["logits"], batch.targets))
    if config.l2_lambda > 0:
        reg = None
        for k in regularized_names(config):
            term = nm.sum(p[k] * p[k])
            reg = term if reg is None else reg + term
        total = total + reg * config.l2_lambda
    return total


def loss(params: ModelParams, batch: PrefixBatch, config: ModelConfig) -> float:
    return loss_tensor(params.tensors(), batch, config).item()


def loss_and_grads(params: ModelParams, batch: PrefixBatch, config: ModelConfig,
                   rng: Optional[np.random.Generator] = None):
    """Scalar loss and a gradient array for every parameter (zeros where unused)."""
    leaves = params.tensors(requires_grad=True)
    with nm.Tape() as tape:
        value = loss_tensor(leaves, batch, config, rng)
    tape.backward(value)
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
             for k, t in leaves.items()}
    return value.item(), grads


# Single-prefix views of the batched primitives. Positions are 0-based.

def _single(users, topo, params, sim=None):
    users = np.asarray(users, dtype=np.int64)[None]
    mask = np.ones(users.shape, dtype=bool)
    if sim is None:
        if topo is None:
            sim = np.ones((1, users.shape[1], users.shape[1]))
        else:
            sim = cosine_similarity_matrix(np.asarray(topo)[users])
    else:
        sim = np.asarray(sim, dtype=np.float64)[None]
    p = params.tensors()
    xs = nm.gather(p["Xs"], users)
    xr = nm.gather(p["Xr"], users)
    return p, xs, xr, mask, sim


def receiver_role(params: ModelParams, users, j: int, sim=None, topo=None,
                  raw_logit_adjust: bool = False) -> np.ndarray:
    """Receiver-role vector of position ``j`` of a prefix; ``sim`` is its E matrix."""
    if not 0 <= j < len(users):
        raise ContractError(f"position {j} outside prefix of length {len(users)}")
    p, xs, xr, mask, sim = _single(users, topo, params, sim)
    dr, _, _ = receiver_roles(p, xs, xr, mask, sim, raw_logit_adjust)
    return dr.data[0, j]


def sender_role(params: ModelParams, users, j: int, sim=None, topo=None,
                raw_logit_adjust: bool = False) -> np.ndarray:
    """Sender-role vector of position ``j`` of a prefix."""
    if not 0 <= j < len(users):
        raise ContractError(f"position {j} outside prefix of length {len(users)}")
    p, xs, xr, mask, sim = _single(users, topo, params, sim)
    ds, _, _ = sender_roles(p, xs, xr, mask, sim, raw_logit_adjust)
    return ds.data[0, j]


def fuse_gate(params: ModelParams, ds, dr) -> np.ndarray:
    """Fused vector(s) ``u`` from sender/receiver views; accepts ``(d,)`` or ``(n, d)``."""
    ds, dr = np.asarray(ds, dtype=np.float64), np.asarray(dr, dtype=np.float64)
    out = fuse(params.tensors(), nm.Tensor(np.atleast_2d(ds)), nm.Tensor(np.atleast_2d(dr))).data
    return out.reshape(ds.shape)


def project_topology(params: ModelParams, raw_topo, use_topology: bool = True) -> np.ndarray:
    if not use_topology:
        raise ContractError("project_topology called on a model without topology")
    return project_topology_t(params.tensors(), raw_topo).data


def time_gate(params: ModelParams, one_hots) -> np.ndarray:
    return time_gate_t(params.tensors(), one_hots).data


def cascade_encode(params: ModelParams, instance: PrefixInstance, config: ModelConfig,
                   t_max: float, topo: Optional[np.ndarray] = None):
    """``(c_i, beta)`` for one prefix."""
    batch = make_batch([instance], t_max, params.n_bins, topo if config.use_topology else None)
    res = forward(params, batch, config)
    return res.c[0], res.beta[0]


def predict(params: ModelParams, c, observed: Optional[Sequence[int]] = None) -> np.ndarray:
    """User distribution from a cascade vector; ``observed`` users are masked out."""
    logits = np.asarray(c, dtype=np.float64) @ params.W_c.T + params.b_c
    obs = None
    if observed is not None:
        obs = np.zeros(params.n_users, dtype=bool)
        obs[np.asarray(observed, dtype=np.int64)] = True
    return output_probs(logits[None], None if obs is None else obs[None])[0]


def save_checkpoint(path, params: ModelParams, config: ModelConfig, *, vocab_digest: str,
                    t_max: float, topo: Optional[np.ndarray] = None, extra=None) -> None:
    meta = {
        "format": "tandrud-checkpoint", "version": CHECKPOINT_VERSION,
        "n_users": params.n_users, "d": params.d, "d_g": params.d_g, "T": params.n_bins,
        "t_max": t_max, "vocab_digest": vocab_digest, "config": asdict(config),
    }
    if extra:
        meta.update(extra)
    arrays = {f"param/{k}": v for k, v in params.arrays.items()}
    if topo is not None:
        arrays["topo"] = np.asarray(topo, dtype=np.float64)
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path, vocab_digest: Optional[str] = None):
    """Returns ``(params, config, meta, topo)``; rejects a mismatched vocabulary."""
    try:
        z = np.load(path)
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from None
    with z:
        if "meta" not in z.files:
            raise CheckpointError(f"{path}: not a checkpoint (no metadata)")
        meta = json.loads(z["meta"].tobytes().decode("utf-8"))
        if meta.get("format") != "tandrud-checkpoint" or meta.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint format/version")
        if vocab_digest is not None and meta["vocab_digest"] != vocab_digest:
            raise CheckpointError(f"{path}: checkpoint vocabulary does not match the data")
        params = ModelParams({k: z[f"param/{k}"] for k in PARAM_NAMES})
        topo = z["topo"] if "topo" in z.files else None
    config = ModelConfig(**meta["config"])
    return params, config, meta, topo
