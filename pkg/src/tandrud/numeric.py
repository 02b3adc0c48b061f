"""Dense float64 tensors with tape-based reverse-mode differentiation and Adam.

Only the handful of operations the cascade model needs are provided. Every
operation checks that its output is finite; a NaN or Inf raises
:class:`~tandrud.exceptions.NonFiniteError` at the op that produced it.

Recording happens only while a :class:`Tape` is active (``with Tape() as tape``)
and at least one input requires a gradient, so pure forward evaluation carries
no bookkeeping cost.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping, Optional

import numpy as np

from .exceptions import ContractError, EmptySupportError, NonFiniteError, ShapeError

__all__ = [
    "Tensor", "Tape", "AdamState", "as_tensor", "backward",
    "matmul", "add", "sub", "mul", "neg", "sigmoid", "tanh", "exp", "log",
    "sum", "mean", "reshape", "transpose", "softmax", "masked_softmax", "gather",
    "softmax_cross_entropy", "adam_step", "finite_diff_check",
]

_local = threading.local()


def _active_tape() -> Optional["Tape"]:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """A float64 array plus the flag saying whether gradients flow into it."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64, order="C")
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("op", "inputs", "output", "vjp")

    def __init__(self, op, inputs, output, vjp):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.vjp = vjp


class Tape:
    """Append-only record of operations, replayed in reverse by :meth:`backward`.

    A tape belongs to the thread that entered it and must not be shared while
    recording.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.gradients: Dict[int, np.ndarray] = {}

    def __enter__(self):
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def record(self, op: str, inputs, output: Tensor, vjp: Callable):
        self.nodes.append(_Node(op, inputs, output, vjp))

    def backward(self, loss: Tensor) -> Dict[Tensor, np.ndarray]:
        """Gradients of scalar ``loss`` for every leaf that requires one.

        Leaf ``.grad`` attributes are set as a side effect.
        """
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads = {id(loss): np.ones_like(loss.data)}
        produced = set()
        leaves: Dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            produced.add(id(node.output))
            g = grads.get(id(node.output))
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                leaves.setdefault(key, inp)
        self.gradients = grads
        out = {}
        for key, t in leaves.items():
            if key in produced:
                continue
            t.grad = grads[key]
            out[t] = grads[key]
        return out


def backward(tape: Tape, loss: Tensor) -> Dict[Tensor, np.ndarray]:
    return tape.backward(loss)


def _finite(op: str, arr: np.ndarray) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite value produced by {op}")
    return arr


def _emit(op: str, value: np.ndarray, inputs, vjp) -> Tensor:
    out = Tensor(_finite(op, value))
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape = _active_tape()
        if tape is not None:
            tape.record(op, inputs, out, vjp)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _swap(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2) if a.ndim >= 2 else a


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")

    def vjp(g):
        ga = _unbroadcast(g @ _swap(b.data), a.shape) if a.requires_grad else None
        gb = _unbroadcast(_swap(a.data) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _emit("matmul", np.matmul(a.data, b.data), (a, b), vjp)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _emit("mul", a.data * b.data, (a, b), vjp)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit("neg", -a.data, (a,), lambda g: (-g,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # two-branch form avoids overflow in exp for large |x|
    x = a.data
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _emit("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.data)
    return _emit("tanh", t, (a,), lambda g: (g * (1.0 - t * t),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    e = np.exp(a.data)
    return _emit("exp", e, (a,), lambda g: (g * e,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if (a.data <= 0).any():
        raise NonFiniteError("log of a non-positive value")
    return _emit("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit("sum", np.sum(a.data, axis=axis, keepdims=keepdims), (a,), vjp)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return mul(sum(a, axis=axis), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _emit("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = as_tensor(a)
    return _emit("transpose", _swap(a.data).copy(), (a,), lambda g: (_swap(g),))


def softmax(a, mask=None, allow_empty: bool = False) -> Tensor:
    """Softmax over the last axis, restricted to entries where ``mask`` is true.

    Masked-out entries come out exactly 0. A row with no true entry raises
    :class:`EmptySupportError` unless ``allow_empty``, in which case the row
    is all zeros.
    """
    a = as_tensor(a)
    z = a.data
    if mask is None:
        m = z.max(axis=-1, keepdims=True)
        e = np.exp(z - m)
        s = e / e.sum(axis=-1, keepdims=True)
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        support = mask.any(axis=-1, keepdims=True)
        if not allow_empty and not support.all():
            raise EmptySupportError("softmax over an empty support")
        zm = np.where(mask, z, -np.inf)
        m = np.where(support, zm.max(axis=-1, keepdims=True, initial=-np.inf), 0.0)
        e = np.where(mask, np.exp(zm - m), 0.0)
        s = e / np.where(support, e.sum(axis=-1, keepdims=True), 1.0)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", s, (a,), vjp)


def masked_softmax(logits, mask) -> Tensor:
    """Softmax of a vector over the positions where ``mask`` is true."""
    return softmax(logits, mask=mask)


def gather(table, index) -> Tensor:
    """Rows of ``table`` selected by an integer array of any shape.

    The backward pass scatter-adds into the selected rows only.
    """
    table = as_tensor(table)
    index = np.asarray(index, dtype=np.intp)
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise ShapeError(f"gather index out of range for table of shape {table.shape}")

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, index, g)
        return (gt,)

    return _emit("gather", table.data[index], (table,), vjp)


def softmax_cross_entropy(logits, targets) -> Tensor:
    """Per-row negative log-probability of ``targets`` under softmax(logits).

    Computed as logsumexp minus the target logit; never forms log(softmax).
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.intp)
    z = logits.data
    if z.ndim != 2 or targets.shape != (z.shape[0],):
        raise ShapeError(f"cross entropy expects (B, N) logits and (B,) targets, "
                         f"got {z.shape} and {targets.shape}")
    rows = np.arange(z.shape[0])
    m = z.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(z - m).sum(axis=1, keepdims=True))
    nll = lse[:, 0] - z[rows, targets]

    def vjp(g):
        p = np.exp(z - lse)
        p[rows, targets] -= 1.0
        return (p * g[:, None],)

    return _emit("softmax_cross_entropy", nll, (logits,), vjp)


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: Mapping[str, np.ndarray], **kw) -> "AdamState":
        return cls(m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()}, **kw)


def adam_step(params: Dict[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: AdamState, lr: float):
    """One bias-corrected Adam update, applied to ``params`` in place.

    Every gradient is checked before anything is modified, so a non-finite
    gradient leaves parameters and state untouched.
    """
    for name, g in grads.items():
        if name not in params:
            raise ContractError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, "
                             f"parameter has {params[name].shape}")
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}; update aborted")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        m = state.m.setdefault(name, np.zeros_like(params[name]))
        v = state.v.setdefault(name, np.zeros_like(params[name]))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def finite_diff_check(f: Callable[[Dict[str, Tensor]], Tensor],
                      params: Mapping[str, np.ndarray], h: float = 1e-5,
                      per_param: bool = False):
    """Compare tape gradients of ``f`` against central differences.

    ``f`` maps a dict of tensors to a scalar tensor and must be deterministic.
    The error for one coordinate is ``|a - n| / max(1, |a|, |n|)``. Returns the
    maximum over all coordinates, or a dict of per-parameter maxima when
    ``per_param`` is set.
    """
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    leaves = {k: Tensor(v.copy(), requires_grad=True, name=k) for k, v in base.items()}
    with Tape() as tape:
        loss = f(leaves)
    tape.backward(loss)

    errors = {}
    for name, value in base.items():
        analytic = leaves[name].grad
        if analytic is None:
            analytic = np.zeros_like(value)
        worst = 0.0
        for idx in np.ndindex(*value.shape):
            plus = {k: Tensor(v.copy()) for k, v in base.items()}
            minus = {k: Tensor(v.copy()) for k, v in base.items()}
            plus[name].data[idx] += h
            minus[name].data[idx] -= h
            numeric = (f(plus).item() - f(minus).item()) / (2.0 * h)
            a = float(analytic[idx])
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a), abs(numeric)))
        errors[name] = worst
    if per_param:
        return errors
    return max(errors.values()) if errors else 0.0
