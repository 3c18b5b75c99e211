"""Dense float64 tensors, a define-by-run gradient tape, batch norm and Adam.

Every forward op records itself on the active :class:`Tape` when at least one
input requires a gradient. ``backward`` replays the tape in reverse append
order and returns gradients for trainable leaves only.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """A float64 array that may participate in a recorded computation.

    Leaves created with ``requires_grad=True`` are trainable parameters.
    Non-leaf tensors produced by recorded ops carry the index of their
    producing tape node in ``grad_id``.
    """

    __slots__ = ("data", "requires_grad", "grad_id", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad_id: int | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self.grad_id is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"expected a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --------------------------------------------------------------------------
# Tape
# --------------------------------------------------------------------------

@dataclass
class TapeNode:
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    # maps d(loss)/d(output) to one gradient (or None) per input
    vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


class Tape:
    """Append-only record of differentiable operations.

    Use as a context manager; ops executed inside the ``with`` block are
    recorded on this tape. Tapes nest, the innermost one is active.
    """

    def __init__(self) -> None:
        self.nodes: list[TapeNode] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _stack().pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, kind: str, inputs: tuple[Tensor, ...], out: Tensor, vjp) -> Tensor:
        out.requires_grad = True
        out.grad_id = len(self.nodes)
        self.nodes.append(TapeNode(kind, inputs, out, vjp))
        return out


_local = threading.local()


def _stack() -> list[Tape]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape() -> Tape | None:
    s = _stack()
    return s[-1] if s else None


def _emit(kind: str, inputs: tuple[Tensor, ...], out_data: np.ndarray, vjp) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = False
    out.grad_id = None
    out.name = None
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(kind, inputs, out, vjp)
    return out


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse-mode sweep from a scalar ``loss``.

    Returns ``{leaf: gradient}`` for every trainable leaf the loss depends
    on. Frozen leaves never appear because ops on them are not recorded.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    tape = active_tape()
    if loss.grad_id is None or tape is None:
        return {}
    if loss.grad_id >= len(tape.nodes) or tape.nodes[loss.grad_id].output is not loss:
        raise ValueError("loss was not recorded on the active tape")

    # keyed by id() of tensors; node outputs and leaves both live here
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes[: loss.grad_id + 1]):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.vjp(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if t.grad_id is None:
                leaves[key] = t
    return {leaves[k]: grads[k] for k in leaves}


# --------------------------------------------------------------------------
# Ops
# --------------------------------------------------------------------------

def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _broadcast_check(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    A, B = a.data, b.data

    def vjp(g):
        return g @ B.T, A.T @ g

    return _emit("matmul", (a, b), A @ B, vjp)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "add")
    sa, sb = a.shape, b.shape
    return _emit("add", (a, b), a.data + b.data,
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _emit("sub", (a, b), a.data - b.data,
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "mul")
    A, B = a.data, b.data

    def vjp(g):
        return _unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape)

    return _emit("mul", (a, b), A * B, vjp)


def elementwise(op: str, a, b) -> Tensor:
    fns = {"add": add, "sub": sub, "mul": mul}
    if op not in fns:
        raise ValueError(f"unknown elementwise op {op!r}")
    return fns[op](a, b)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit("relu", (x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


_TINY = np.finfo(np.float64).tiny


def softplus_np(x: np.ndarray) -> np.ndarray:
    # log(1 + e^x) underflows to 0 below about -745; keep it strictly positive
    return np.maximum(np.logaddexp(0.0, x), _TINY)


def softplus(x: Tensor) -> Tensor:
    X = x.data
    return _emit("softplus", (x,), softplus_np(X), lambda g: (g * sigmoid_np(X),))


def total_sum(x: Tensor) -> Tensor:
    shape = x.shape
    return _emit("sum", (x,), np.array(x.data.sum()), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size
    return _emit("mean", (x,), np.array(x.data.mean()),
                 lambda g: (np.full(shape, float(g) / n),))


def row_sum(x: Tensor) -> Tensor:
    """Sum over the last axis of an n x d tensor, giving shape (n,)."""
    shape = x.shape
    return _emit("row_sum", (x,), x.data.sum(axis=1),
                 lambda g: (np.broadcast_to(g[:, None], shape).copy(),))


def stack_mean(xs: Sequence[Tensor]) -> Tensor:
    """Arithmetic mean of equally shaped tensors."""
    if not xs:
        raise ValueError("stack_mean of an empty sequence")
    shape = xs[0].shape
    for t in xs:
        if t.shape != shape:
            raise ShapeError(f"stack_mean: shape {t.shape} differs from {shape}")
    k = len(xs)
    out = sum(t.data for t in xs) / k
    return _emit("stack_mean", tuple(xs), out, lambda g: tuple(g / k for _ in range(k)))


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    index = np.asarray(index, dtype=np.int64)
    n, shape = x.shape[0], x.shape
    if index.size and (index.min() < 0 or index.max() >= n):
        raise IndexError(f"gather_rows: index out of range for {n} rows")

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return _emit("gather_rows", (x,), x.data[index], vjp)


def segment_sum(x: Tensor, segments, num_segments: int) -> Tensor:
    """Sum rows of ``x`` into ``num_segments`` buckets; empty buckets are zero."""
    segments = np.asarray(segments, dtype=np.int64)
    if segments.shape != (x.shape[0],):
        raise ShapeError(f"segment_sum: {segments.shape[0] if segments.ndim else 0} segment ids "
                         f"for {x.shape[0]} rows")
    if segments.size and (segments.min() < 0 or segments.max() >= num_segments):
        raise IndexError(f"segment_sum: segment id out of range [0, {num_segments})")
    out = np.zeros((num_segments,) + x.shape[1:])
    np.add.at(out, segments, x.data)
    return _emit("segment_sum", (x,), out, lambda g: (g[segments],))


def bce_with_logits_masked(logits: Tensor, labels, mask) -> Tensor:
    """Mean binary cross-entropy over entries where ``mask`` is 1."""
    Y = np.asarray(labels.data if isinstance(labels, Tensor) else labels, dtype=np.float64)
    M = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=np.float64)
    Z = logits.data
    if Y.shape != Z.shape or M.shape != Z.shape:
        raise ShapeError(f"bce: logits {Z.shape}, labels {Y.shape}, mask {M.shape} must match")
    count = M.sum()
    if count <= 0:
        raise ValueError("bce_with_logits_masked: mask selects no entries")
    Y = np.where(M > 0, Y, 0.0)
    per = np.maximum(Z, 0.0) - Z * Y + np.log1p(np.exp(-np.abs(Z)))
    loss = float((per * M).sum() / count)

    def vjp(g):
        return (float(g) * (sigmoid_np(Z) - Y) * M / count,)

    return _emit("bce_masked", (logits,), np.array(loss), vjp)


# --------------------------------------------------------------------------
# Batch normalization
# --------------------------------------------------------------------------

@dataclass
class BatchNormState:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5
    mode: str = "train"

    @classmethod
    def fresh(cls, d: int, trainable: bool = True, name: str = "bn") -> "BatchNormState":
        return cls(
            gamma=Tensor(np.ones(d), requires_grad=trainable, name=f"{name}.gamma"),
            beta=Tensor(np.zeros(d), requires_grad=trainable, name=f"{name}.beta"),
            running_mean=np.zeros(d),
            running_var=np.ones(d),
        )

    def copy(self, trainable: bool | None = None, name: str | None = None) -> "BatchNormState":
        tg = self.gamma.requires_grad if trainable is None else trainable
        prefix = name or (self.gamma.name or "bn").rsplit(".", 1)[0]
        return BatchNormState(
            gamma=Tensor(self.gamma.data.copy(), requires_grad=tg, name=f"{prefix}.gamma"),
            beta=Tensor(self.beta.data.copy(), requires_grad=tg, name=f"{prefix}.beta"),
            running_mean=self.running_mean.copy(),
            running_var=self.running_var.copy(),
            momentum=self.momentum,
            eps=self.eps,
            mode=self.mode,
        )


def batchnorm(x: Tensor, state: BatchNormState) -> Tensor:
    """Per-feature normalization of an n x d batch followed by gamma/beta.

    Train mode uses biased batch variance and updates the running stats
    (unbiased variance) with ``state.momentum``; eval mode uses the running
    stats and is a fixed affine map.
    """
    X = x.data
    if X.ndim != 2 or X.shape[1] != state.gamma.shape[0]:
        raise ShapeError(f"batchnorm: input {X.shape} vs {state.gamma.shape[0]} features")
    n = X.shape[0]
    gamma, beta = state.gamma, state.beta
    G = gamma.data
    if state.mode == "train":
        if n < 2:
            raise ValueError("batchnorm in train mode needs at least 2 rows")
        mu = X.mean(axis=0)
        var = X.var(axis=0)
        inv = 1.0 / np.sqrt(var + state.eps)
        xhat = (X - mu) * inv
        m = state.momentum
        state.running_mean = (1 - m) * state.running_mean + m * mu
        state.running_var = (1 - m) * state.running_var + m * var * n / (n - 1)

        def vjp(g):
            dxhat = g * G
            dx = inv / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
            return dx, (g * xhat).sum(axis=0), g.sum(axis=0)
    elif state.mode == "eval":
        inv = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (X - state.running_mean) * inv

        def vjp(g):
            return g * G * inv, (g * xhat).sum(axis=0), g.sum(axis=0)
    else:
        raise ValueError(f"unknown batchnorm mode {state.mode!r}")
    return _emit("batchnorm", (x, gamma, beta), xhat * G + beta.data, vjp)


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)


def adam_step(params: Iterable[Tensor], grads: dict[Tensor, np.ndarray], state: AdamState) -> None:
    """One bias-corrected Adam update, in place on ``params``.

    Parameters without a gradient entry are left untouched, as are their
    moment buffers. Moments are keyed by position in ``params``, so pass the
    same ordered list every step.
    """
    params = list(params)
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for i, p in enumerate(params):
        g = grads.get(p)
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ShapeError(f"adam: grad shape {g.shape} vs param shape {p.data.shape}")
        m = state.m.get(i)
        v = state.v.get(i)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[i], state.v[i] = m, v
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class Adam:
    """Stateful wrapper binding a fixed parameter list to an :class:`AdamState`."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, **kw):
        self.params = list(params)
        self.state = AdamState(lr=lr, **kw)

    def step(self, grads: dict[Tensor, np.ndarray]) -> None:
        adam_step(self.params, grads, self.state)


# --------------------------------------------------------------------------
# Finite-difference checking
# --------------------------------------------------------------------------

def numeric_grad(fn: Callable[[], float], param: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. every entry of ``param``."""
    out = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    base = param.data
    for i in range(flat.size):
        for sign in (1, -1):
            pert = base.copy().reshape(-1)
            pert[i] += sign * step
            param.data = pert.reshape(base.shape)
            val = fn()
            out.reshape(-1)[i] += sign * val
        param.data = base
    return out / (2 * step)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """max|a - n| / max(max|a|, max|n|, floor) over one parameter tensor."""
    diff = np.max(np.abs(analytic - numeric)) if analytic.size else 0.0
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0), floor)
    return float(diff / scale)
