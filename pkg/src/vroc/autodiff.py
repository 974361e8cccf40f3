"""Dense float64 tensors with taped reverse-mode differentiation.

Everything downstream (LSTMs, the text VAE, the task heads) is built from
the primitives in this module.  A ``Tensor`` wraps a numpy float64 array;
while a ``Tape`` is active, every primitive appends a node recording its
inputs, output and a backward rule, and ``backward`` replays the nodes in
exact reverse order.  The tape is rebuilt on every forward pass, so
variable-length sequences need no graph surgery.

Conventions:
  * all data is float64; integer index arrays (token ids, class indices)
    are passed as plain numpy arrays, not Tensors;
  * tapes are thread-confined (a thread-local stack of active tapes), so
    independent workers can differentiate in parallel;
  * backward never mutates arrays in place, which keeps replaying a tape
    bit-identical.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import threading

logger = logging.getLogger(__name__)

_TAPES = threading.local()


def _tape_stack() -> list:
    try:
        return _TAPES.stack
    except AttributeError:
        _TAPES.stack = []
        return _TAPES.stack


class Tensor:
    """A dense float64 array plus gradient bookkeeping.

    ``requires_grad`` marks trainable leaves; it propagates to every value
    computed from one.  ``grad`` is filled in by :func:`backward` and has
    the same shape as ``data``.
    """

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
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
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    # arithmetic sugar; python scalars are wrapped as constant tensors
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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)

    def reshape(self, shape):
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={tuple(self.shape)}, requires_grad={self.requires_grad}{tag})"


def param(data, name: str = "") -> Tensor:
    """A trainable leaf tensor."""
    return Tensor(data, requires_grad=True, name=name)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class TapeNode:
    op: str
    inputs: tuple
    output: Tensor
    backward: Callable  # maps output gradient -> tuple of input gradients


class Tape:
    """Ordered record of primitives applied while the tape is active.

    Nodes are appended in execution order, so each node's inputs precede
    it; the backward pass walks the list in exact reverse order.  Use as a
    context manager::

        with Tape() as tape:
            loss = f(params)
        grads = backward(tape, loss)
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self, "tapes must be exited in LIFO order"
        return False

    def __len__(self):
        return len(self.nodes)


def _record(op: str, inputs: tuple, out: Tensor, backward_fn: Callable):
    stack = _tape_stack()
    if stack and out.requires_grad:
        stack[-1].nodes.append(TapeNode(op, inputs, out, backward_fn))


def _needs_grad(*tensors) -> bool:
    return any(t.requires_grad for t in tensors)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient down to ``shape``, undoing numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(
            f"{op}: shapes {tuple(a.shape)} and {tuple(b.shape)} are not broadcastable"
        ) from None


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    """Elementwise sum; shapes must be numpy-broadcastable."""
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("add", a, b)
    out = Tensor(a.data + b.data, _needs_grad(a, b))
    _record("add", (a, b), out,
            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))
    return out


def sub(a, b) -> Tensor:
    """Elementwise difference; shapes must be numpy-broadcastable."""
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("sub", a, b)
    out = Tensor(a.data - b.data, _needs_grad(a, b))
    _record("sub", (a, b), out,
            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))
    return out


def mul(a, b) -> Tensor:
    """Elementwise product; shapes must be numpy-broadcastable."""
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("mul", a, b)
    out = Tensor(a.data * b.data, _needs_grad(a, b))
    _record("mul", (a, b), out,
            lambda g: (_unbroadcast(g * b.data, a.shape),
                       _unbroadcast(g * a.data, b.shape)))
    return out


def div(a, b) -> Tensor:
    """Elementwise quotient; shapes must be numpy-broadcastable."""
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("div", a, b)
    out = Tensor(a.data / b.data, _needs_grad(a, b))
    _record("div", (a, b), out,
            lambda g: (_unbroadcast(g / b.data, a.shape),
                       _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))
    return out


def matmul(a, b) -> Tensor:
    """Matrix product of a (m, k) by a (k, n); both operands must be 2-D."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(
            f"matmul: expected two 2-D operands, got shapes {tuple(a.shape)} and {tuple(b.shape)}"
        )
    if a.shape[1] != b.shape[0]:
        raise ValueError(
            f"matmul: inner dimensions differ for shapes {tuple(a.shape)} and {tuple(b.shape)}"
        )
    out = Tensor(a.data @ b.data, _needs_grad(a, b))
    _record("matmul", (a, b), out,
            lambda g: (g @ b.data.T, a.data.T @ g))
    return out


def sigmoid(x) -> Tensor:
    """Logistic function, computed via tanh for stability at large |x|."""
    x = _wrap(x)
    out = Tensor(0.5 * (1.0 + np.tanh(0.5 * x.data)), x.requires_grad)
    _record("sigmoid", (x,), out,
            lambda g, y=out.data: (g * y * (1.0 - y),))
    return out


def tanh(x) -> Tensor:
    x = _wrap(x)
    out = Tensor(np.tanh(x.data), x.requires_grad)
    _record("tanh", (x,), out,
            lambda g, y=out.data: (g * (1.0 - y * y),))
    return out


def exp(x) -> Tensor:
    x = _wrap(x)
    out = Tensor(np.exp(x.data), x.requires_grad)
    _record("exp", (x,), out,
            lambda g, y=out.data: (g * y,))
    return out


def log(x) -> Tensor:
    """Natural log; rejects non-positive inputs."""
    x = _wrap(x)
    if np.any(x.data <= 0.0):
        worst = float(np.min(x.data))
        raise ValueError(f"log: non-positive input (min value {worst})")
    out = Tensor(np.log(x.data), x.requires_grad)
    _record("log", (x,), out,
            lambda g: (g / x.data,))
    return out


def softmax(x, axis: int = -1) -> Tensor:
    """Softmax along ``axis``; rows sum to 1 and are strictly positive."""
    x = _wrap(x)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / np.sum(e, axis=axis, keepdims=True)
    out = Tensor(s, x.requires_grad)

    def bwd(g, y=s, ax=axis):
        return (y * (g - np.sum(g * y, axis=ax, keepdims=True)),)

    _record("softmax", (x,), out, bwd)
    return out


def log_softmax(x, axis: int = -1) -> Tensor:
    """log(softmax(x)) computed without forming the softmax first."""
    x = _wrap(x)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    out = Tensor(shifted - lse, x.requires_grad)

    def bwd(g, ax=axis):
        soft = np.exp(out.data)
        return (g - soft * np.sum(g, axis=ax, keepdims=True),)

    _record("log_softmax", (x,), out, bwd)
    return out


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    """Concatenate along ``axis``; all other dimensions must agree."""
    ts = [_wrap(t) for t in tensors]
    if not ts:
        raise ValueError("concat: need at least one tensor")
    base = list(ts[0].shape)
    for t in ts[1:]:
        other = list(t.shape)
        if len(other) != len(base) or any(
            i != axis and other[i] != base[i] for i in range(len(base))
        ):
            raise ValueError(
                f"concat: shape {tuple(t.shape)} incompatible with {tuple(ts[0].shape)} along axis {axis}"
            )
    out = Tensor(np.concatenate([t.data for t in ts], axis=axis), _needs_grad(*ts))
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, offsets, axis=axis))

    _record("concat", tuple(ts), out, bwd)
    return out


def slice_axis(x, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice [start:stop) along ``axis``."""
    x = _wrap(x)
    n = x.shape[axis]
    if not (0 <= start < stop <= n):
        raise ValueError(f"slice: bounds [{start}:{stop}) invalid for axis {axis} of size {n}")
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = Tensor(x.data[idx], x.requires_grad)

    def bwd(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        return (full,)

    _record("slice", (x,), out, bwd)
    return out


def embedding_lookup(table, ids) -> Tensor:
    """Gather rows ``ids`` from a 2-D ``table``; grads scatter-add back."""
    table = _wrap(table)
    if table.ndim != 2:
        raise ValueError(f"embedding_lookup: table must be 2-D, got shape {tuple(table.shape)}")
    ids = np.asarray(ids, dtype=np.intp)
    if ids.ndim != 1:
        raise ValueError(f"embedding_lookup: ids must be 1-D, got shape {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        bad = int(ids[(ids < 0) | (ids >= table.shape[0])][0])
        raise ValueError(f"embedding_lookup: id {bad} out of range [0, {table.shape[0]})")
    out = Tensor(table.data[ids], table.requires_grad)

    def bwd(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    _record("embedding_lookup", (table,), out, bwd)
    return out


def gather_cols(x, idx) -> Tensor:
    """Pick one column per row of a 2-D ``x``: out[i] = x[i, idx[i]]."""
    x = _wrap(x)
    if x.ndim != 2:
        raise ValueError(f"gather_cols: input must be 2-D, got shape {tuple(x.shape)}")
    idx = np.asarray(idx, dtype=np.intp)
    if idx.shape != (x.shape[0],):
        raise ValueError(f"gather_cols: index shape {idx.shape} does not match {x.shape[0]} rows")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[1]):
        raise ValueError(f"gather_cols: index out of range [0, {x.shape[1]})")
    rows = np.arange(x.shape[0])
    out = Tensor(x.data[rows, idx], x.requires_grad)

    def bwd(g):
        full = np.zeros_like(x.data)
        full[rows, idx] = g
        return (full,)

    _record("gather_cols", (x,), out, bwd)
    return out


def dropout(x, rate: float, rng: np.random.Generator, training: bool = True) -> Tensor:
    """Inverted dropout as a recorded mask multiply; identity when not training."""
    x = _wrap(x)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    out = Tensor(x.data * mask, x.requires_grad)
    _record("dropout", (x,), out, lambda g: (g * mask,))
    return out


def tsum(x, axis=None) -> Tensor:
    """Sum over all elements (axis=None) or one axis."""
    x = _wrap(x)
    out = Tensor(np.sum(x.data, axis=axis), x.requires_grad)

    def bwd(g):
        if axis is None:
            return (np.full(x.shape, g),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape),)

    _record("sum", (x,), out, bwd)
    return out


def tmean(x, axis=None) -> Tensor:
    """Mean over all elements (axis=None) or one axis."""
    x = _wrap(x)
    out = Tensor(np.mean(x.data, axis=axis), x.requires_grad)
    n = x.size if axis is None else x.shape[axis]

    def bwd(g):
        if axis is None:
            return (np.full(x.shape, g / n),)
        return (np.broadcast_to(np.expand_dims(g / n, axis), x.shape),)

    _record("mean", (x,), out, bwd)
    return out


def reshape(x, shape) -> Tensor:
    x = _wrap(x)
    out = Tensor(np.reshape(x.data, shape), x.requires_grad)
    _record("reshape", (x,), out, lambda g: (np.reshape(g, x.shape),))
    return out


def transpose(x) -> Tensor:
    """2-D transpose."""
    x = _wrap(x)
    if x.ndim != 2:
        raise ValueError(f"transpose: input must be 2-D, got shape {tuple(x.shape)}")
    out = Tensor(x.data.T, x.requires_grad)
    _record("transpose", (x,), out, lambda g: (g.T,))
    return out


def clamp(x, lo: float, hi: float) -> Tensor:
    """Clip values into [lo, hi]; gradient flows only strictly inside."""
    x = _wrap(x)
    out = Tensor(np.clip(x.data, lo, hi), x.requires_grad)
    inside = (x.data > lo) & (x.data < hi)
    _record("clamp", (x,), out, lambda g: (g * inside,))
    return out


PRIMITIVES = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "exp": exp,
    "log": log,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "concat": concat,
    "slice": slice_axis,
    "embedding_lookup": embedding_lookup,
    "gather_cols": gather_cols,
    "dropout": dropout,
    "sum": tsum,
    "mean": tmean,
    "reshape": reshape,
    "transpose": transpose,
    "clamp": clamp,
}


def apply_primitive(op_id: str, *args, **kwargs) -> Tensor:
    """Dispatch a primitive by name; unknown names are rejected."""
    try:
        fn = PRIMITIVES[op_id]
    except KeyError:
        raise ValueError(f"unknown primitive {op_id!r}") from None
    return fn(*args, **kwargs)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def backward(tape: Tape, loss: Tensor) -> dict:
    """Propagate d(loss)/d(leaf) through the tape.

    Returns a map {leaf tensor -> gradient array} over every requires_grad
    leaf that appears on the tape, and assigns each leaf's ``.grad``
    (overwriting, not accumulating).  Leaves that do not influence the
    loss get zeros.  The loss must be a scalar produced by this tape.
    """
    if loss.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {tuple(loss.shape)}")
    produced = {id(node.output) for node in tape.nodes}
    if id(loss) not in produced:
        raise ValueError("backward: loss was not produced on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g_out = grads.get(id(node.output))
        if g_out is None:
            continue
        for t, g in zip(node.inputs, node.backward(g_out)):
            if g is None or not t.requires_grad:
                continue
            prev = grads.get(id(t))
            grads[id(t)] = g if prev is None else prev + g

    result = {}
    for node in tape.nodes:
        for t in node.inputs:
            if t.requires_grad and id(t) not in produced and t not in result:
                g = grads.get(id(t))
                t.grad = g if g is not None else np.zeros_like(t.data)
                result[t] = t.grad
    return result


def grad_check(f: Callable, params: Sequence[Tensor], step: float = 1e-5) -> float:
    """Compare taped gradients of scalar ``f(*params)`` against central
    finite differences, returning the worst relative error
    |analytic - numeric| / max(1, |analytic|, |numeric|).

    ``f`` must be deterministic (freeze any noise before calling).
    """
    if step <= 0:
        raise ValueError("grad_check: step must be positive")
    with Tape() as tape:
        loss = f(*params)
    if loss.size != 1:
        raise ValueError("grad_check: f must be scalar-valued")
    gmap = backward(tape, loss)

    def value() -> float:
        return float(f(*params).data.reshape(()))

    worst = 0.0
    for pi, p in enumerate(params):
        if not p.requires_grad:
            continue
        analytic = gmap.get(p, np.zeros_like(p.data))
        for j, idx in enumerate(np.ndindex(p.data.shape)):
            orig = p.data[idx]
            p.data[idx] = orig + step
            f_plus = value()
            p.data[idx] = orig - step
            f_minus = value()
            p.data[idx] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = float(analytic[idx])
            if not (math.isfinite(a) and math.isfinite(numeric)):
                raise ValueError(
                    f"grad_check: non-finite value at parameter {pi} element {j}: "
                    f"analytic={a}, numeric={numeric}"
                )
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            if err > worst:
                worst = err
    return worst


# ---------------------------------------------------------------------------
# parameters and optimization
# ---------------------------------------------------------------------------

def uniform_init(rng: np.random.Generator, shape, scale: float, name: str = "") -> Tensor:
    return param(rng.uniform(-scale, scale, size=shape), name=name)


@dataclass
class Dense:
    """A dense layer y = x W^T + b with W of shape (n_out, n_in)."""
    w: Tensor
    b: Tensor


def init_dense(rng: np.random.Generator, n_out: int, n_in: int, name: str = "") -> Dense:
    k = 1.0 / math.sqrt(n_in)
    return Dense(
        w=uniform_init(rng, (n_out, n_in), k, name=f"{name}.w"),
        b=param(np.zeros(n_out), name=f"{name}.b"),
    )


def dense(x: Tensor, layer: Dense) -> Tensor:
    return add(matmul(x, transpose(layer.w)), layer.b)


class Adam:
    """Adam with bias correction; parameters are updated in place.

    Non-finite gradients skip the update for that tensor (reported via
    logging).  ``zero_grad`` clears gradients between steps.
    """

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                logger.warning("adam: non-finite gradient for %s (param %d), update skipped",
                            p.name or "<unnamed>", i)
                continue
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            m_hat = self.m[i] / (1.0 - self.beta1 ** self.t)
            v_hat = self.v[i] / (1.0 - self.beta2 ** self.t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def clip_global_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Rescale all gradients so their joint L2 norm is at most ``max_norm``.

    Returns the norm before clipping.  Gradients are replaced, not
    mutated in place.
    """
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    norm = math.sqrt(total)
    if norm > max_norm > 0:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm
