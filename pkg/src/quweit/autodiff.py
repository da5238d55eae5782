"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Every operation that touches a tensor with ``requires_grad`` leaves a
:class:`Record` on its output.  Records link back to their inputs, so the
graph reachable from a loss *is* the tape; :func:`backward` orders it
topologically, walks it once in reverse and then releases it.

Custom backward rules (used by the weightless block) are registered with
:func:`custom_op`.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "Parameter",
    "Record",
    "Tape",
    "TapeError",
    "custom_op",
    "backward",
    "no_grad",
    "precision",
    "default_dtype",
    "set_default_dtype",
    "matmul",
    "layer_norm",
    "softmax",
    "gelu",
    "sigmoid",
    "cross_entropy",
    "stack",
    "concat",
    "embedding",
    "where",
]

_DTYPE = np.dtype(np.float32)
_GRAD_ENABLED = True


class TapeError(RuntimeError):
    """Raised for invalid backward calls (detached, non-scalar, reused tape)."""


def default_dtype() -> np.dtype:
    return _DTYPE


def set_default_dtype(dtype) -> None:
    global _DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DTYPE = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default floating dtype (e.g. float64 for gradient checks)."""
    old = _DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


class Record:
    """One executed operation: its inputs and a rule mapping the output gradient to input gradients."""

    __slots__ = ("op", "inputs", "backward_fn", "released")

    def __init__(self, op: str, inputs: Sequence["Tensor"], backward_fn: Callable):
        self.op = op
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn
        self.released = False


class Tape:
    """Topologically ordered records reachable from one output tensor."""

    def __init__(self, root: "Tensor"):
        self.root = root
        self.order: list[Tensor] = []
        seen: set[int] = set()
        # iterative post-order DFS; recursion would overflow on deep graphs
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                self.order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            rec = t._record
            if rec is not None:
                for inp in reversed(rec.inputs):
                    if id(inp) not in seen:
                        stack.append((inp, False))

    def __len__(self) -> int:
        return sum(1 for t in self.order if t._record is not None)

    def records(self) -> list[Record]:
        return [t._record for t in self.order if t._record is not None]


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _as_tensor(x) -> "Tensor":
    return x if isinstance(x, Tensor) else Tensor(x)


class Tensor:
    """Dense real array with optional gradient tracking."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype if dtype is not None else _DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._record: Record | None = None

    # -- basics ---------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- arithmetic -----------------------------------------------------
    def __add__(self, other):
        other = _as_tensor(other)
        a, b = self, other
        return custom_op(
            a.data + b.data, (a, b),
            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")

    __radd__ = __add__

    def __sub__(self, other):
        other = _as_tensor(other)
        a, b = self, other
        return custom_op(
            a.data - b.data, (a, b),
            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")

    def __rsub__(self, other):
        return _as_tensor(other) - self

    def __mul__(self, other):
        other = _as_tensor(other)
        a, b = self, other
        return custom_op(
            a.data * b.data, (a, b),
            lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
            "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _as_tensor(other)
        a, b = self, other
        return custom_op(
            a.data / b.data, (a, b),
            lambda g: (_unbroadcast(g / b.data, a.shape),
                       _unbroadcast(-g * a.data / (b.data * b.data), b.shape)),
            "div")

    def __rtruediv__(self, other):
        return _as_tensor(other) / self

    def __neg__(self):
        return custom_op(-self.data, (self,), lambda g: (-g,), "neg")

    def __pow__(self, exponent: float):
        a = self
        return custom_op(
            a.data ** exponent, (a,),
            lambda g: (g * exponent * a.data ** (exponent - 1),), "pow")

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        a = self

        def bw(g):
            out = np.zeros_like(a.data)
            np.add.at(out, idx, g)
            return (out,)

        return custom_op(a.data[idx], (a,), bw, "getitem")

    # -- elementwise ----------------------------------------------------
    def exp(self):
        out = np.exp(self.data)
        return custom_op(out, (self,), lambda g: (g * out,), "exp")

    def log(self):
        a = self
        return custom_op(np.log(a.data), (a,), lambda g: (g / a.data,), "log")

    def tanh(self):
        out = np.tanh(self.data)
        return custom_op(out, (self,), lambda g: (g * (1 - out * out),), "tanh")

    def relu(self):
        a = self
        return custom_op(np.maximum(a.data, 0), (a,), lambda g: (g * (a.data > 0),), "relu")

    # -- shape ----------------------------------------------------------
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return custom_op(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),), "reshape")

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = tuple(np.argsort(axes))
        return custom_op(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),), "transpose")

    def swapaxes(self, a1: int, a2: int):
        return custom_op(np.swapaxes(self.data, a1, a2), (self,),
                         lambda g: (np.swapaxes(g, a1, a2),), "swapaxes")

    @property
    def T(self):
        return self.transpose()

    # -- reductions -----------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        a = self

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape).copy(),)

        return custom_op(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw, "sum")

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else np.prod([self.shape[i] for i in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)


class Parameter(Tensor):
    """A trainable tensor with a unique name, a learning-rate multiplier and a weight-decay flag."""

    def __init__(self, data, name: str, lr_mult: float = 1.0, decay: bool = True, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        if lr_mult <= 0:
            raise ValueError(f"lr multiplier must be > 0, got {lr_mult} for {name!r}")
        self.name = name
        self.lr_mult = float(lr_mult)
        self.decay = decay

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


def custom_op(out_data, inputs: Iterable[Tensor], backward_fn: Callable, name: str = "custom") -> Tensor:
    """Wrap ``out_data`` as a tensor whose gradient rule is ``backward_fn``.

    ``backward_fn(g)`` receives the output gradient and returns one gradient
    (or ``None``) per input, in order.
    """
    inputs = tuple(inputs)
    out_data = np.asarray(out_data)
    out = Tensor(out_data, dtype=out_data.dtype if out_data.dtype.kind == "f" else None)
    if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._record = Record(name, inputs, backward_fn)
    return out


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Run reverse-mode differentiation from a scalar ``loss``.

    Leaf tensors with ``requires_grad`` accumulate into ``.grad``; the returned
    map holds the gradient delivered by this call for each such leaf.  The
    tape is released afterwards, so a second call without a new forward pass
    raises :class:`TapeError`.
    """
    if loss.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._record is None:
        raise TapeError("loss is detached from the tape (no recorded operations)")
    tape = Tape(loss)
    records = tape.records()
    if any(r.released for r in records):
        raise TapeError("tape already consumed; run a new forward pass before backward")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[Tensor, np.ndarray] = {}
    for t in reversed(tape.order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        rec = t._record
        if rec is None:
            if t.requires_grad:
                leaves[t] = g
            continue
        in_grads = rec.backward_fn(g)
        for inp, ig in zip(rec.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            ig = np.asarray(ig, dtype=inp.data.dtype)
            if ig.shape != inp.shape:
                raise TapeError(f"op {rec.op!r} produced gradient {ig.shape} for input {inp.shape}")
            prev = grads.get(id(inp))
            grads[id(inp)] = ig if prev is None else prev + ig

    for rec in records:
        rec.released = True
        rec.backward_fn = _released
    for leaf, g in leaves.items():
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    return leaves


def _released(g):
    raise TapeError("tape already consumed")


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, leading axes broadcast."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return custom_op(a.data @ b.data, (a, b), bw, "matmul")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ValueError("eps must be > 0")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError(f"layer_norm expects gain/bias of shape ({d},), got {gain.shape}, {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        dxhat = g * gain.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return custom_op(out.astype(x.dtype, copy=False), (x, gain, bias), bw, "layer_norm")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"axis {axis} out of range for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return custom_op(s, (x,), bw, "softmax")


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: Tensor) -> Tensor:
    """x * Phi(x) with the exact Gaussian CDF."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = (x.data * cdf).astype(x.dtype, copy=False)

    def bw(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return custom_op(out, (x,), bw, "gelu")


def sigmoid(x: Tensor) -> Tensor:
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return custom_op(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under softmax(``logits``)."""
    v = logits.shape[-1]
    flat = logits.data.reshape(-1, v)
    t = np.asarray(targets).reshape(-1)
    if t.shape[0] != flat.shape[0]:
        raise ValueError(f"{t.shape[0]} targets for {flat.shape[0]} rows of logits")
    if t.size and (t.min() < 0 or t.max() >= v):
        raise IndexError(f"target out of range [0, {v})")
    t = t.astype(np.int64)
    b = flat.shape[0]
    m = flat.max(axis=1, keepdims=True)
    e = np.exp(flat - m)
    z = e.sum(axis=1, keepdims=True)
    lse = (np.log(z) + m)[:, 0]
    rows = np.arange(b)
    loss = (lse - flat[rows, t]).mean()

    def bw(g):
        p = e / z
        p[rows, t] -= 1.0
        return ((g * p / b).reshape(logits.shape),)

    return custom_op(np.asarray(loss, dtype=logits.dtype), (logits,), bw, "cross_entropy")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return custom_op(out, tensors, bw, "stack")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return custom_op(out, tensors, bw, "concat")


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]`` with a scatter-add backward."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"id out of range [0, {table.shape[0]})")

    def bw(g):
        out = np.zeros_like(table.data)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (out,)

    return custom_op(table.data[ids], (table,), bw, "embedding")


def where(mask, a: Tensor, b) -> Tensor:
    """Elementwise select; ``mask`` is a constant boolean array."""
    mask = np.asarray(mask, dtype=bool)
    a, b = _as_tensor(a), _as_tensor(b)
    out = np.where(mask, a.data, b.data).astype(a.dtype, copy=False)

    def bw(g):
        return (_unbroadcast(np.where(mask, g, 0), a.shape),
                _unbroadcast(np.where(mask, 0, g), b.shape))

    return custom_op(out, (a, b), bw, "where")
