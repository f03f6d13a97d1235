"""Minimal dense-tensor engine with reverse-mode differentiation.

Every operation returns a new :class:`Tensor` that remembers its parents and a
closure computing the parents' gradients. Calling :func:`backward` on a scalar
walks the graph in reverse topological order (the :class:`Tape`) exactly once.

Only the operations needed by the encoder, the fusion layers and the
classifiers are provided. Broadcasting is limited to what numpy does for
elementwise ops; gradients are summed back to the operand shape.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, NumericError, TapeStateError

_DTYPES = {"f64": np.float64, "f32": np.float32}

# Verification mode checks every produced array for NaN/Inf.
_state = {"dtype": np.float64, "check_finite": True, "grad": True}


def set_precision(name: str) -> None:
    """Select ``"f64"`` (verification mode) or ``"f32"`` (fast mode)."""
    if name not in _DTYPES:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_DTYPES)}")
    _state["dtype"] = _DTYPES[name]
    _state["check_finite"] = name == "f64"


def get_dtype():
    return _state["dtype"]


class precision:
    """Context manager that temporarily switches precision."""

    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        self._saved = dict(_state)
        set_precision(self.name)
        return self

    def __exit__(self, *exc):
        _state.update(self._saved)
        return False


class no_grad:
    """Context manager disabling graph construction (inference only)."""

    def __enter__(self):
        self._saved = _state["grad"]
        _state["grad"] = False
        return self

    def __exit__(self, *exc):
        _state["grad"] = self._saved
        return False


def _check(data: np.ndarray, what: str) -> np.ndarray:
    if _state["check_finite"] and not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values produced by {what}")
    return data


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (undo numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Dense array node on the differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _backward: Callable | None = None):
        arr = np.asarray(data, dtype=_state["dtype"])
        self.data = _check(arr, name or "tensor construction")
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in _parents)
        self.name = name
        self._parents = _parents if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None
        self._consumed = False

    # -- basic protocol -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}{flag})"

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, what: str) -> Tensor:
    _check(data, what)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._consumed = False
    out.requires_grad = _state["grad"] and any(p.requires_grad for p in parents)
    out._parents = tuple(parents) if out.requires_grad else ()
    out._backward = backward if out.requires_grad else None
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad = t.grad + g


# -- elementwise ----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def _bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(out_data, (a, b), _bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def _bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), _bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def _bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), _bw, "mul")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: _accumulate(x, g * out), "exp")


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: _accumulate(x, g / x.data), "log")


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0.0).astype(x.data.dtype), (x,),
                 lambda g: _accumulate(x, g * pos), "relu")


def gelu(x: Tensor) -> Tensor:
    # tanh approximation
    c = math.sqrt(2.0 / math.pi)
    u = c * (x.data + 0.044715 * x.data ** 3)
    t = np.tanh(u)
    out = 0.5 * x.data * (1.0 + t)

    def _bw(g):
        du = c * (1.0 + 3 * 0.044715 * x.data ** 2)
        _accumulate(x, g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du))

    return _make(out, (x,), _bw, "gelu")


ACTIVATIONS = {"relu": relu, "gelu": gelu}


# -- shape ops --------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: _accumulate(x, g.reshape(old)), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,),
                 lambda g: _accumulate(x, np.transpose(g, inv)), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def _bw(g):
        for t, part in zip(tensors, np.split(g, splits, axis=ax)):
            _accumulate(t, part)

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, _bw, "concat")


def take_rows(x: Tensor, index) -> Tensor:
    """Gather along the first axis (``x[index]``); repeated indices accumulate."""
    index = np.asarray(index, dtype=np.int64)

    def _bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        _accumulate(x, full)

    return _make(x.data[index], (x,), _bw, "take_rows")


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def _bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g, x.shape))

    return _make(np.asarray(out), (x,), _bw, "sum")


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return tsum(x, axis, keepdims) * (1.0 / count)


# -- linear algebra ---------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product, batched over leading axes like ``np.matmul``.

    Gradient rule: ``da = g @ b^T``, ``db = a^T @ g`` (summed over broadcast batch axes).
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs at least 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def _bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _make(a.data @ b.data, (a, b), _bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` of shape (in, out)."""
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear expects last dim {weight.shape[0]}, got {x.shape}")
    lead = x.shape[:-1]
    out = matmul(reshape(x, (-1, x.shape[-1])), weight)
    if bias is not None:
        out = add(out, bias)
    return reshape(out, lead + (weight.shape[1],))


# -- normalisation and probabilities -----------------------------------------

def _softmax_np(x: np.ndarray, axis: int, mask: np.ndarray | None = None) -> np.ndarray:
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Stable softmax along ``axis``.

    ``mask`` (broadcastable boolean, True = keep) excludes entries as if they
    were -inf; every row must keep at least one entry.
    """
    if x.shape[axis] < 1:
        raise DimensionError("softmax over an empty axis")
    s = _softmax_np(x.data, axis, mask)

    def _bw(g):
        _accumulate(x, s * (g - np.sum(g * s, axis=axis, keepdims=True)))

    return _make(s, (x,), _bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def _bw(g):
        _accumulate(x, g - s * np.sum(g, axis=axis, keepdims=True))

    return _make(out, (x,), _bw, "log_softmax")


LN_EPS = 1e-5


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm affine params must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def _bw(g):
        if gain.requires_grad:
            _accumulate(gain, (g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            _accumulate(bias, g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gx = g * gain.data
            _accumulate(x, inv * (gx - gx.mean(axis=-1, keepdims=True)
                                  - xhat * (gx * xhat).mean(axis=-1, keepdims=True)))

    return _make(out, (x, gain, bias), _bw, "layer_norm")


# -- losses -----------------------------------------------------------------

def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean over all elements of the squared difference."""
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"mse_loss shapes differ: {pred.shape} vs {target.shape}")
    if pred.size == 0:
        raise DimensionError("mse_loss needs at least one element")
    diff = pred.data - target.data
    n = diff.size

    def _bw(g):
        _accumulate(pred, g * 2.0 * diff / n)
        _accumulate(target, -g * 2.0 * diff / n)

    return _make(np.asarray(np.mean(diff * diff)), (pred, target), _bw, "mse_loss")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-softmax of the true-class logit. ``logits`` is (B, K)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy expects (B,K) logits and B labels, got {logits.shape}, {labels.shape}")
    b, k = logits.shape
    if b == 0:
        raise DimensionError("cross_entropy on an empty batch")
    if labels.min() < 0 or labels.max() >= k:
        raise IndexError(f"label out of range [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(b)
    loss = -logp[rows, labels].mean()

    def _bw(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        _accumulate(logits, g * d / b)

    return _make(np.asarray(loss), (logits,), _bw, "cross_entropy")


# -- the tape ---------------------------------------------------------------

class Tape:
    """Reverse-topological ordering of every node reachable from a root."""

    def __init__(self, root: Tensor):
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        self.nodes = order  # parents before children
        self.index = {id(n): i for i, n in enumerate(order)}

    def __len__(self) -> int:
        return len(self.nodes)

    def reverse(self) -> Iterable[Tensor]:
        return reversed(self.nodes)


def backward(loss: Tensor) -> Tape:
    """Populate ``.grad`` on every ``requires_grad`` ancestor of ``loss``.

    A loss may be back-propagated once; call :func:`reset` (or build a new
    graph) before differentiating it again.
    """
    if loss.size != 1 or loss.ndim > 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise TapeStateError("backward already ran on this loss; call reset() first")
    tape = Tape(loss)
    loss.grad = np.ones_like(loss.data)
    for node in tape.reverse():
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    loss._consumed = True
    return tape


def reset(loss: Tensor) -> None:
    """Clear every gradient on the graph of ``loss`` so it can be differentiated again."""
    for node in Tape(loss).nodes:
        node.grad = None
    loss._consumed = False


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
