"""Dense tensors with reverse-mode gradients on a recorded tape.

Everything that trains in this project (tabular backbone, adapter factors,
condensation blocks, MI statistics network) goes through this engine. It is
deliberately small: float64 by default so finite-difference checks have
headroom, float32 available for faster experiment runs. Graphs are built
per forward pass and released by ``backward``.
"""
from __future__ import annotations

import json
import math
import os
import tempfile
from typing import Callable, Iterable, Sequence

import numpy as np

# Additive pre-softmax mask. Finite (so the non-finite guards stay usable)
# but large enough that exp(mask - rowmax) underflows to exactly 0.0.
MASK_VALUE = -1e30

_FINITE_CHECKS = True


def set_finite_checks(enabled: bool) -> None:
    """Toggle the per-op NaN/Inf guard (on by default)."""
    global _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)


class GraphReleasedError(RuntimeError):
    pass


class Tensor:
    """A numpy array plus an optional gradient tape node."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward_fn = None
        if _FINITE_CHECKS and not np.all(np.isfinite(arr)):
            raise FloatingPointError("non-finite values in tensor construction")

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


class Parameter(Tensor):
    """Trainable leaf tensor with a persistent gradient accumulator."""

    __slots__ = ("trainable",)

    def __init__(self, data, trainable: bool = True, dtype=None):
        super().__init__(data, requires_grad=trainable, dtype=dtype)
        self.trainable = trainable

    def freeze(self):
        self.trainable = False
        self.requires_grad = False
        self.grad = None
        return self

    def zero_grad(self):
        self.grad = None


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    if _FINITE_CHECKS and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite values produced by an op")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    track = any(p.requires_grad for p in parents)
    out.requires_grad = track
    if track:
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    else:
        out._parents = ()
        out._backward_fn = None
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        # copy: closures may hand out views or reuse buffers
        t.grad = np.array(g, dtype=t.data.dtype)
        if t.grad.shape != t.data.shape:
            t.grad = np.broadcast_to(t.grad, t.data.shape).copy()
    else:
        t.grad += g


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- arithmetic ---------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data + b.data

    def backward_fn(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _result(out_data, (a, b), backward_fn)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data - b.data

    def backward_fn(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _result(out_data, (a, b), backward_fn)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data * b.data

    def backward_fn(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _result(out_data, (a, b), backward_fn)


# Intentional non-finite results are caught by _result; keep numpy quiet here.
_QUIET = {"divide": "ignore", "invalid": "ignore", "over": "ignore"}


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    with np.errstate(**_QUIET):
        out_data = a.data / b.data

    def backward_fn(g):
        _accumulate(a, _unbroadcast(g / b.data, a.data.shape))
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _result(out_data, (a, b), backward_fn)


def power(a, p: float) -> Tensor:
    a = _wrap(a)
    out_data = a.data ** p

    def backward_fn(g):
        _accumulate(a, g * p * a.data ** (p - 1.0))

    return _result(out_data, (a,), backward_fn)


def sqrt(a) -> Tensor:
    a = _wrap(a)
    out_data = np.sqrt(a.data)

    def backward_fn(g):
        _accumulate(a, g * 0.5 / out_data)

    return _result(out_data, (a,), backward_fn)


def exp(a) -> Tensor:
    a = _wrap(a)
    with np.errstate(**_QUIET):
        out_data = np.exp(a.data)

    def backward_fn(g):
        _accumulate(a, g * out_data)

    return _result(out_data, (a,), backward_fn)


def log(a) -> Tensor:
    a = _wrap(a)
    with np.errstate(**_QUIET):
        out_data = np.log(a.data)

    def backward_fn(g):
        _accumulate(a, g / a.data)

    return _result(out_data, (a,), backward_fn)


def tanh(a) -> Tensor:
    a = _wrap(a)
    out_data = np.tanh(a.data)

    def backward_fn(g):
        _accumulate(a, g * (1.0 - out_data * out_data))

    return _result(out_data, (a,), backward_fn)


def relu(a) -> Tensor:
    a = _wrap(a)
    out_data = np.maximum(a.data, 0.0)

    def backward_fn(g):
        _accumulate(a, g * (a.data > 0.0))

    return _result(out_data, (a,), backward_fn)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    a = _wrap(a)
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * (x + 0.044715 * (x2 * x)))
    out_data = 0.5 * x * (1.0 + t)

    def backward_fn(g):
        dinner = _GELU_C * (1.0 + 0.134145 * x2)
        da = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
        _accumulate(a, g * da)

    return _result(out_data, (a,), backward_fn)


def clip(a, lo: float, hi: float) -> Tensor:
    """Hard clamp; gradient passes only through the interior."""
    a = _wrap(a)
    out_data = np.clip(a.data, lo, hi)

    def backward_fn(g):
        _accumulate(a, g * ((a.data > lo) & (a.data < hi)))

    return _result(out_data, (a,), backward_fn)


# -- linear algebra -----------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul requires >=2-D operands")
    out_data = np.matmul(a.data, b.data)

    def backward_fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        _accumulate(a, _unbroadcast(ga, a.data.shape))
        _accumulate(b, _unbroadcast(gb, b.data.shape))

    return _result(out_data, (a, b), backward_fn)


# -- shape ops ----------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    out_data = a.data.reshape(shape)

    def backward_fn(g):
        _accumulate(a, g.reshape(a.data.shape))

    return _result(out_data, (a,), backward_fn)


def transpose(a, axes=None) -> Tensor:
    a = _wrap(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    out_data = np.transpose(a.data, axes)
    inverse = np.argsort(axes)

    def backward_fn(g):
        _accumulate(a, np.transpose(g, inverse))

    return _result(out_data, (a,), backward_fn)


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = _wrap(a)
    axes = list(range(a.ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return transpose(a, tuple(axes))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(sl)])

    return _result(out_data, tuple(tensors), backward_fn)


def getitem(a, key) -> Tensor:
    """Indexing/gather; also serves as embedding lookup with an int array key."""
    a = _wrap(a)
    out_data = a.data[key]

    def backward_fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        _accumulate(a, full)

    return _result(np.array(out_data, copy=True), (a,), backward_fn)


def embedding_lookup(table, indices) -> Tensor:
    return getitem(table, np.asarray(indices))


# -- reductions ---------------------------------------------------------

def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.data.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.data.shape).copy())

    return _result(out_data, (a,), backward_fn)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        count = a.data.size
    else:
        count = a.data.shape[axis]

    def backward_fn(g):
        gs = g / count
        if axis is not None and not keepdims:
            gs = np.expand_dims(gs, axis)
        _accumulate(a, np.broadcast_to(gs, a.data.shape).copy())

    return _result(out_data, (a,), backward_fn)


# -- normalizers --------------------------------------------------------

def softmax(a, axis: int = -1) -> Tensor:
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        _accumulate(a, out_data * (g - dot))

    return _result(out_data, (a,), backward_fn)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse

    def backward_fn(g):
        soft = np.exp(out_data)
        _accumulate(a, g - soft * g.sum(axis=axis, keepdims=True))

    return _result(out_data, (a,), backward_fn)


def layer_norm(a, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance (no affine)."""
    a = _wrap(a)
    x = a.data
    m = x.mean(axis=-1, keepdims=True)
    d = x - m
    v = (d * d).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(v + eps)
    out_data = d * inv

    def backward_fn(g):
        # dx = inv * (g - mean(g) - y * mean(g*y)) over the last axis
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * out_data).mean(axis=-1, keepdims=True)
        _accumulate(a, inv * (g - gm - out_data * gy))

    return _result(out_data, (a,), backward_fn)


def dropout(a, rate: float, rng: np.random.Generator, training: bool = True) -> Tensor:
    a = _wrap(a)
    if not training or rate <= 0.0:
        return a
    keep = (rng.random(a.data.shape) >= rate) / (1.0 - rate)
    out_data = a.data * keep

    def backward_fn(g):
        _accumulate(a, g * keep)

    return _result(out_data, (a,), backward_fn)


# -- backward -----------------------------------------------------------

def _toposort(root: Tensor) -> list:
    order, stack, visited = [], [(root, False)], set()
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate gradients of every reachable tensor that requires them.

    The recorded graph is released afterwards; calling backward twice on
    the same graph raises GraphReleasedError.
    """
    if loss.data.size != 1:
        raise ValueError("backward requires a scalar loss")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any trainable parameter")
    if loss._backward_fn is None and loss._parents == () and not isinstance(loss, Parameter):
        raise GraphReleasedError("graph already released (backward called twice?)")

    order = _toposort(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        fn = node._backward_fn
        if fn is None:
            continue
        if fn is _RELEASED:
            raise GraphReleasedError("graph already released (backward called twice?)")
        fn(node.grad)
    for node in order:
        if not isinstance(node, Parameter) and node._backward_fn is not None:
            node._backward_fn = _RELEASED
            node._parents = ()


def _RELEASED(_):  # sentinel; never called
    raise GraphReleasedError("graph already released")


# -- optimizer ----------------------------------------------------------

class Adam:
    """Adaptive-moment optimizer over Parameter leaves."""

    def __init__(self, params: Iterable[Parameter], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = [p for p in params if isinstance(p, Parameter)]
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for p, m, v in zip(self.params, self._m, self._v):
            if not p.trainable or p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def adam_step(optimizer: Adam) -> None:
    """One optimizer step followed by gradient reset."""
    optimizer.step()
    optimizer.zero_grad()


# -- checkpoints --------------------------------------------------------

CHECKPOINT_FORMAT = "tabii.checkpoint"
CHECKPOINT_VERSION = 1


def save_checkpoint(path: str, arrays: dict, meta: dict | None = None) -> None:
    """Write named arrays to a versioned JSON file (value-exact round trip).

    json emits float64 via repr, which parses back bit-identically.
    """
    tensors = {}
    for name, value in arrays.items():
        arr = value.data if isinstance(value, Tensor) else np.asarray(value)
        tensors[name] = {
            "dtype": str(arr.dtype),
            "shape": list(arr.shape),
            "data": arr.ravel(order="C").tolist(),
        }
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "tensors": tensors,
    }
    atomic_write_json(path, payload)


def load_checkpoint(path: str) -> tuple[dict, dict]:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not a checkpoint file: {path}")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    arrays = {}
    for name, rec in payload["tensors"].items():
        arrays[name] = np.array(rec["data"], dtype=rec["dtype"]).reshape(rec["shape"])
    return arrays, payload.get("meta", {})


def atomic_write_json(path: str, payload: dict) -> None:
    """Serialize deterministically and rename into place."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, sort_keys=True, separators=(",", ":"))
            fh.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
