"""
Dense tensors with reverse-mode differentiation.

Only the operations the encoder needs are implemented. Data lives in a
NumPy array (float32 for training, float64 for gradient checks); every op
records a closure mapping the output gradient to one gradient per parent.

Notes
-----
- Tensors are treated as immutable once produced. ``sgd_step`` swaps in a
  fresh value array instead of writing in place, so a stashed reference to
  an old array is never disturbed.
- There is no broadcasting apart from ``add_bias`` (a row vector added to
  every row of the last axis).
- Ops that keep hidden buffers alive for backward (layer_norm, cross_entropy)
  report their size in ``Tensor.saved_nbytes`` so memory accounting can
  include them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import (
    GraphAlreadyConsumed,
    LabelOutOfRange,
    NotScalar,
    ShapeMismatch,
)

DEFAULT_DTYPE = np.float32
LN_EPS = 1e-5

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    __slots__ = (
        "data",
        "requires_grad",
        "grad",
        "saved_nbytes",
        "_parents",
        "_backward",
        "_consumed",
    )

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE if dtype is None else dtype)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.saved_nbytes = 0
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[BackwardFn] = None
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __mul__(self, other: Tensor) -> Tensor:
        return mul(self, other)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)


def _result(data: np.ndarray, parents: Iterable[Tensor], backward: BackwardFn) -> Tensor:
    parents = tuple(parents)
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` may carry leading batch axes. ``b`` is either a plain matrix shared
    by every batch entry or carries the same leading axes as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch(f"matmul needs rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise ShapeMismatch(f"matmul batch dims differ: {a.shape} @ {b.shape}")
    A, B = a.data, b.data
    shared_rhs = B.ndim == 2

    def backward(g):
        ga = np.matmul(g, np.swapaxes(B, -1, -2))
        if shared_rhs:
            k, n = B.shape
            gb = A.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gb = np.matmul(np.swapaxes(A, -1, -2), g)
        return ga, gb

    return _result(np.matmul(A, B), (a, b), backward)


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    if x.ndim < 2:
        raise ShapeMismatch(f"transpose needs rank >= 2, got {x.shape}")
    return _result(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeMismatch(f"cannot reshape {x.shape} to {shape}")
    src = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeMismatch(f"bad permutation {axes} for rank {x.ndim}")
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Concatenate along ``axis``; all other axes must agree."""
    if not parts:
        raise ShapeMismatch("concat of zero tensors")
    if len(parts) == 1:
        return parts[0]
    ndim = parts[0].ndim
    ax = axis % ndim
    for p in parts[1:]:
        if p.ndim != ndim or p.shape[:ax] + p.shape[ax + 1 :] != parts[0].shape[:ax] + parts[0].shape[ax + 1 :]:
            raise ShapeMismatch(f"concat: incompatible shapes {parts[0].shape} and {p.shape}")
    bounds = np.cumsum([0] + [p.shape[ax] for p in parts])

    def backward(g):
        index = [slice(None)] * ndim
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            index[ax] = slice(lo, hi)
            out.append(g[tuple(index)])
        return out

    return _result(np.concatenate([p.data for p in parts], axis=ax), parts, backward)


def select(x: Tensor, axis: int, index: int) -> Tensor:
    """Pick one index along ``axis``, dropping that axis."""
    ax = axis % x.ndim
    shape = x.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        sl = [slice(None)] * len(shape)
        sl[ax] = index
        full[tuple(sl)] = g
        return (full,)

    return _result(np.take(x.data, index, axis=ax), (x,), backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``; gradient scatters back into the table."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeMismatch(f"embedding ids outside [0, {table.shape[0]})")
    rows, dim = table.shape

    def backward(g):
        gt = np.zeros((rows, dim), dtype=g.dtype)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, dim))
        return (gt,)

    return _result(table.data[ids], (table,), backward)


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a vector to every row along the last axis."""
    if bias.ndim != 1 or bias.shape[0] != x.shape[-1]:
        raise ShapeMismatch(f"bias {bias.shape} does not match last axis of {x.shape}")
    n = bias.shape[0]
    return _result(x.data + bias.data, (x, bias), lambda g: (g, g.reshape(-1, n).sum(axis=0)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    A, B = a.data, b.data
    return _result(A * B, (a, b), lambda g: (g * B, g * A))


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    return _result(x.data * c, (x,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, x.dtype.type(0)), (x,), lambda g: (g * mask,))


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return _result(np.asarray(x.data.sum(), dtype=x.dtype), (x,), lambda g: (np.full(shape, g, dtype=x.dtype),))


# ---------------------------------------------------------------------------
# Normalisation and losses
# ---------------------------------------------------------------------------


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis, computed with max subtraction."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _result(p, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then apply gain and bias."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeMismatch(f"layer_norm affine params must be ({d},)")
    X = x.data
    mean = X.mean(axis=-1, keepdims=True)
    centered = X - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = centered * inv_std
    G = gain.data

    def backward(g):
        dxhat = g * G
        dx = (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)) * inv_std
        dgain = (g * xhat).reshape(-1, d).sum(axis=0)
        dbias = g.reshape(-1, d).sum(axis=0)
        return dx, dgain, dbias

    out = _result(xhat * G + bias.data, (x, gain, bias), backward)
    out.saved_nbytes = xhat.nbytes
    return out


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of ``logits [B, C]`` against integer ``labels [B]``."""
    if logits.ndim != 2:
        raise ShapeMismatch(f"cross_entropy wants [B, C] logits, got {logits.shape}")
    labels = np.asarray(labels).astype(np.int64).reshape(-1)
    n, c = logits.shape
    if labels.shape[0] != n:
        raise ShapeMismatch(f"{labels.shape[0]} labels for {n} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise LabelOutOfRange(f"labels must lie in [0, {c})")
    Z = logits.data
    shifted = Z - Z.max(axis=-1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logsum
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()
    probs = np.exp(logp)

    def backward(g):
        d = probs.copy()
        d[rows, labels] -= 1
        return (d * (g / n),)

    out = _result(np.asarray(loss, dtype=logits.dtype), (logits,), backward)
    out.saved_nbytes = probs.nbytes
    return out


# ---------------------------------------------------------------------------
# Graph traversal
# ---------------------------------------------------------------------------


def graph_nodes(root: Tensor) -> list[Tensor]:
    """Every tensor reachable from ``root`` in topological order (parents first)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor, grad: Optional[np.ndarray] = None) -> None:
    """Populate ``.grad`` on every tensor with ``requires_grad`` reachable from ``root``.

    ``root`` must be a scalar unless an explicit output gradient ``grad`` is
    given (used by pipeline stages that receive gradients from downstream).
    The graph is released afterwards; a second call raises.
    """
    if root._consumed:
        raise GraphAlreadyConsumed("backward already ran through this graph")
    if grad is None:
        if root.size != 1:
            raise NotScalar(f"backward from non-scalar of shape {root.shape} needs an explicit gradient")
        seed = np.ones(root.shape, dtype=root.dtype)
    else:
        seed = np.asarray(grad, dtype=root.dtype)
        if seed.shape != root.shape:
            raise ShapeMismatch(f"seed gradient {seed.shape} vs output {root.shape}")

    order = graph_nodes(root)
    pending: dict[int, np.ndarray] = {id(root): seed}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None or not node.requires_grad:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is not None:
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg
    for node in order:
        if node._backward is not None:
            node._consumed = True
            node._backward = None
            node._parents = ()
    root._consumed = True


def activation_nbytes(root: Tensor, exclude: Iterable[Tensor] = ()) -> int:
    """Bytes held by the graph under ``root``, not counting ``exclude`` (the weights)."""
    skip = {id(t) for t in exclude}
    return int(
        np.sum([n.data.nbytes + n.saved_nbytes for n in graph_nodes(root) if id(n) not in skip], dtype=np.int64)
    )


# ---------------------------------------------------------------------------
# Parameters and the optimizer
# ---------------------------------------------------------------------------


@dataclass
class Parameter:
    """A named, versioned model weight."""

    name: str
    value: Tensor
    version: int = 0

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def nbytes(self) -> int:
        return self.value.data.nbytes

    def leaf(self) -> Tensor:
        """A fresh gradient-tracking leaf over the current value."""
        return Tensor(self.value.data, requires_grad=True)


def sgd_step(params: Sequence[Parameter], lr: float, grads: Sequence[np.ndarray]) -> None:
    """``value -= lr * grad`` for each parameter; bumps every version by one."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    if len(params) != len(grads):
        raise ShapeMismatch(f"{len(params)} parameters but {len(grads)} gradients")
    for p, g in zip(params, grads):
        g = np.asarray(g)
        if g.shape != p.shape:
            raise ShapeMismatch(f"{p.name}: gradient {g.shape} vs value {p.shape}")
    for p, g in zip(params, grads):
        cur = p.value.data
        p.value = Tensor(cur - cur.dtype.type(lr) * np.asarray(g, dtype=cur.dtype))
        p.version += 1
