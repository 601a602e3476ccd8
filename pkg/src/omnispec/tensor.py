"""Dense float64 tensors with reverse-mode differentiation.

The engine supplies exactly the operations the model needs: batched matmul,
softmax/log-softmax, layer norm, GELU, elementwise arithmetic with numpy
broadcasting, reductions, gather/concat, and a few conveniences. Values are
numpy arrays; recorded operations form a graph that ``backward`` linearizes
into a :class:`Tape` and replays in reverse.

Gradient semantics: ``backward`` accumulates into ``.grad`` of every leaf
tensor with ``requires_grad=True``. Calling backward twice without zeroing
doubles the gradients; training loops zero explicitly between steps.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ShapeError, ValidationError

_GRAD_ENABLED = True

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class no_grad:
    """Context manager: operations inside record no graph."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    """n-d float64 value, optionally a node in a differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; scalars are folded in without creating graph leaves
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, mul_scalar(other, -1.0))
        return add_scalar(self, -other)

    def __rsub__(self, other):
        return add_scalar(mul_scalar(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else mul_scalar(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ValidationError("tensor/tensor division is not part of the op set")
        return mul_scalar(self, 1.0 / other)

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(data: np.ndarray, parents: tuple[Tensor, ...],
          backward: Callable[[np.ndarray], tuple]) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tape:
    """Topologically ordered record of the operations below one root.

    Construction walks the graph once (iterative post-order, so every
    entry's inputs precede it); ``run_backward`` then visits entries exactly
    once in reverse order.
    """

    def __init__(self, root: Tensor):
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
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.entries = order
        self._root = root

    def __len__(self) -> int:
        return len(self.entries)

    def run_backward(self) -> None:
        grads: dict[int, np.ndarray] = {id(self._root): np.ones_like(self._root.data)}
        for node in reversed(self.entries):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._parents:
                parent_grads = node._backward(g)
                for p, pg in zip(node._parents, parent_grads):
                    if pg is None or not p.requires_grad:
                        continue
                    acc = grads.get(id(p))
                    grads[id(p)] = pg if acc is None else acc + pg
            elif node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every requires-grad leaf below loss."""
    if loss.size != 1:
        raise ValidationError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValidationError("loss does not depend on any requires-grad tensor")
    Tape(loss).run_backward()


# ---------------------------------------------------------------------------
# elementwise / arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _wrap(data, (a, b), back)


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _wrap(a.data + float(c), (a,), lambda g: (g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _wrap(data, (a, b), back)


def mul_scalar(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _wrap(a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0
    return _wrap(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sqrt(a: Tensor) -> Tensor:
    root = np.sqrt(a.data)
    return _wrap(root, (a,), lambda g: (g * (0.5 / root),))


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    cdf = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))
    data = a.data * cdf

    def back(g):
        pdf = np.exp(-0.5 * a.data * a.data) * _INV_SQRT2PI
        return (g * (cdf + a.data * pdf),)

    return _wrap(data, (a,), back)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _wrap(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    data = np.broadcast_to(a.data, shape)
    return _wrap(data, (a,), lambda g: (_unbroadcast(g, a.shape),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _wrap(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def swap_last2(a: Tensor) -> Tensor:
    return _wrap(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return _wrap(data, tuple(parts), back)


def take(a: Tensor, indices, axis: int) -> Tensor:
    """Gather rows along ``axis``; backward scatter-adds."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ValidationError("take expects a 1-d index list")
    data = np.take(a.data, idx, axis=axis)
    unique = np.unique(idx).size == idx.size

    def back(g):
        out = np.zeros(a.shape, dtype=np.float64)
        sl: list = [slice(None)] * a.data.ndim
        sl[axis] = idx
        if unique:
            out[tuple(sl)] = g
        else:
            np.add.at(out, tuple(sl), g)
        return (out,)

    return _wrap(data, (a,), back)


# ---------------------------------------------------------------------------
# reductions


def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    for a in axis:
        if not -ndim <= a < ndim:
            raise ValidationError(f"axis {a} out of range for ndim {ndim}")
    return tuple(a % ndim for a in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axis_tuple(axis, a.ndim)
    data = a.data.sum(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _wrap(data, (a,), back)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axis_tuple(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes]))
    return mul_scalar(tsum(a, axis=axes, keepdims=keepdims), 1.0 / n)


def variance(a: Tensor, axis, ddof: int = 0) -> Tensor:
    """Composed variance; ddof=1 gives the 1/(n-1) sample estimator."""
    axes = _axis_tuple(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes]))
    if n - ddof <= 0:
        raise ValidationError(f"variance needs more than {ddof} samples, got {n}")
    centered = a - tmean(a, axis=axes, keepdims=True)
    return mul_scalar(tsum(mul(centered, centered), axis=axes), 1.0 / (n - ddof))


# ---------------------------------------------------------------------------
# linear algebra / nn primitives


def _mm(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """np.matmul, but folding batched-lhs x flat-rhs into one large gemm."""
    if y.ndim == 2 and x.ndim > 2:
        lead = x.shape[:-1]
        return (x.reshape(-1, x.shape[-1]) @ y).reshape(*lead, y.shape[1])
    return np.matmul(x, y)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} x {b.shape}")
    data = _mm(a.data, b.data)

    def back(g):
        if b.ndim == 2 and a.ndim > 2:
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ b.data.T).reshape(a.shape)
            gb = a.data.reshape(-1, a.shape[-1]).T @ g2
            return ga, gb
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _wrap(data, (a, b), back)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    out = matmul(x, w)
    return add(out, b) if b is not None else out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = axis % x.ndim
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        gs = g * s
        return (gs - s * gs.sum(axis=axis, keepdims=True),)

    return _wrap(s, (x,), back)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = axis % x.ndim
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    ls = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def back(g):
        return (g - np.exp(ls) * g.sum(axis=axis, keepdims=True),)

    return _wrap(ls, (x,), back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Zero mean / unit variance over the last axis, then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm affine shapes {gain.shape}/{bias.shape} "
                         f"do not match feature dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = centered * inv
    data = y * gain.data + bias.data

    def back(g):
        ggain = _unbroadcast(g * y, gain.shape)
        gbias = _unbroadcast(g, bias.shape)
        gy = g * gain.data
        gx = inv * (gy - gy.mean(axis=-1, keepdims=True)
                    - y * (gy * y).mean(axis=-1, keepdims=True))
        return gx, ggain, gbias

    return _wrap(data, (x, gain, bias), back)


def cross_entropy(logits: Tensor, labels: np.ndarray,
                  ignore_index: int | None = None) -> Tensor:
    """Mean negative log-likelihood over rows; logits (N, K), labels (N,)."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy shapes: logits {logits.shape}, "
                         f"labels {labels.shape}")
    keep = np.ones(labels.shape[0], dtype=bool)
    if ignore_index is not None:
        keep = labels != ignore_index
    if not keep.any():
        raise ValidationError("cross_entropy: every label is ignored")
    onehot = np.zeros(logits.shape)
    onehot[np.nonzero(keep)[0], labels[keep].astype(int)] = 1.0
    ls = log_softmax(logits, axis=-1)
    picked = tsum(mul(ls, Tensor(onehot)))
    return mul_scalar(picked, -1.0 / int(keep.sum()))
