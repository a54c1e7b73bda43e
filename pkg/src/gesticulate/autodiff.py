"""Reverse-mode automatic differentiation over float64 numpy arrays.

A Tensor wraps an ndarray and records the op that produced it; backward()
walks the tape in reverse topological order. The op set is exactly what the
models here need: broadcast arithmetic, matmul, reductions, a few pointwise
nonlinearities, softmax, embedding lookup, time-axis gather/pad/repeat
(convolution building blocks), and a fused masked NLL.

Gradients are accumulated in float64; `no_grad()` suppresses tape building
for inference paths.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

_GRAD_ENABLED = [True]


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference paths)."""
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


def grad_enabled() -> bool:
    return _GRAD_ENABLED[-1]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # -- introspection ----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- autodiff machinery ------------------------------------------------
    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self, grad: np.ndarray | None = None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar tensor")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = grad if self.grad is None else self.grad + grad
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, -_wrap(other))

    def __rsub__(self, other):
        return add(_wrap(other), -self)

    def __truediv__(self, other):
        other = _wrap(other)
        return mul(self, power(other, -1.0))

    def __rtruediv__(self, other):
        return mul(_wrap(other), power(self, -1.0))

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- method sugar -------------------------------------------------------
    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _track(*parents: Tensor) -> bool:
    return grad_enabled() and any(p.requires_grad for p in parents)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if _track(*parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _accum(t: Tensor, g: np.ndarray):
    if t.requires_grad:
        t.grad = g.copy() if t.grad is None else t.grad + g


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


# -- arithmetic --------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data + b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _result(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data * b.data

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _result(data, (a, b), backward)


def power(a, exponent: float) -> Tensor:
    a = _wrap(a)
    if isinstance(exponent, Tensor):
        raise TypeError("power() exponent must be a python scalar")
    data = a.data ** exponent

    def backward(g):
        _accum(a, _unbroadcast(g * exponent * a.data ** (exponent - 1.0), a.data.shape))

    return _result(data, (a,), backward)


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must have at least 2 dimensions")
    data = a.data @ b.data

    def backward(g):
        _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
        _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))

    return _result(data, (a, b), backward)


# -- shape ops ----------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    a = _wrap(a)
    data = a.data.reshape(shape)

    def backward(g):
        _accum(a, g.reshape(a.data.shape))

    return _result(data, (a,), backward)


def transpose(a: Tensor, axes=None) -> Tensor:
    a = _wrap(a)
    if axes is not None:
        axes = tuple(ax % a.ndim for ax in axes)
    data = np.transpose(a.data, axes)
    inverse = None if axes is None else np.argsort(axes)

    def backward(g):
        _accum(a, np.transpose(g, inverse))

    return _result(data, (a,), backward)


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            index = [slice(None)] * g.ndim
            index[axis] = slice(start, stop)
            _accum(t, g[tuple(index)])

    return _result(data, tuple(tensors), backward)


# -- reductions ---------------------------------------------------------------

def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.data.shape).copy())

    return _result(data, (a,), backward)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    count = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])
    return reduce_sum(a, axis, keepdims) * (1.0 / float(count))


# -- pointwise nonlinearities ---------------------------------------------------

def sqrt(a) -> Tensor:
    a = _wrap(a)
    data = np.sqrt(a.data)

    def backward(g):
        _accum(a, g * 0.5 / np.maximum(data, 1e-300))

    return _result(data, (a,), backward)


def exp(a) -> Tensor:
    a = _wrap(a)
    data = np.exp(a.data)

    def backward(g):
        _accum(a, g * data)

    return _result(data, (a,), backward)


def log(a) -> Tensor:
    a = _wrap(a)
    data = np.log(a.data)

    def backward(g):
        _accum(a, g / a.data)

    return _result(data, (a,), backward)


def tanh(a) -> Tensor:
    a = _wrap(a)
    data = np.tanh(a.data)

    def backward(g):
        _accum(a, g * (1.0 - data * data))

    return _result(data, (a,), backward)


def relu(a) -> Tensor:
    a = _wrap(a)
    data = np.maximum(a.data, 0.0)

    def backward(g):
        _accum(a, g * (a.data > 0.0))

    return _result(data, (a,), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * data).sum(axis=axis, keepdims=True)
        _accum(a, data * (g - inner))

    return _result(data, (a,), backward)


# -- lookup and time-axis ops ----------------------------------------------------

def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup weight[ids]; gradients scatter-add into the table."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise TypeError("embedding ids must be integers")
    data = weight.data[ids]

    def backward(g):
        if weight.requires_grad:
            if weight.grad is None:
                weight.grad = np.zeros_like(weight.data)
            np.add.at(weight.grad, ids.reshape(-1),
                      g.reshape(-1, weight.data.shape[1]))

    return _result(data, (weight,), backward)


def gather_time(a: Tensor, idx: np.ndarray) -> Tensor:
    """Select time steps: a is (B, T, C), idx is (T_out, K) -> (B, T_out, K, C).

    The unfold step of a 1-D convolution; backward scatter-adds.
    """
    a = _wrap(a)
    if a.ndim != 3:
        raise ValueError(f"gather_time input must be (B, T, C), got {a.shape}")
    idx = np.asarray(idx)
    data = a.data[:, idx, :]

    def backward(g):
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            np.add.at(ga, (slice(None), idx), g)
            _accum(a, ga)

    return _result(data, (a,), backward)


def pad_time(a: Tensor, left: int, right: int) -> Tensor:
    """Zero-pad the time axis of (B, T, C)."""
    a = _wrap(a)
    if a.ndim != 3:
        raise ValueError(f"pad_time input must be (B, T, C), got {a.shape}")
    data = np.pad(a.data, ((0, 0), (left, right), (0, 0)))
    T = a.data.shape[1]

    def backward(g):
        _accum(a, g[:, left:left + T, :])

    return _result(data, (a,), backward)


def repeat_time(a: Tensor, n: int) -> Tensor:
    """Repeat each time step n times: (B, T, C) -> (B, T*n, C)."""
    a = _wrap(a)
    if a.ndim != 3:
        raise ValueError(f"repeat_time input must be (B, T, C), got {a.shape}")
    data = np.repeat(a.data, n, axis=1)
    B, T, C = a.data.shape

    def backward(g):
        _accum(a, g.reshape(B, T, n, C).sum(axis=2))

    return _result(data, (a,), backward)


def masked_nll(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean negative log-likelihood over masked rows of (N, V) logits.

    Fused log-softmax + gather + masked mean, with the standard
    (softmax - one_hot) backward, scaled by mask/count.
    """
    logits = _wrap(logits)
    targets = np.asarray(targets)
    mask = np.asarray(mask, dtype=bool)
    if logits.ndim != 2:
        raise ValueError(f"masked_nll expects (N, V) logits, got {logits.shape}")
    n = logits.data.shape[0]
    if targets.shape != (n,) or mask.shape != (n,):
        raise ValueError("targets and mask must be 1-D with one entry per logit row")
    count = int(mask.sum())
    if count == 0:
        raise ValueError("masked_nll needs at least one masked-in position")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    picked = shifted[np.arange(n), targets]
    per_row = lse - picked
    data = np.array((per_row * mask).sum() / count)

    def backward(g):
        if logits.requires_grad:
            p = np.exp(shifted - lse[:, None])
            p[np.arange(n), targets] -= 1.0
            p *= (mask / count)[:, None]
            _accum(logits, float(g) * p)

    return _result(data, (logits,), backward)


# -- verification -----------------------------------------------------------------

def gradcheck(loss_fn, params: list[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between backward() grads and central differences.

    Relative error per element is |analytic - numeric| / max(|analytic|,
    |numeric|, 1); returns the maximum across all elements of all params.
    """
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        num_flat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(loss_fn().data)
            flat[i] = orig - eps
            lo = float(loss_fn().data)
            flat[i] = orig
            num_flat[i] = (hi - lo) / (2.0 * eps)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
        worst = max(worst, float((np.abs(analytic - numeric) / denom).max()))
    return worst
