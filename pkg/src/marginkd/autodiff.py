"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every operation on a :class:`Tensor` that requires gradients records a node
holding its parents and a closure mapping the output gradient to parent
gradients. ``backward`` replays those nodes in reverse topological order.
The graph is rebuilt on every forward pass.

Reductions accumulate strictly left to right along the reduced axis, so a
sum is bit-identical whether or not the axis carries trailing zero padding.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "NonFiniteError",
    "ShapeError",
    "no_grad",
    "is_grad_enabled",
    "tensor",
    "concat",
    "cosine_similarity",
    "layer_norm",
    "where",
    "finite_diff_check",
]


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite value produced by '{op}'")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _seq_sum(data: np.ndarray, axis: Optional[int], keepdims: bool) -> np.ndarray:
    if axis is None:
        flat = data.reshape(-1)
        out = np.add.accumulate(flat)[-1] if flat.size else np.float64(0.0)
        out = np.asarray(out, dtype=np.float64)
        return out.reshape((1,) * data.ndim) if keepdims else out
    axis = axis % data.ndim
    if data.shape[axis] == 0:
        return data.sum(axis=axis, keepdims=keepdims)
    acc = np.add.accumulate(data, axis=axis)
    out = np.take(acc, [data.shape[axis] - 1], axis=axis)
    return out if keepdims else np.squeeze(out, axis=axis)


def _as_tensor(x) -> "Tensor":
    return x if isinstance(x, Tensor) else Tensor(x)


class Tensor:
    """A dense float64 array participating in the gradient graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (),
                 _backward: Optional[Callable] = None, op: str = "leaf"):
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr, op)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op

    # -- construction -----------------------------------------------------

    @staticmethod
    def _node(data, parents: tuple, backward: Callable, op: str) -> "Tensor":
        track = is_grad_enabled() and any(p.requires_grad for p in parents)
        if track:
            return Tensor(data, True, parents, backward, op)
        return Tensor(data, op=op)

    # -- introspection ----------------------------------------------------

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
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op!r}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- elementwise arithmetic ------------------------------------------

    def __add__(self, other):
        other = _as_tensor(other)
        a, b = self, other
        try:
            out = a.data + b.data
        except ValueError as exc:
            raise ShapeError(str(exc)) from None
        return Tensor._node(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")

    __radd__ = __add__

    def __sub__(self, other):
        other = _as_tensor(other)
        a, b = self, other
        try:
            out = a.data - b.data
        except ValueError as exc:
            raise ShapeError(str(exc)) from None
        return Tensor._node(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")

    def __rsub__(self, other):
        return _as_tensor(other) - self

    def __mul__(self, other):
        other = _as_tensor(other)
        a, b = self, other
        try:
            out = a.data * b.data
        except ValueError as exc:
            raise ShapeError(str(exc)) from None

        def backward(g):
            return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

        return Tensor._node(out, (a, b), backward, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _as_tensor(other)
        a, b = self, other
        try:
            with np.errstate(divide="ignore", invalid="ignore"):
                out = a.data / b.data
        except ValueError as exc:
            raise ShapeError(str(exc)) from None

        def backward(g):
            return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

        return Tensor._node(out, (a, b), backward, "div")

    def __rtruediv__(self, other):
        return _as_tensor(other) / self

    def __neg__(self):
        a = self
        return Tensor._node(-a.data, (a,), lambda g: (-g,), "neg")

    def __pow__(self, p: float):
        a = self
        out = a.data ** p
        return Tensor._node(out, (a,), lambda g: (g * p * a.data ** (p - 1),), "pow")

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        a = self
        out = a.data[idx]
        basic = _is_basic_index(idx)

        def backward(g):
            full = np.zeros_like(a.data)
            if basic:
                full[idx] += g
            else:
                np.add.at(full, idx, g)
            return (full,)

        return Tensor._node(np.array(out), (a,), backward, "slice")

    # -- unary functions ---------------------------------------------------

    def exp(self):
        a = self
        with np.errstate(over="ignore"):
            out = np.exp(a.data)
        return Tensor._node(out, (a,), lambda g: (g * out,), "exp")

    def log(self):
        a = self
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.log(a.data)
        return Tensor._node(out, (a,), lambda g: (g / a.data,), "log")

    def sqrt(self):
        a = self
        out = np.sqrt(a.data)
        return Tensor._node(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")

    def tanh(self):
        a = self
        out = np.tanh(a.data)
        return Tensor._node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")

    def sigmoid(self):
        a = self
        out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
        return Tensor._node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")

    def softplus(self):
        """log(1 + exp(x)), evaluated without overflow."""
        a = self
        x = a.data
        out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
        sig = 0.5 * (1.0 + np.tanh(0.5 * x))
        return Tensor._node(out, (a,), lambda g: (g * sig,), "softplus")

    def gelu(self):
        # tanh approximation
        a = self
        x = a.data
        c = np.sqrt(2.0 / np.pi)
        x2 = x * x
        inner = c * (x + 0.044715 * x2 * x)
        t = np.tanh(inner)
        out = 0.5 * x * (1.0 + t)

        def backward(g):
            dinner = c * (1.0 + 3 * 0.044715 * x2)
            return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

        return Tensor._node(out, (a,), backward, "gelu")

    def abs(self):
        a = self
        return Tensor._node(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")

    # -- reductions --------------------------------------------------------

    def sum(self, axis: Optional[int] = None, keepdims: bool = False):
        a = self
        out = _seq_sum(a.data, axis, keepdims)

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape).copy(),)

        return Tensor._node(out, (a,), backward, "sum")

    def mean(self, axis: Optional[int] = None, keepdims: bool = False):
        n = self.size if axis is None else self.shape[axis]
        return self.sum(axis, keepdims) * (1.0 / n)

    def max(self, axis: Optional[int] = None, keepdims: bool = False):
        """Max along ``axis``; the subgradient goes to the lowest-index maximum."""
        a = self
        if axis is None:
            flat_idx = int(np.argmax(a.data))
            out = a.data.reshape(-1)[flat_idx]
            if keepdims:
                out = np.reshape(out, (1,) * a.ndim)

            def backward(g):
                full = np.zeros(a.size)
                full[flat_idx] = np.asarray(g).reshape(-1)[0]
                return (full.reshape(a.shape),)

            return Tensor._node(out, (a,), backward, "max")

        axis = axis % a.ndim
        idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
        out = np.take_along_axis(a.data, idx, axis=axis)
        if not keepdims:
            out = np.squeeze(out, axis=axis)

        def backward(g):
            if not keepdims:
                g = np.expand_dims(g, axis)
            full = np.zeros_like(a.data)
            np.put_along_axis(full, idx, g, axis=axis)
            return (full,)

        return Tensor._node(out, (a,), backward, "max")

    def argmax(self, axis: Optional[int] = None) -> np.ndarray:
        return np.argmax(self.data, axis=axis)

    def softmax(self, axis: int = -1):
        a = self
        shifted = a.data - a.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        out = e / _seq_sum(e, axis, True)

        def backward(g):
            return (out * (g - _seq_sum(g * out, axis, True)),)

        return Tensor._node(out, (a,), backward, "softmax")

    # -- shape manipulation ------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        try:
            out = a.data.reshape(shape)
        except ValueError as exc:
            raise ShapeError(str(exc)) from None
        return Tensor._node(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        a = self
        if not axes:
            axes = tuple(reversed(range(a.ndim)))
        inverse = tuple(np.argsort(axes))
        return Tensor._node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")

    def swapaxes(self, i: int, j: int):
        axes = list(range(self.ndim))
        axes[i], axes[j] = axes[j], axes[i]
        return self.transpose(tuple(axes))

    @property
    def T(self):
        return self.transpose()

    # -- graph traversal ---------------------------------------------------

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every tracked leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that is not part of a recorded graph")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands need at least 2 dimensions")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape}: {exc}") from None

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._node(out, (a, b), backward, "matmul")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._node(out, tuple(parts), backward, "concat")


def where(mask: np.ndarray, a, b) -> Tensor:
    """Elementwise select; ``mask`` is a constant boolean array."""
    a, b = _as_tensor(a), _as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, a.data, b.data)

    def backward(g):
        return (_unbroadcast(np.where(mask, g, 0.0), a.shape),
                _unbroadcast(np.where(mask, 0.0, g), b.shape))

    return Tensor._node(out, (a, b), backward, "where")


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise cosine between rows: ``a [..., m, d]``, ``b [..., n, d]`` -> ``[..., m, n]``.

    Zero-norm rows have similarity 0 with everything.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"cosine_similarity feature dims differ: {a.shape} vs {b.shape}")
    na = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))
    nb = np.sqrt((b.data * b.data).sum(axis=-1, keepdims=True))
    safe_a = np.where(na > 0, na, 1.0)
    safe_b = np.where(nb > 0, nb, 1.0)
    ua = np.where(na > 0, a.data / safe_a, 0.0)
    ub = np.where(nb > 0, b.data / safe_b, 0.0)
    out = np.matmul(ua, np.swapaxes(ub, -1, -2))

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            gu = np.matmul(g, ub)
            ga = (gu - ua * (gu * ua).sum(axis=-1, keepdims=True)) / safe_a
            ga = _unbroadcast(np.where(na > 0, ga, 0.0), a.shape)
        if b.requires_grad:
            gu = np.matmul(np.swapaxes(g, -1, -2), ua)
            gb = (gu - ub * (gu * ub).sum(axis=-1, keepdims=True)) / safe_b
            gb = _unbroadcast(np.where(nb > 0, gb, 0.0), b.shape)
        return ga, gb

    return Tensor._node(out, (a, b), backward, "cosine")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        gg = _unbroadcast(g * xhat, gamma.shape) if gamma.requires_grad else None
        gb = _unbroadcast(g, beta.shape) if beta.requires_grad else None
        return gx, gg, gb

    return Tensor._node(out, (x, gamma, beta), backward, "layer_norm")


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5,
                      coords: Optional[Iterable[int]] = None) -> float:
    """Largest ``|analytic - numeric| / max(1, |numeric|)`` over coordinates of ``x``.

    ``x`` is perturbed in place and restored, so ``f`` may close over it
    instead of using its argument. ``coords`` restricts the check to a
    subset of flat indices.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x.requires_grad = True
    x.grad = None
    out = f(x)
    if out.size != 1:
        raise ShapeError("finite_diff_check needs a scalar-valued function")
    out.backward()
    analytic = np.zeros(x.size) if x.grad is None else x.grad.reshape(-1).copy()

    flat = x.data.reshape(-1)
    if not np.shares_memory(flat, x.data):
        raise ValueError("x must be contiguous")
    indices = range(x.size) if coords is None else coords
    worst = 0.0
    with no_grad():
        for i in indices:
            orig = flat[i]
            flat[i] = orig + h
            fp = f(x).item()
            flat[i] = orig - h
            fm = f(x).item()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * h)
            worst = max(worst, abs(analytic[i] - numeric) / max(1.0, abs(numeric)))
    return worst
