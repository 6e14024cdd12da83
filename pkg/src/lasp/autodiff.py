"""Dense float64 tensors with define-by-run reverse-mode differentiation.

The op set is deliberately small: exactly what the encoders and losses
need. Every op records a closure that accumulates adjoints into its
inputs; ``backward`` replays them in reverse topological order. Storage
is numpy, but all derivative rules live here.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class NumericError(ValueError):
    """Non-finite values where finite ones are required."""


class DegenerateInputError(ValueError):
    """Input is mathematically degenerate (e.g. zero-norm vector)."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (pure inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def zeros(shape, requires_grad=False) -> "Tensor":
        return Tensor(np.zeros(shape), requires_grad=requires_grad)

    @staticmethod
    def _lift(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(x)

    # -- bookkeeping ----------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def _make(self, data, parents, backward) -> "Tensor":
        out = Tensor(data)
        if _grad_enabled and (backward is not None):
            tracked = tuple(p for p in parents
                            if p.requires_grad or p._backward is not None)
            if tracked:
                out._parents = tracked
                out._backward = backward
        return out

    def zero_grad(self):
        self.grad = None

    # -- elementwise ----------------------------------------------------------

    def __add__(self, other):
        other = Tensor._lift(other)
        a, b = self, other

        def bw(g):
            if a.requires_grad or a._backward:
                a._accum(_unbroadcast(g, a.data.shape))
            if b.requires_grad or b._backward:
                b._accum(_unbroadcast(g, b.data.shape))

        return self._make(a.data + b.data, (a, b), bw)

    __radd__ = __add__

    def __neg__(self):
        a = self
        return self._make(-a.data, (a,), lambda g: a._accum(-g))

    def __sub__(self, other):
        return self + (-Tensor._lift(other))

    def __rsub__(self, other):
        return Tensor._lift(other) + (-self)

    def __mul__(self, other):
        other = Tensor._lift(other)
        a, b = self, other

        def bw(g):
            if a.requires_grad or a._backward:
                a._accum(_unbroadcast(g * b.data, a.data.shape))
            if b.requires_grad or b._backward:
                b._accum(_unbroadcast(g * a.data, b.data.shape))

        return self._make(a.data * b.data, (a, b), bw)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = Tensor._lift(other)
        return self * other.pow(-1.0)

    def __rtruediv__(self, other):
        return Tensor._lift(other) * self.pow(-1.0)

    def pow(self, p: float) -> "Tensor":
        a = self
        out_data = a.data ** p

        def bw(g):
            a._accum(g * p * a.data ** (p - 1.0))

        return self._make(out_data, (a,), bw)

    def exp(self) -> "Tensor":
        a = self
        out_data = np.exp(a.data)

        def bw(g):
            a._accum(g * out_data)

        return self._make(out_data, (a,), bw)

    def log(self) -> "Tensor":
        a = self

        def bw(g):
            a._accum(g / a.data)

        return self._make(np.log(a.data), (a,), bw)

    def abs(self) -> "Tensor":
        a = self

        def bw(g):
            a._accum(g * np.sign(a.data))

        return self._make(np.abs(a.data), (a,), bw)

    def tanh(self) -> "Tensor":
        a = self
        out_data = np.tanh(a.data)

        def bw(g):
            a._accum(g * (1.0 - out_data * out_data))

        return self._make(out_data, (a,), bw)

    # -- shape ops ------------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        old = a.data.shape

        def bw(g):
            a._accum(g.reshape(old))

        return self._make(a.data.reshape(shape), (a,), bw)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        a = self
        inv = np.argsort(axes)

        def bw(g):
            a._accum(g.transpose(inv))

        return self._make(a.data.transpose(axes), (a,), bw)

    def swapaxes(self, i: int, j: int) -> "Tensor":
        axes = list(range(self.data.ndim))
        axes[i], axes[j] = axes[j], axes[i]
        return self.transpose(*axes)

    def __getitem__(self, idx) -> "Tensor":
        a = self

        def bw(g):
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            a._accum(full)

        return self._make(a.data[idx], (a,), bw)

    # -- reductions -----------------------------------------------------------

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        a = self

        def bw(g):
            if axis is None:
                a._accum(np.broadcast_to(g, a.data.shape).copy())
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                a._accum(np.broadcast_to(gg, a.data.shape).copy())

        return self._make(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        if axis is None:
            n = self.data.size
        else:
            n = self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- linear algebra -------------------------------------------------------

    def __matmul__(self, other):
        other = Tensor._lift(other)
        a, b = self, other
        if a.data.ndim < 1 or b.data.ndim < 1:
            raise ShapeError(f"matmul needs >=1-d operands, got {a.data.shape} and {b.data.shape}")
        if a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else 0]:
            raise ShapeError(f"matmul inner dimensions disagree: {a.data.shape} x {b.data.shape}")

        def bw(g):
            if a.requires_grad or a._backward:
                ga = g @ np.swapaxes(b.data, -1, -2) if b.data.ndim > 1 else np.outer(g, b.data).reshape(a.data.shape)
                a._accum(_unbroadcast(ga, a.data.shape))
            if b.requires_grad or b._backward:
                gb = np.swapaxes(a.data, -1, -2) @ g if a.data.ndim > 1 else np.outer(a.data, g).reshape(b.data.shape)
                b._accum(_unbroadcast(gb, b.data.shape))

        return self._make(a.data @ b.data, (a, b), bw)

    # -- backward pass --------------------------------------------------------

    def _accum(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g

    def backward(self):
        if self.data.size != 1:
            raise ShapeError(f"backward() requires a scalar root, got shape {self.data.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        # intermediate grads are not part of the contract; keep leaf grads only
        for node in topo:
            if node._backward is not None and node is not self:
                node.grad = None


# -- free-function ops --------------------------------------------------------


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [Tensor._lift(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)
    out_data = np.concatenate([t.data for t in tensors], axis=axis)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad or t._backward:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accum(g[tuple(sl)])

    out = Tensor(out_data)
    if _grad_enabled:
        tracked = tuple(t for t in tensors if t.requires_grad or t._backward is not None)
        if tracked:
            out._parents = tracked
            out._backward = bw
    return out


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [Tensor._lift(t) for t in tensors]
    out_data = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        slabs = np.moveaxis(g, axis, 0)
        for t, slab in zip(tensors, slabs):
            if t.requires_grad or t._backward:
                t._accum(slab)

    out = Tensor(out_data)
    if _grad_enabled:
        tracked = tuple(t for t in tensors if t.requires_grad or t._backward is not None)
        if tracked:
            out._parents = tracked
            out._backward = bw
    return out


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable log-softmax along ``axis`` (max-subtraction)."""
    x = Tensor._lift(x)
    if not np.all(np.isfinite(x.data)):
        raise NumericError("log_softmax requires finite input")
    m = x.data.max(axis=axis, keepdims=True)
    shifted = x.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse

    def bw(g):
        soft = np.exp(out_data)
        x._accum(g - soft * g.sum(axis=axis, keepdims=True))

    return x._make(out_data, (x,), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return log_softmax(x, axis=axis).exp()


def cosine_similarity(a: Tensor, b: Tensor, eps: float = 1e-12) -> Tensor:
    """Cosine of the angle between two vectors; differentiable in both."""
    a, b = Tensor._lift(a), Tensor._lift(b)
    if a.data.ndim != 1 or b.data.ndim != 1 or a.data.shape != b.data.shape:
        raise ShapeError(f"cosine_similarity expects equal-length vectors, got {a.data.shape} and {b.data.shape}")
    if np.linalg.norm(a.data) < eps or np.linalg.norm(b.data) < eps:
        raise DegenerateInputError("cosine_similarity on (near-)zero vector")
    dot = (a * b).sum()
    sq = (a * a).sum() * (b * b).sum()
    return dot * sq.pow(-0.5)


def normalize_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    """L2-normalize along the last axis."""
    x = Tensor._lift(x)
    sq = (x * x).sum(axis=-1, keepdims=True)
    return x * (sq + eps).pow(-0.5)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row standardization over the last axis followed by affine."""
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    x, gain, bias = Tensor._lift(x), Tensor._lift(gain), Tensor._lift(bias)
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    xhat = centered * (var + eps).pow(-0.5)
    return xhat * gain + bias


# -- gradient checking --------------------------------------------------------


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor],
               step: float = 1e-4, tolerance: float = 1e-4) -> dict:
    """Compare analytic gradients of scalar ``f`` against central differences.

    Returns a report: per-input max relative error, overall max, pass flag.
    Relative error is |a - n| / (1 + |n|) elementwise.
    """
    if not (0.0 < step <= 1e-2):
        raise ValueError("step must lie in (0, 1e-2]")
    inputs = list(inputs)
    for t in inputs:
        t.zero_grad()
    out = f(*inputs)
    if out.data.size != 1:
        raise ShapeError("grad_check requires a scalar-valued function")
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy()
                for t in inputs]

    per_input = []
    for k, t in enumerate(inputs):
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            with no_grad():
                hi = f(*inputs).item()
            flat[i] = orig - step
            with no_grad():
                lo = f(*inputs).item()
            flat[i] = orig
            nflat[i] = (hi - lo) / (2.0 * step)
        rel = np.abs(analytic[k] - numeric) / (1.0 + np.abs(numeric))
        per_input.append({
            "analytic": analytic[k],
            "numeric": numeric,
            "max_rel_error": float(rel.max()) if rel.size else 0.0,
        })
    max_rel = max((r["max_rel_error"] for r in per_input), default=0.0)
    return {
        "per_input": per_input,
        "max_rel_error": max_rel,
        "passed": max_rel < tolerance,
    }
