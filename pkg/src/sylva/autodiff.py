"""Reverse-mode automatic differentiation over dense numpy arrays.

A dynamic tape: every op returns a new Tensor carrying the numpy result plus
a closure that routes the upstream gradient into the op's inputs. backward()
clears stale gradients on the reachable subgraph before accumulating, so
repeated passes over shared leaves (per-example gradients, interleaved
validation/training losses) do not bleed into each other.

Storage is float32 by default, float64 opt-in per tensor; sum/mean reductions
accumulate in float64 before casting back. Every op checks its result for
NaN/Inf and raises NumericsError at the op that produced it.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np


class NumericsError(ArithmeticError):
    """A forward op produced NaN or Inf."""


class ShapeError(ValueError):
    """Operand dimensions are incompatible with the op."""


DEFAULT_DTYPE = np.float32


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericsError(f"non-finite values produced by op '{op}'")


class Tensor:
    """One node of the computation graph: a value, its gradient slot, and
    the backward closure that created it. Leaf tensors have no parents."""

    __slots__ = ("data", "grad", "_parents", "_backward")

    def __init__(self, data, _parents=(), _backward=None, dtype=None, _op="leaf"):
        arr = np.asarray(data)
        if dtype is not None:
            arr = np.ascontiguousarray(arr, dtype=dtype)
        elif arr.dtype not in (np.float32, np.float64):
            arr = np.ascontiguousarray(arr, dtype=DEFAULT_DTYPE)
        _check_finite(arr, _op)
        self.data = arr
        self.grad = None
        self._parents = tuple(_parents)
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g.astype(self.data.dtype, copy=False)

    def backward(self, seed=None) -> None:
        """Backpropagate from this node. Scalar nodes seed with 1; larger
        nodes require an explicit seed of matching shape."""
        if seed is None:
            if self.data.ndim != 0:
                raise ShapeError("backward() without a seed expects a scalar node")
            seed = np.ones((), dtype=self.data.dtype)
        else:
            seed = np.asarray(seed, dtype=self.data.dtype)
            if seed.shape != self.data.shape:
                raise ShapeError("backward seed shape does not match node shape")
        order = _topo_order(self)
        for node in order:
            node.grad = None
        self.grad = seed.copy()
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar -------------------------------------------------------

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

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


def _topo_order(root: Tensor) -> list[Tensor]:
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
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to the shape numpy broadcast it up from."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)), dtype=np.float64)
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True, dtype=np.float64)
    return g.reshape(shape)


# elementwise ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data, (a, b), _op="add")

    def back(g):
        a.accumulate(_unbroadcast(g, a.data.shape))
        b.accumulate(_unbroadcast(g, b.data.shape))

    out._backward = back
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data, (a, b), _op="sub")

    def back(g):
        a.accumulate(_unbroadcast(g, a.data.shape))
        b.accumulate(_unbroadcast(-g, b.data.shape))

    out._backward = back
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data, (a, b), _op="mul")

    def back(g):
        a.accumulate(_unbroadcast(g * b.data, a.data.shape))
        b.accumulate(_unbroadcast(g * a.data, b.data.shape))

    out._backward = back
    return out


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        val = a.data / b.data
    out = Tensor(val, (a, b), _op="div")

    def back(g):
        a.accumulate(_unbroadcast(g / b.data, a.data.shape))
        b.accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    out._backward = back
    return out


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.exp(x.data), (x,), _op="exp")

    def back(g):
        x.accumulate(g * out.data)

    out._backward = back
    return out


def log(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        val = np.log(x.data)
    out = Tensor(val, (x,), _op="log")

    def back(g):
        x.accumulate(g / x.data)

    out._backward = back
    return out


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.sqrt(x.data), (x,), _op="sqrt")

    def back(g):
        x.accumulate(g / (2.0 * out.data))

    out._backward = back
    return out


def square(x) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data * x.data, (x,), _op="square")

    def back(g):
        x.accumulate(g * (2.0 * x.data))

    out._backward = back
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    z = x.data
    val = np.empty_like(z)
    pos = z >= 0
    val[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    val[~pos] = ez / (1.0 + ez)
    out = Tensor(val, (x,), _op="sigmoid")

    def back(g):
        x.accumulate(g * out.data * (1.0 - out.data))

    out._backward = back
    return out


def relu(x) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.maximum(x.data, 0), (x,), _op="relu")

    def back(g):
        x.accumulate(g * (x.data > 0))

    out._backward = back
    return out


def clamp_min(x, lo: float) -> Tensor:
    """max(x, lo); gradient passes only where x is above the floor."""
    x = as_tensor(x)
    out = Tensor(np.maximum(x.data, lo), (x,), _op="clamp_min")

    def back(g):
        x.accumulate(g * (x.data >= lo))

    out._backward = back
    return out


# shape ----------------------------------------------------------------------


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data.reshape(shape), (x,), _op="reshape")

    def back(g):
        x.accumulate(g.reshape(x.data.shape))

    out._backward = back
    return out


def getitem(x, idx) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data[idx], (x,), _op="getitem")

    def back(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g.astype(x.data.dtype, copy=False))
        x.accumulate(full)

    out._backward = back
    return out


# reductions ------------------------------------------------------------------


def tsum(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    val = x.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64)
    out = Tensor(val.astype(x.data.dtype), (x,), _op="sum")

    def back(g):
        if axis is None:
            x.accumulate(np.broadcast_to(g, x.data.shape))
            return
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axis)
        x.accumulate(np.broadcast_to(gg, x.data.shape))

    out._backward = back
    return out


def tmean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        count = x.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for a in axes:
            count *= x.data.shape[a]
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / count)


# linear algebra ---------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 1 or b.data.ndim != 2:
        raise ShapeError("matmul expects (.., k) @ (k, n)")
    if a.data.shape[-1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}"
        )
    out = Tensor(a.data @ b.data, (a, b), _op="matmul")

    def back(g):
        a.accumulate(g @ b.data.T)
        ga = a.data.reshape(-1, a.data.shape[-1])
        gg = g.reshape(-1, g.shape[-1])
        b.accumulate(ga.T @ gg)

    out._backward = back
    return out


# convolution -------------------------------------------------------------------


def _same_pad(size: int, stride: int, k: int) -> tuple[int, int]:
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return total // 2, total - total // 2


def conv2d(x, kernel, stride: int = 1) -> Tensor:
    """NHWC 2-D convolution with SAME zero padding.

    kernel has shape (kh, kw, cin, cout); output spatial dims are
    ceil(H/stride) x ceil(W/stride).
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError("conv2d expects x (B,H,W,C) and kernel (kh,kw,cin,cout)")
    bsz, h, w, cin = x.data.shape
    kh, kw, kcin, cout = kernel.data.shape
    if kcin != cin:
        raise ShapeError(f"conv2d channel mismatch: input {cin}, kernel {kcin}")
    pt, pb = _same_pad(h, stride, kh)
    pl, pr = _same_pad(w, stride, kw)
    xp = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    ho = -(-h // stride)
    wo = -(-w // stride)
    val = np.zeros((bsz, ho, wo, cout), dtype=x.data.dtype)
    for u in range(kh):
        for v in range(kw):
            sl = xp[:, u : u + ho * stride : stride, v : v + wo * stride : stride, :]
            val += sl @ kernel.data[u, v]
    out = Tensor(val, (x, kernel), _op="conv2d")

    def back(g):
        gxp = np.zeros_like(xp)
        gk = np.zeros_like(kernel.data)
        for u in range(kh):
            for v in range(kw):
                sl = xp[:, u : u + ho * stride : stride, v : v + wo * stride : stride, :]
                gk[u, v] = np.tensordot(sl, g, axes=([0, 1, 2], [0, 1, 2]))
                gxp[:, u : u + ho * stride : stride, v : v + wo * stride : stride, :] += (
                    g @ kernel.data[u, v].T
                )
        kernel.accumulate(gk)
        x.accumulate(gxp[:, pt : pt + h, pl : pl + w, :])

    out._backward = back
    return out


# composites --------------------------------------------------------------------


def softmax(x, axis: int = -1) -> Tensor:
    """Numerically stable softmax along `axis`; the max shift is detached,
    which leaves the exact gradient intact (softmax is shift-invariant)."""
    x = as_tensor(x)
    if x.data.size == 0:
        raise ShapeError("softmax of an empty tensor")
    shift = Tensor(np.max(x.data, axis=axis, keepdims=True), dtype=x.data.dtype)
    e = exp(sub(x, shift))
    return div(e, tsum(e, axis=axis, keepdims=True))


def swish(x) -> Tensor:
    return mul(x, sigmoid(x))


def finite_difference_grads(
    f, params: Sequence[np.ndarray], step: float = 1e-3
) -> list[np.ndarray]:
    """Central finite differences of scalar f(params) w.r.t. each array.

    Independent oracle for backward(): evaluates f twice per coordinate and
    never touches the tape.
    """
    grads = []
    for i, p in enumerate(params):
        g = np.zeros_like(p, dtype=np.float64)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            fp = float(f(params))
            flat[j] = orig - step
            fm = float(f(params))
            flat[j] = orig
            gflat[j] = (fp - fm) / (2.0 * step)
        grads.append(g)
    return grads


def max_relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """max |a-b| / (|a|+|b|) with a small absolute floor for near-zero pairs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)
    denom = np.abs(a) + np.abs(b) + 1e-6 * scale
    return float(np.max(np.abs(a - b) / denom))
