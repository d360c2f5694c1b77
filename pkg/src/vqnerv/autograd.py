"""Minimal reverse-mode autodiff on float32 numpy arrays.

Only the operations the video model actually needs are implemented:
elementwise arithmetic, a few smooth activations, reductions, reshapes,
channel concat/narrow, 2-D convolution (im2col) and pixel shuffling.
Tensors are treated as immutable once produced by an op; only leaf
parameters are ever updated in place (by the optimizer).
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

from .errors import ContractError, DimensionError, NumericError

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / frozen context)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """A float32 array plus the bookkeeping needed for backward()."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float32)
        self.grad = None
        self.requires_grad = bool(requires_grad) and _GRAD_ENABLED
        self._parents: tuple = ()
        self._backward = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _op(data: np.ndarray, parents: tuple["Tensor", ...]):
        """Create a non-leaf tensor; caller attaches ``_backward`` if needed."""
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.requires_grad = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out._parents = parents if out.requires_grad else ()
        out._backward = None
        return out

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.astype(np.float32, copy=True)
        else:
            self.grad += g

    # -- basic protocol -------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- autodiff -------------------------------------------------------------

    def backward(self) -> None:
        """Backpropagate from a scalar output through the recorded graph."""
        if self.data.size != 1:
            raise ContractError("backward() requires a scalar tensor")
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
                node._backward()

    # -- operator sugar -------------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, _wrap(-1.0))

    def __sub__(self, other):
        return add(self, mul(_wrap(other), _wrap(-1.0)))

    def __rsub__(self, other):
        return add(_wrap(other), mul(self, _wrap(-1.0)))

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def narrow(self, axis, start, length):
        return narrow(self, axis, start, length)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient ``g`` down to ``shape`` (the reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise ---------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = Tensor._op(a.data + b.data, (a, b))
    if out.requires_grad:
        def _bw():
            if a.requires_grad:
                a._accum(_unbroadcast(out.grad, a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(out.grad, b.data.shape))
        out._backward = _bw
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = Tensor._op(a.data * b.data, (a, b))
    if out.requires_grad:
        def _bw():
            if a.requires_grad:
                a._accum(_unbroadcast(out.grad * b.data, a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(out.grad * a.data, b.data.shape))
        out._backward = _bw
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = Tensor._op(a.data / b.data, (a, b))
    if out.requires_grad:
        def _bw():
            if a.requires_grad:
                a._accum(_unbroadcast(out.grad / b.data, a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(-out.grad * a.data / (b.data * b.data), b.data.shape))
        out._backward = _bw
    return out


def power(a: Tensor, p: float) -> Tensor:
    out = Tensor._op(a.data ** p, (a,))
    if out.requires_grad:
        def _bw():
            a._accum(out.grad * p * a.data ** (p - 1))
        out._backward = _bw
    return out


def texp(a: Tensor) -> Tensor:
    out = Tensor._op(np.exp(a.data), (a,))
    if out.requires_grad:
        def _bw():
            a._accum(out.grad * out.data)
        out._backward = _bw
    return out


def tanh(a: Tensor) -> Tensor:
    out = Tensor._op(np.tanh(a.data), (a,))
    if out.requires_grad:
        def _bw():
            a._accum(out.grad * (1.0 - out.data * out.data))
        out._backward = _bw
    return out


def sigmoid(a: Tensor) -> Tensor:
    out = Tensor._op(1.0 / (1.0 + np.exp(-a.data)), (a,))
    if out.requires_grad:
        def _bw():
            a._accum(out.grad * out.data * (1.0 - out.data))
        out._backward = _bw
    return out


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Smooth GELU (tanh approximation)."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = Tensor._op(0.5 * x * (1.0 + t), (a,))
    if out.requires_grad:
        def _bw():
            d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
            grad = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
            a._accum(out.grad * grad.astype(np.float32))
        out._backward = _bw
    return out


def tabs(a: Tensor) -> Tensor:
    out = Tensor._op(np.abs(a.data), (a,))
    if out.requires_grad:
        def _bw():
            a._accum(out.grad * np.sign(a.data))
        out._backward = _bw
    return out


# -- reductions & shape ----------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = Tensor._op(a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float32), (a,))
    if out.requires_grad:
        def _bw():
            g = out.grad
            if axis is not None and not keepdims:
                ax = axis if isinstance(axis, tuple) else (axis,)
                shape = list(a.data.shape)
                for i in ax:
                    shape[i] = 1
                g = g.reshape(shape)
            a._accum(np.broadcast_to(g, a.data.shape))
        out._backward = _bw
    return out


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for i in ax:
            n *= a.data.shape[i]
    return mul(tsum(a, axis, keepdims), _wrap(1.0 / n))


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor._op(a.data.reshape(shape), (a,))
    if out.requires_grad:
        def _bw():
            a._accum(out.grad.reshape(a.data.shape))
        out._backward = _bw
    return out


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out = Tensor._op(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors))
    if out.requires_grad:
        sizes = [t.data.shape[axis] for t in tensors]
        def _bw():
            start = 0
            for t, s in zip(tensors, sizes):
                if t.requires_grad:
                    idx = [slice(None)] * out.grad.ndim
                    idx[axis] = slice(start, start + s)
                    t._accum(out.grad[tuple(idx)])
                start += s
        out._backward = _bw
    return out


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    out = Tensor._op(np.ascontiguousarray(a.data[tuple(idx)]), (a,))
    if out.requires_grad:
        def _bw():
            g = np.zeros_like(a.data)
            g[tuple(idx)] = out.grad
            a._accum(g)
        out._backward = _bw
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul shapes {a.data.shape} x {b.data.shape}")
    out = Tensor._op(a.data @ b.data, (a, b))
    if out.requires_grad:
        def _bw():
            if a.requires_grad:
                a._accum(out.grad @ b.data.T)
            if b.requires_grad:
                b._accum(a.data.T @ out.grad)
        out._backward = _bw
    return out


# -- convolution -----------------------------------------------------------------


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    c, h, w = x.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if pad:
        xp = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=np.float32)
        xp[:, pad:pad + h, pad:pad + w] = x
    else:
        xp = x
    col = np.empty((c, kh, kw, ho, wo), dtype=np.float32)
    for i in range(kh):
        for j in range(kw):
            col[:, i, j] = xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return col.reshape(c * kh * kw, ho * wo), ho, wo


def _col2im(gcol: np.ndarray, xshape, kh: int, kw: int, stride: int, pad: int,
            ho: int, wo: int) -> np.ndarray:
    c, h, w = xshape
    gp = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=np.float32)
    g = gcol.reshape(c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            gp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += g[:, i, j]
    if pad:
        return gp[:, pad:pad + h, pad:pad + w]
    return gp


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution of a [C,H,W] tensor with a [K,C,kh,kw] kernel (no bias)."""
    if x.data.ndim != 3 or weight.data.ndim != 4:
        raise DimensionError("conv2d expects x[C,H,W] and weight[K,C,kh,kw]")
    c, h, w = x.data.shape
    k, cw, kh, kw = weight.data.shape
    if cw != c:
        raise DimensionError(f"conv2d channel mismatch: input {c}, weight {cw}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise DimensionError("conv2d: kernel larger than padded input")
    col, ho, wo = _im2col(x.data, kh, kw, stride, padding)
    wmat = weight.data.reshape(k, c * kh * kw)
    out = Tensor._op((wmat @ col).reshape(k, ho, wo), (x, weight))
    if out.requires_grad:
        def _bw():
            gmat = out.grad.reshape(k, ho * wo)
            if weight.requires_grad:
                weight._accum((gmat @ col.T).reshape(weight.data.shape))
            if x.requires_grad:
                gcol = wmat.T @ gmat
                x._accum(_col2im(gcol, x.data.shape, kh, kw, stride, padding, ho, wo))
        out._backward = _bw
    return out


# -- pixel rearrangement ----------------------------------------------------------


def _shuffle_fwd(d: np.ndarray, r: int) -> np.ndarray:
    c, h, w = d.shape
    co = c // (r * r)
    return (d.reshape(co, r, r, h, w)
             .transpose(0, 3, 1, 4, 2)
             .reshape(co, h * r, w * r))


def _shuffle_inv(d: np.ndarray, r: int) -> np.ndarray:
    c, hr, wr = d.shape
    h, w = hr // r, wr // r
    return (d.reshape(c, h, r, w, r)
             .transpose(0, 2, 4, 1, 3)
             .reshape(c * r * r, h, w))


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """Rearrange [C*r^2, H, W] -> [C, H*r, W*r]; a bijection on values."""
    if x.data.ndim != 3 or x.data.shape[0] % (r * r) != 0:
        raise DimensionError(f"pixel_shuffle: channels {x.data.shape} not divisible by r^2={r * r}")
    out = Tensor._op(np.ascontiguousarray(_shuffle_fwd(x.data, r)), (x,))
    if out.requires_grad:
        def _bw():
            x._accum(_shuffle_inv(out.grad, r))
        out._backward = _bw
    return out


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """Exact inverse of :func:`pixel_shuffle`."""
    if x.data.ndim != 3 or x.data.shape[1] % r != 0 or x.data.shape[2] % r != 0:
        raise DimensionError("pixel_unshuffle: spatial dims not divisible by r")
    out = Tensor._op(np.ascontiguousarray(_shuffle_inv(x.data, r)), (x,))
    if out.requires_grad:
        def _bw():
            x._accum(_shuffle_fwd(out.grad, r))
        out._backward = _bw
    return out


# -- quantization bypass -----------------------------------------------------------


def straight_through(x: Tensor, value: np.ndarray) -> Tensor:
    """Forward takes ``value``; backward passes the gradient to ``x`` unchanged."""
    value = np.asarray(value, dtype=np.float32)
    if value.shape != x.data.shape:
        raise DimensionError(f"straight_through shape {value.shape} != {x.data.shape}")
    out = Tensor._op(value.copy(), (x,))
    if out.requires_grad:
        def _bw():
            x._accum(out.grad)
        out._backward = _bw
    return out


# -- checks -------------------------------------------------------------------------


def check_finite(t: Tensor | np.ndarray, name: str = "tensor") -> None:
    d = t.data if isinstance(t, Tensor) else t
    if not np.isfinite(d).all():
        raise NumericError(f"{name} contains NaN/Inf values")


def grad_check(params: dict[str, Tensor], loss_fn, eps: float = 1e-3,
               samples: int = 32, seed: int = 0) -> float:
    """Compare analytic gradients against central finite differences.

    Evaluates ``loss_fn()`` (a scalar-producing closure over ``params``),
    backprops, then perturbs at least ``samples`` randomly chosen parameter
    coordinates and returns the max ``|analytic - numeric| / max(1, |analytic|)``.
    """
    loss = loss_fn()
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise ContractError("loss_fn must return a scalar Tensor")
    for p in params.values():
        p.grad = None
    loss.backward()
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for k, p in params.items()}

    flat: list[tuple[str, int]] = []
    for k, p in params.items():
        flat.extend((k, i) for i in range(p.data.size))
    rng = np.random.default_rng(seed)
    if len(flat) > samples:
        chosen = [flat[i] for i in rng.choice(len(flat), size=samples, replace=False)]
    else:
        chosen = flat

    worst = 0.0
    for name, idx in chosen:
        p = params[name]
        orig = p.data.flat[idx]
        p.data.flat[idx] = orig + eps
        lp = float(loss_fn().data)
        p.data.flat[idx] = orig - eps
        lm = float(loss_fn().data)
        p.data.flat[idx] = orig
        numeric = (lp - lm) / (2.0 * eps)
        a = float(analytic[name].flat[idx])
        worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst
