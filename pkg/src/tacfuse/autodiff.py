"""Dense tensors with reverse-mode differentiation.

A define-by-run tape: every op that touches a gradient-requiring tensor
records its parents and a backward closure on the output node. Calling
``backward()`` on a scalar walks the graph once in reverse topological
order and accumulates gradients into ``.grad`` buffers. The graph dies
with the output tensor, so each training step starts from a clean tape.

Storage is numpy (float32 for training, float64 for gradient checks);
convolutions are lowered to BLAS matmuls via im2col. There is no
accelerator support and none is planned.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible; message names both."""


_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables tape recording (inference mode)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """N-dimensional real array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None

    # ---- introspection ----

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

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_err(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # ---- autograd ----

    def backward(self) -> None:
        """Backpropagate from this scalar through the recorded tape."""
        if self.data.size != 1:
            raise ShapeError(f"backward() requires a scalar output, got shape {self.shape}")
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
            if node._backward is not None:
                node._backward(node.grad)

    # ---- operators ----

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


def _scalar_err(t):
    raise ShapeError(f"item() requires a single-element tensor, got shape {t.shape}")


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = True
    out._parents = tuple(parents)
    out._backward = backward
    return out


def _plain(data: np.ndarray) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    out._parents = ()
    out._backward = None
    return out


def _tracking(*tensors: Tensor) -> bool:
    return _GRAD_ENABLED and any(t.requires_grad for t in tensors)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce gradient g back to `shape` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---- elementwise arithmetic ----


def add(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    data = a.data + b.data
    if not _tracking(a, b):
        return _plain(data)

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.shape))

    return _node(data, (a, b), bw)


def sub(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    data = a.data - b.data
    if not _tracking(a, b):
        return _plain(data)

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g, b.shape))

    return _node(data, (a, b), bw)


def mul(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    data = a.data * b.data
    if not _tracking(a, b):
        return _plain(data)

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _node(data, (a, b), bw)


def div(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    data = a.data / b.data
    if not _tracking(a, b):
        return _plain(data)

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _node(data, (a, b), bw)


def power(a: Tensor, exponent: float) -> Tensor:
    if not isinstance(exponent, (int, float)):
        raise TypeError("power() supports scalar exponents only")
    data = a.data ** exponent
    if not _tracking(a):
        return _plain(data)

    def bw(g):
        _accum(a, g * exponent * a.data ** (exponent - 1))

    return _node(data, (a,), bw)


# ---- structural ops ----


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul requires >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} vs {b.shape}")
    data = a.data @ b.data
    if not _tracking(a, b):
        return _plain(data)

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _node(data, (a, b), bw)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    a = as_tensor(a)
    data = a.data.reshape(shape)
    if not _tracking(a):
        return _plain(data)

    def bw(g):
        _accum(a, g.reshape(a.shape))

    return _node(data, (a,), bw)


def transpose(a: Tensor, axes=None) -> Tensor:
    a = as_tensor(a)
    data = a.data.transpose(axes)
    if not _tracking(a):
        return _plain(data)
    inv = None if axes is None else np.argsort(axes)

    def bw(g):
        _accum(a, g.transpose(inv))

    return _node(data, (a,), bw)


def swap_last2(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in ts], axis=axis)
    if not _tracking(*ts):
        return _plain(data)
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _accum(t, g[tuple(idx)])

    return _node(data, tuple(ts), bw)


def getitem(a: Tensor, idx) -> Tensor:
    a = as_tensor(a)
    data = a.data[idx]
    if not _tracking(a):
        return _plain(data)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        _accum(a, full)

    return _node(data, (a,), bw)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)
    if not _tracking(a):
        return _plain(data)

    def bw(g):
        gg = g
        if not keepdims and axis is not None:
            gg = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(gg, a.shape).copy() if np.ndim(gg) else np.full(a.shape, gg, a.data.dtype))

    return _node(np.asarray(data), (a,), bw)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return mul(tsum(a, axis, keepdims), 1.0 / float(n))


# ---- elementwise nonlinearities ----


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    data = np.exp(a.data)
    if not _tracking(a):
        return _plain(data)

    def bw(g):
        _accum(a, g * data)

    return _node(data, (a,), bw)


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)
    data = np.log(a.data)
    if not _tracking(a):
        return _plain(data)

    def bw(g):
        _accum(a, g / a.data)

    return _node(data, (a,), bw)


def sqrt(a: Tensor) -> Tensor:
    a = as_tensor(a)
    data = np.sqrt(a.data)
    if not _tracking(a):
        return _plain(data)

    def bw(g):
        _accum(a, g * (0.5 / data))

    return _node(data, (a,), bw)


def absolute(a: Tensor) -> Tensor:
    a = as_tensor(a)
    data = np.abs(a.data)
    if not _tracking(a):
        return _plain(data)

    def bw(g):
        _accum(a, g * np.sign(a.data))

    return _node(data, (a,), bw)


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    data = np.maximum(a.data, 0)
    if not _tracking(a):
        return _plain(data)

    def bw(g):
        _accum(a, g * (a.data > 0))

    return _node(data, (a,), bw)


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    x = a.data
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    if not _tracking(a):
        return _plain(data)

    def bw(g):
        _accum(a, g * data * (1.0 - data))

    return _node(data, (a,), bw)


def clamp_min(a: Tensor, floor: float) -> Tensor:
    a = as_tensor(a)
    data = np.maximum(a.data, floor)
    if not _tracking(a):
        return _plain(data)

    def bw(g):
        _accum(a, g * (a.data > floor))

    return _node(data, (a,), bw)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax; the max shift is mandatory."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)
    if not _tracking(a):
        return _plain(data)

    def bw(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        _accum(a, (g - dot) * data)

    return _node(data, (a,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match last axis {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    data = xhat * gamma.data + beta.data
    if not _tracking(x, gamma, beta):
        return _plain(data)

    def bw(g):
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).reshape(-1, d).sum(axis=0))
        if beta.requires_grad:
            _accum(beta, g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gx = g * gamma.data
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = (gx * xhat).mean(axis=-1, keepdims=True)
            _accum(x, inv * (gx - m1 - xhat * m2))

    return _node(data, (x, gamma, beta), bw)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """y = x @ w + b over the last axis of x."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input shape {x.shape} does not match weight shape {w.shape}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias shape {b.shape} does not match weight shape {w.shape}")
    return add(matmul(x, w), b)


# ---- convolution (im2col lowering) ----


def _conv_out_extent(h: int, k: int, stride: int, pad: int) -> int:
    return (h + 2 * pad - k) // stride + 1


def _im2col(x: np.ndarray, k: int, stride: int, pad: int) -> tuple[np.ndarray, int, int]:
    n, cin, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    ho, wo = _conv_out_extent(h, k, stride, pad), _conv_out_extent(w, k, stride, pad)
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n, ho * wo, cin * k * k)
    return cols, ho, wo


def _conv2d_data(x: np.ndarray, kern: np.ndarray, stride: int, pad: int,
                 cols_out: list | None = None) -> np.ndarray:
    n = x.shape[0]
    cout, _, k, _ = kern.shape
    cols, ho, wo = _im2col(x, k, stride, pad)
    if cols_out is not None:
        cols_out.append(cols)
    out = cols.reshape(n * ho * wo, -1) @ kern.reshape(cout, -1).T
    return out.reshape(n, ho * wo, cout).transpose(0, 2, 1).reshape(n, cout, ho, wo)


def _conv2d_grad_x(g: np.ndarray, kern: np.ndarray, stride: int, pad: int, hw_in: tuple) -> np.ndarray:
    # One GEMM for all columns, then a k*k scatter-add (col2im).
    n, cout, ho, wo = g.shape
    _, cin, k, _ = kern.shape
    h, w = hw_in
    gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, cout)
    dcols = gmat @ kern.reshape(cout, cin * k * k)
    dcols = dcols.reshape(n, ho, wo, cin, k, k).transpose(0, 3, 1, 2, 4, 5)
    dxp = np.zeros((n, cin, h + 2 * pad, w + 2 * pad), dtype=g.dtype)
    for ki in range(k):
        for kj in range(k):
            dxp[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride] += dcols[:, :, :, :, ki, kj]
    return dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp


def _conv2d_grad_k(x: np.ndarray, g: np.ndarray, stride: int, pad: int, kshape: tuple,
                   cols: np.ndarray | None = None) -> np.ndarray:
    cout, cin, k, _ = kshape
    n, _, ho, wo = g.shape
    if cols is None:
        cols, ho, wo = _im2col(x, k, stride, pad)
    cols = cols.reshape(n * ho * wo, cin * k * k)
    gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, cout)
    return (gmat.T @ cols).reshape(kshape)


def _promote_chw(x: Tensor) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise ShapeError(f"expected (C,H,W) or (N,C,H,W) input, got shape {x.shape}")


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding.

    Output extent is floor((H + 2*pad - k)/stride) + 1 per spatial axis.
    Accepts a single image (C,H,W) or a batch (N,C,H,W).
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    xd, squeeze = _promote_chw(x)
    if stride < 1:
        raise ShapeError(f"conv2d stride must be >= 1, got {stride}")
    cout, cin, k, k2 = kernels.shape
    if k != k2:
        raise ShapeError(f"conv2d kernels must be square, got {kernels.shape}")
    if xd.shape[1] != cin:
        raise ShapeError(f"conv2d channel mismatch: input {xd.shape} vs kernels {kernels.shape}")
    if xd.shape[2] + 2 * pad < k or xd.shape[3] + 2 * pad < k:
        raise ShapeError(f"conv2d kernel {kernels.shape} larger than padded input {xd.shape} (pad={pad})")
    if not _tracking(x, kernels):
        data = _conv2d_data(xd, kernels.data, stride, pad)
        return _plain(data[0] if squeeze else data)
    cols_cache: list = []  # reuse the forward's im2col for the kernel gradient
    data = _conv2d_data(xd, kernels.data, stride, pad, cols_out=cols_cache)
    out_data = data[0] if squeeze else data
    hw_in = xd.shape[2:]

    def bw(g):
        gd = g[None] if squeeze else g
        if x.requires_grad:
            dx = _conv2d_grad_x(gd, kernels.data, stride, pad, hw_in)
            _accum(x, dx[0] if squeeze else dx)
        if kernels.requires_grad:
            _accum(kernels, _conv2d_grad_k(xd, gd, stride, pad, kernels.shape, cols=cols_cache[0]))

    return _node(out_data, (x, kernels), bw)


def conv_transpose2d(x: Tensor, kernels: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Exact adjoint of conv2d under the shared kernel layout (Cout,Cin,k,k).

    The input carries Cout channels and the output Cin channels, so that
    dot(conv2d(x, K), g) == dot(x, conv_transpose2d(g, K)) for all x, g.
    Output extent is (H-1)*stride - 2*pad + k.
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    xd, squeeze = _promote_chw(x)
    if stride < 1:
        raise ShapeError(f"conv_transpose2d stride must be >= 1, got {stride}")
    cout, cin, k, k2 = kernels.shape
    if k != k2:
        raise ShapeError(f"conv_transpose2d kernels must be square, got {kernels.shape}")
    if xd.shape[1] != cout:
        raise ShapeError(f"conv_transpose2d channel mismatch: input {xd.shape} vs kernels {kernels.shape}")
    ho = (xd.shape[2] - 1) * stride - 2 * pad + k
    wo = (xd.shape[3] - 1) * stride - 2 * pad + k
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv_transpose2d output extent {ho}x{wo} is not positive for input {xd.shape}")
    data = _conv2d_grad_x(xd, kernels.data, stride, pad, (ho, wo))
    out_data = data[0] if squeeze else data
    if not _tracking(x, kernels):
        return _plain(out_data)

    def bw(g):
        gd = g[None] if squeeze else g
        if x.requires_grad:
            dx = _conv2d_data(gd, kernels.data, stride, pad)
            _accum(x, dx[0] if squeeze else dx)
        if kernels.requires_grad:
            _accum(kernels, _conv2d_grad_k(gd, xd, stride, pad, kernels.shape))

    return _node(out_data, (x, kernels), bw)
