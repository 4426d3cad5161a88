"""Dense tensors with reverse-mode differentiation.

Everything is numpy-backed and single-threaded per graph. Compute defaults to
float32; gradient-checking code builds float64 graphs through the same ops.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from lpld.errors import GraphError, ShapeError

DEFAULT_DTYPE = np.float32

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (eval / replay paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A dense array plus an optional backward closure in a computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_backward", "_prev")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._backward = None
        self._prev = ()

    # ---- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    # ---- grad bookkeeping ----------------------------------------------
    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g.astype(self.data.dtype, copy=False)

    def backward(self):
        """Reverse-mode sweep from this scalar node."""
        if self.data.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {self.shape}")
        if not self._prev and not self.requires_grad:
            raise GraphError("backward called on a tensor with no recorded graph")
        topo: list[Tensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for child in node._prev:
                if id(child) not in seen:
                    stack.append((child, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # ---- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other, self.dtype), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return mul(self, 1.0 / other)
        return mul(self, power(other, -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def relu(self):
        return relu(self)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x), dtype=dtype)


def _make(data: np.ndarray, parents: tuple, backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad or p._prev for p in parents):
        out.requires_grad = any(p.requires_grad for p in parents)
        out._prev = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the original shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---- elementwise -------------------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    data = a.data + b.data

    def backward(g):
        if a.requires_grad or a._prev:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad or b._prev:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    data = a.data * b.data

    def backward(g):
        if a.requires_grad or a._prev:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad or b._prev:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), backward)


def power(a, p) -> Tensor:
    a = _as_tensor(a)
    p = float(p)
    data = a.data ** p

    def backward(g):
        a._accumulate(g * p * a.data ** (p - 1.0))

    return _make(data, (a,), backward)


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    root = np.sqrt(a.data)

    def backward(g):
        a._accumulate(g * 0.5 / root)

    return _make(root, (a,), backward)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    data = np.exp(a.data)

    def backward(g):
        a._accumulate(g * data)

    return _make(data, (a,), backward)


def log(a) -> Tensor:
    a = _as_tensor(a)
    data = np.log(a.data)

    def backward(g):
        a._accumulate(g / a.data)

    return _make(data, (a,), backward)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    data = np.maximum(a.data, 0)

    def backward(g):
        a._accumulate(g * (a.data > 0))

    return _make(data, (a,), backward)


# ---- reductions / shaping ----------------------------------------------

def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.data.shape).copy())
        else:
            if not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.data.shape).copy())

    return _make(data, (a,), backward)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.data.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    data = a.data.reshape(shape)

    def backward(g):
        a._accumulate(g.reshape(a.data.shape))

    return _make(data, (a,), backward)


def matmul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2D operands, got {a.shape} @ {b.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad or a._prev:
            a._accumulate(g @ b.data.T)
        if b.requires_grad or b._prev:
            b._accumulate(a.data.T @ g)

    return _make(data, (a, b), backward)


def l2_norm(a) -> Tensor:
    """sqrt(sum(a**2)); exact zero at the origin with a zero subgradient."""
    a = _as_tensor(a)
    norm = float(np.sqrt((a.data.astype(np.float64) ** 2).sum()))
    data = np.asarray(norm, dtype=a.dtype)

    def backward(g):
        denom = norm if norm > 0 else 1.0
        a._accumulate(g * a.data / denom)

    return _make(data, (a,), backward)


# ---- convolution / pooling ----------------------------------------------

def _conv_out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    n, c, h, w = x.shape
    oh = _conv_out_size(h, kh, stride, pad)
    ow = _conv_out_size(w, kw, stride, pad)
    if pad > 0:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    s0, s1, s2, s3 = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x,
        shape=(n, c, oh, ow, kh, kw),
        strides=(s0, s1, s2 * stride, s3 * stride, s2, s3),
        writeable=False,
    )
    # [N, oh, ow, C*kh*kw]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n, oh, ow, c * kh * kw)
    return np.ascontiguousarray(cols), oh, ow


def _col2im(cols: np.ndarray, x_shape, kh, kw, stride, pad):
    n, c, h, w = x_shape
    oh = _conv_out_size(h, kh, stride, pad)
    ow = _conv_out_size(w, kw, stride, pad)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    cols = cols.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += cols[:, :, i, j]
    if pad > 0:
        return xp[:, :, pad:-pad, pad:-pad]
    return xp


def conv2d(x, weight, bias=None, stride: int = 1, pad: int = 0) -> Tensor:
    """Direct convolution via im2col. weight is [Cout, Cin, kh, kw]."""
    x = _as_tensor(x)
    weight = _as_tensor(weight, x.dtype)
    n, c, h, w = x.data.shape
    cout, cin, kh, kw = weight.data.shape
    if cin != c:
        raise ShapeError(f"conv2d input has {c} channels, weight expects {cin}")
    cols, oh, ow = _im2col(x.data, kh, kw, stride, pad)
    wmat = weight.data.reshape(cout, cin * kh * kw)
    out = cols.reshape(-1, cin * kh * kw) @ wmat.T
    out = out.reshape(n, oh, ow, cout).transpose(0, 3, 1, 2)
    if bias is not None:
        bias = _as_tensor(bias, x.dtype)
        out = out + bias.data.reshape(1, cout, 1, 1)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        if bias is not None and (bias.requires_grad or bias._prev):
            bias._accumulate(gmat.sum(axis=0))
        if weight.requires_grad or weight._prev:
            gw = gmat.T @ cols.reshape(-1, cin * kh * kw)
            weight._accumulate(gw.reshape(weight.data.shape))
        if x.requires_grad or x._prev:
            gcols = gmat @ wmat
            gx = _col2im(gcols.reshape(n, oh, ow, cin * kh * kw), x.data.shape, kh, kw, stride, pad)
            x._accumulate(gx)

    return _make(np.ascontiguousarray(out), parents, backward)


def avg_pool2d(x, size: int) -> Tensor:
    x = _as_tensor(x)
    n, c, h, w = x.data.shape
    if h % size or w % size:
        raise ShapeError(f"avg_pool2d size {size} does not divide spatial dims {h}x{w}")
    oh, ow = h // size, w // size
    blocks = x.data.reshape(n, c, oh, size, ow, size)
    data = blocks.mean(axis=(3, 5))

    def backward(g):
        gx = np.repeat(np.repeat(g, size, axis=2), size, axis=3) / (size * size)
        x._accumulate(gx)

    return _make(data, (x,), backward)


def max_pool2d(x, size: int) -> Tensor:
    x = _as_tensor(x)
    n, c, h, w = x.data.shape
    if h % size or w % size:
        raise ShapeError(f"max_pool2d size {size} does not divide spatial dims {h}x{w}")
    oh, ow = h // size, w // size
    blocks = x.data.reshape(n, c, oh, size, ow, size).transpose(0, 1, 2, 4, 3, 5)
    flat = blocks.reshape(n, c, oh, ow, size * size)
    idx = flat.argmax(axis=-1)
    data = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, idx[..., None], g[..., None], axis=-1)
        gx = gflat.reshape(n, c, oh, ow, size, size).transpose(0, 1, 2, 4, 3, 5)
        x._accumulate(gx.reshape(n, c, h, w))

    return _make(data, (x,), backward)


# ---- batch normalization -------------------------------------------------

def _bn_axes(x: np.ndarray):
    if x.ndim == 4:
        return (0, 2, 3)
    if x.ndim == 2:
        return (0,)
    raise ShapeError(f"batchnorm expects 2D or 4D input, got shape {x.shape}")


def _bn_param_shape(x: np.ndarray):
    if x.ndim == 4:
        return (1, x.shape[1], 1, 1)
    return (1, x.shape[1])


def channel_mean(x) -> Tensor:
    """Per-channel mean over batch and spatial axes; differentiable."""
    x = _as_tensor(x)
    axes = _bn_axes(x.data)
    m = float(np.prod([x.data.shape[i] for i in axes]))
    data = x.data.mean(axis=axes)

    def backward(g):
        gx = np.broadcast_to(g.reshape(_bn_param_shape(x.data)), x.data.shape) / m
        x._accumulate(gx.copy())

    return _make(data, (x,), backward)


def channel_var(x) -> Tensor:
    """Per-channel population variance over batch and spatial axes; differentiable."""
    x = _as_tensor(x)
    axes = _bn_axes(x.data)
    m = float(np.prod([x.data.shape[i] for i in axes]))
    mu = x.data.mean(axis=axes, keepdims=True)
    data = ((x.data - mu) ** 2).mean(axis=axes)

    def backward(g):
        gb = np.broadcast_to(g.reshape(_bn_param_shape(x.data)), x.data.shape)
        x._accumulate(gb * 2.0 * (x.data - mu) / m)

    return _make(data, (x,), backward)


def batchnorm_train(x, gamma, beta, eps: float):
    """Train-mode BN: normalize by batch statistics.

    Returns (y, batch_mean, batch_var) with batch moments as plain arrays;
    variance is the population variance over (batch x spatial) per channel.
    """
    x = _as_tensor(x)
    gamma = _as_tensor(gamma, x.dtype)
    beta = _as_tensor(beta, x.dtype)
    axes = _bn_axes(x.data)
    shape = _bn_param_shape(x.data)
    m = float(np.prod([x.data.shape[i] for i in axes]))
    mu = x.data.mean(axis=axes, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    data = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)

    def backward(g):
        if gamma.requires_grad or gamma._prev:
            gamma._accumulate((g * xhat).sum(axis=axes))
        if beta.requires_grad or beta._prev:
            beta._accumulate(g.sum(axis=axes))
        if x.requires_grad or x._prev:
            gy = g * gamma.data.reshape(shape)
            gx = inv * (gy - gy.mean(axis=axes, keepdims=True)
                        - xhat * (gy * xhat).mean(axis=axes, keepdims=True))
            x._accumulate(gx)

    out = _make(data, (x, gamma, beta), backward)
    return out, mu.reshape(-1).copy(), var.reshape(-1).copy()


def batchnorm_eval(x, gamma, beta, rm, rv, eps: float) -> Tensor:
    """Eval-mode BN: normalize by the supplied running statistics (affine in x)."""
    x = _as_tensor(x)
    gamma = _as_tensor(gamma, x.dtype)
    beta = _as_tensor(beta, x.dtype)
    shape = _bn_param_shape(x.data)
    rm = np.asarray(rm, dtype=x.dtype).reshape(shape)
    inv = (1.0 / np.sqrt(np.asarray(rv, dtype=np.float64) + eps)).astype(x.dtype).reshape(shape)
    scale = gamma.data.reshape(shape) * inv
    data = (x.data - rm) * scale + beta.data.reshape(shape)
    axes = _bn_axes(x.data)

    def backward(g):
        if gamma.requires_grad or gamma._prev:
            gamma._accumulate((g * (x.data - rm) * inv).sum(axis=axes))
        if beta.requires_grad or beta._prev:
            beta._accumulate(g.sum(axis=axes))
        if x.requires_grad or x._prev:
            x._accumulate(g * scale)

    return _make(data, (x, gamma, beta), backward)


# ---- losses ---------------------------------------------------------------

def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def softmax_cross_entropy(logits, targets) -> Tensor:
    """Mean cross-entropy; targets are probability rows (one-hot or mixed)."""
    logits = _as_tensor(logits)
    t = np.asarray(targets, dtype=logits.dtype)
    if t.shape != logits.data.shape:
        raise ShapeError(f"targets shape {t.shape} != logits shape {logits.shape}")
    n = logits.data.shape[0]
    logp = log_softmax(logits.data)
    data = np.asarray(-(t * logp).sum() / n, dtype=logits.dtype)

    def backward(g):
        p = np.exp(logp)
        logits._accumulate(g * (p - t) / n)

    return _make(data, (logits,), backward)


def kl_div_with_logits(student_logits, teacher_probs) -> Tensor:
    """Mean KL(teacher || softmax(student)); teacher side is a constant."""
    logits = _as_tensor(student_logits)
    p = np.asarray(teacher_probs, dtype=np.float64)
    n = logits.data.shape[0]
    logq = log_softmax(logits.data.astype(np.float64))
    logp = np.log(np.clip(p, 1e-12, None))
    data = np.asarray((p * (logp - logq)).sum() / n, dtype=logits.dtype)

    def backward(g):
        q = np.exp(logq)
        logits._accumulate((g * (q - p) / n).astype(logits.dtype))

    return _make(data, (logits,), backward)


def mse(a, b) -> Tensor:
    """Mean squared error against a constant target."""
    a = _as_tensor(a)
    t = np.asarray(b, dtype=a.dtype)
    diff = a.data - t
    data = np.asarray((diff ** 2).mean(), dtype=a.dtype)

    def backward(g):
        a._accumulate(g * 2.0 * diff / diff.size)

    return _make(data, (a,), backward)


def onehot(labels, num_classes: int, dtype=DEFAULT_DTYPE) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], num_classes), dtype=dtype)
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out
