"""Reverse-mode automatic differentiation over numpy arrays.

Every op builds a new :class:`Tensor` that remembers its parents and a
closure propagating the output gradient back to them.  ``backward`` walks
the graph in reverse topological order, then releases it; a second call on
the same loss raises.

Image tensors use NHWC layout throughout.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

# op-count instrumentation: forward nodes recorded / backward closures run
OP_COUNTS = {"forward": 0, "backward": 0}


def reset_op_counts():
    OP_COUNTS["forward"] = 0
    OP_COUNTS["backward"] = 0


class ShapeError(ValueError):
    pass


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a, b, opname):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{opname}: incompatible shapes {a.shape} and {b.shape}") from None


class Tensor:
    def __init__(self, data, parents=(), op="", requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.op = op
        self._parents = parents
        self._backward = None
        self._consumed = False
        self.requires_grad = bool(requires_grad)

    # -- basic properties -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r})"

    def detach(self):
        return Tensor(self.data)

    # -- graph construction -------------------------------------------------
    @staticmethod
    def _make(data, parents, op, backward):
        needs = any(p.requires_grad for p in parents)
        out = Tensor(data, parents if needs else (), op, requires_grad=needs)
        if needs:
            out._backward = backward
            OP_COUNTS["forward"] += 1
        return out

    def _accum(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        if self._consumed:
            raise RuntimeError("backward called twice on the same graph; rebuild the forward pass first")
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        topo, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accum(grad)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                OP_COUNTS["backward"] += 1
        for node in topo:
            if node._backward is not None:
                # free intermediate storage; leaves keep their grad
                node._backward = None
                node._parents = ()
                if not isinstance(node, Parameter):
                    node.grad = None
            node._consumed = True
        self._consumed = True

    # -- arithmetic -------------------------------------------------------
    def __add__(self, other):
        other = as_tensor(other, self.dtype)
        _check_broadcast(self, other, "add")
        a, b = self, other

        def bw(g):
            a._accum(_unbroadcast(g, a.shape))
            b._accum(_unbroadcast(g, b.shape))

        return Tensor._make(a.data + b.data, (a, b), "add", bw)

    __radd__ = __add__

    def __neg__(self):
        a = self
        return Tensor._make(-a.data, (a,), "neg", lambda g: a._accum(-g))

    def __sub__(self, other):
        return self + (-as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return as_tensor(other, self.dtype) + (-self)

    def __mul__(self, other):
        other = as_tensor(other, self.dtype)
        _check_broadcast(self, other, "mul")
        a, b = self, other

        def bw(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(g * a.data, b.shape))

        return Tensor._make(a.data * b.data, (a, b), "mul", bw)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other, self.dtype)
        _check_broadcast(self, other, "div")
        a, b = self, other
        out_data = a.data / b.data

        def bw(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g / b.data, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(-g * out_data / b.data, b.shape))

        return Tensor._make(out_data, (a, b), "div", bw)

    def __rtruediv__(self, other):
        return as_tensor(other, self.dtype) / self

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise TypeError("only constant exponents are supported")
        a = self

        def bw(g):
            a._accum(g * p * a.data ** (p - 1))

        return Tensor._make(a.data ** p, (a,), f"pow{p}", bw)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        a = self

        def bw(g):
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            a._accum(full)

        return Tensor._make(a.data[idx], (a,), "getitem", bw)

    # -- reductions and shape -----------------------------------------------
    def sum(self, axis=None, keepdims=False):
        a = self

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accum(np.broadcast_to(g, a.shape))

        return Tensor._make(a.data.sum(axis=axis, keepdims=keepdims), (a,), "sum", bw)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod([self.shape[i] for i in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        return Tensor._make(a.data.reshape(shape), (a,), "reshape", lambda g: a._accum(g.reshape(a.shape)))

    def transpose(self, *axes):
        a = self
        axes = axes or tuple(reversed(range(a.ndim)))
        inv = np.argsort(axes)
        return Tensor._make(a.data.transpose(axes), (a,), "transpose", lambda g: a._accum(g.transpose(inv)))

    # -- elementwise nonlinearities ---------------------------------------
    def relu(self):
        a = self
        mask = a.data > 0
        return Tensor._make(a.data * mask, (a,), "relu", lambda g: a._accum(g * mask))

    def sigmoid(self):
        a = self
        out = _sigmoid(a.data)
        return Tensor._make(out, (a,), "sigmoid", lambda g: a._accum(g * out * (1 - out)))

    def exp(self):
        a = self
        out = np.exp(a.data)
        return Tensor._make(out, (a,), "exp", lambda g: a._accum(g * out))

    def log(self):
        a = self
        return Tensor._make(np.log(a.data), (a,), "log", lambda g: a._accum(g / a.data))

    def sqrt(self):
        a = self
        out = np.sqrt(a.data)
        return Tensor._make(out, (a,), "sqrt", lambda g: a._accum(g * 0.5 / out))

    def abs(self):
        a = self
        sign = np.sign(a.data)
        return Tensor._make(np.abs(a.data), (a,), "abs", lambda g: a._accum(g * sign))

    def clamp(self, lo, hi):
        a = self
        mask = (a.data >= lo) & (a.data <= hi)
        return Tensor._make(np.clip(a.data, lo, hi), (a,), "clamp", lambda g: a._accum(g * mask))


class Parameter(Tensor):
    """A trainable leaf.  ``grad`` is always an array shaped like ``data``."""

    def __init__(self, data, name="", dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name
        self.grad = np.zeros_like(self.data)
        self.state = {}

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)
        self._consumed = False

    def _accum(self, g):
        self.grad += g


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _sigmoid(x):
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# -- free-standing ops -------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bw(g):
        if a.requires_grad:
            a._accum(g @ b.data.T)
        if b.requires_grad:
            b._accum(a.data.T @ g)

    return Tensor._make(a.data @ b.data, (a, b), "matmul", bw)


def dot(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"dot: incompatible shapes {a.shape} and {b.shape}")
    return (a * b).sum()


def l2_norm(a, axis=None):
    """Euclidean norm; the gradient at the origin is taken as 0."""
    a = as_tensor(a)
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    safe = np.where(norm > 0, norm, 1.0)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        a._accum(g * np.where(norm > 0, a.data / safe, 0.0))

    out = norm.reshape(()) if axis is None else np.squeeze(norm, axis=axis)
    return Tensor._make(out, (a,), "l2_norm", bw)


def relu(a):
    return as_tensor(a).relu()


def sigmoid(a):
    return as_tensor(a).sigmoid()


def conv2d(x, weight, bias=None):
    """Stride-1 convolution with zero padding that preserves H and W.

    x: (B, H, W, C); weight: (k, k, C, O) with odd k; bias: (O,).
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or weight.shape[0] != weight.shape[1] or weight.shape[0] % 2 == 0:
        raise ShapeError(f"conv2d: incompatible shapes {x.shape} and {weight.shape}")
    if x.shape[3] != weight.shape[2]:
        raise ShapeError(f"conv2d: incompatible shapes {x.shape} and {weight.shape}")
    B, H, W, C = x.shape
    k, O = weight.shape[0], weight.shape[3]
    p = k // 2
    w2 = weight.data.reshape(k * k * C, O)
    if k == 1:
        cols = x.data.reshape(B * H * W, C)
    else:
        xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (0, 0)))
        win = sliding_window_view(xp, (k, k), axis=(1, 2))  # B,H,W,C,k,k
        cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(B * H * W, k * k * C)
    out = (cols @ w2).reshape(B, H, W, O)
    parents = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (O,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {O} output channels")
        out = out + bias.data
        parents = (x, weight, bias)

    def bw(g):
        g2 = g.reshape(B * H * W, O)
        if weight.requires_grad:
            weight._accum((cols.T @ g2).reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            bias._accum(g2.sum(axis=0))
        if x.requires_grad:
            gcols = (g2 @ w2.T).reshape(B, H, W, k, k, C)
            if k == 1:
                x._accum(gcols.reshape(B, H, W, C))
                return
            gxp = np.zeros((B, H + 2 * p, W + 2 * p, C), dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, i:i + H, j:j + W, :] += gcols[:, :, :, i, j, :]
            x._accum(gxp[:, p:p + H, p:p + W, :])

    return Tensor._make(out, parents, "conv2d", bw)


def avg_pool2(x):
    """2x2 spatial mean pooling (NHWC)."""
    x = as_tensor(x)
    B, H, W, C = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"avg_pool2: spatial shape {x.shape} not divisible by 2")
    out = x.data.reshape(B, H // 2, 2, W // 2, 2, C).mean(axis=(2, 4))

    def bw(g):
        g = np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * 0.25
        x._accum(g)

    return Tensor._make(out, (x,), "avg_pool2", bw)


def upsample2(x):
    """Nearest-neighbour 2x upsampling (NHWC)."""
    x = as_tensor(x)
    B, H, W, C = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)

    def bw(g):
        x._accum(g.reshape(B, H, 2, W, 2, C).sum(axis=(2, 4)))

    return Tensor._make(out, (x,), "upsample2", bw)


def spatial_mean(x):
    """Mean over H and W of an NHWC tensor -> (B, C)."""
    return as_tensor(x).mean(axis=(1, 2))


def batch_norm(x, gamma, beta, eps=1e-5):
    """Normalise over every axis but the last using batch statistics.

    Returns (output, batch_mean, batch_var) so callers can update running stats.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    C = x.shape[-1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"batch_norm: incompatible shapes {x.shape} and {gamma.shape}")
    axes = tuple(range(x.ndim - 1))
    n = x.data.size // C
    mu = x.data.mean(axis=axes)
    var = x.data.var(axis=axes)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        if gamma.requires_grad:
            gamma._accum((g * xhat).sum(axis=axes))
        if beta.requires_grad:
            beta._accum(g.sum(axis=axes))
        if x.requires_grad:
            gx = g * gamma.data
            x._accum(inv / n * (n * gx - gx.sum(axis=axes) - xhat * (gx * xhat).sum(axis=axes)))

    return Tensor._make(out, (x, gamma, beta), "batch_norm", bw), mu, var


def log_softmax(x, axis=-1):
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def bw(g):
        x._accum(g - soft * g.sum(axis=axis, keepdims=True))

    return Tensor._make(out, (x,), "log_softmax", bw)


def bce_with_logits(logits, target):
    """Elementwise binary cross-entropy on raw logits (numerically stable)."""
    logits = as_tensor(logits)
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=logits.dtype)
    z = logits.data
    out = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))

    def bw(g):
        logits._accum(g * (_sigmoid(z) - t))

    return Tensor._make(out, (logits,), "bce_logits", bw)


def broadcast_channels(x, n):
    """Repeat a (B, H, W, 1) map across n channels."""
    x = as_tensor(x)
    if x.shape[-1] != 1:
        raise ShapeError(f"broadcast_channels expects one channel, got {x.shape}")
    out = np.repeat(x.data, n, axis=-1)
    return Tensor._make(out, (x,), "bcast_ch", lambda g: x._accum(g.sum(axis=-1, keepdims=True)))
