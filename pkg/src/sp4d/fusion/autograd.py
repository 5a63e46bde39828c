"""A small tape-based reverse-mode autodiff over numpy arrays.

Images are NHWC. Every op keeps the dtype of its inputs, so the same graph
runs in float32 for training and float64 for gradient checks.
"""

from __future__ import annotations

import numpy as np


class Tensor:
    __slots__ = ("data", "grad", "parents", "backward_fn", "name")

    def __init__(self, data, parents=(), backward_fn=None, name=None):
        self.data = data
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, name={self.name})"


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def param(arr, name=None) -> Tensor:
    return Tensor(arr, name=name)


def _acc(t: Tensor, g):
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def backward(loss: Tensor, seed_grad=None) -> None:
    """Accumulate d loss / d x into ``x.grad`` for every ancestor."""
    order, seen = [], set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data) if seed_grad is None else seed_grad
    for node in reversed(order):
        if node.backward_fn is not None and node.grad is not None:
            node.backward_fn(node.grad)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data, (a, b))

    def bw(g):
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, _unbroadcast(g, b.shape))
    out.backward_fn = bw
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data, (a, b))

    def bw(g):
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, _unbroadcast(-g, b.shape))
    out.backward_fn = bw
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data, (a, b))

    def bw(g):
        _acc(a, _unbroadcast(g * b.data, a.shape))
        _acc(b, _unbroadcast(g * a.data, b.shape))
    out.backward_fn = bw
    return out


def square(a: Tensor) -> Tensor:
    out = Tensor(a.data * a.data, (a,))
    out.backward_fn = lambda g: _acc(a, 2 * g * a.data)
    return out


def silu(a: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(a.data * s, (a,))
    out.backward_fn = lambda g: _acc(a, g * s * (1 + a.data * (1 - s)))
    return out


def relu(a: Tensor) -> Tensor:
    m = a.data > 0
    out = Tensor(a.data * m, (a,))
    out.backward_fn = lambda g: _acc(a, g * m)
    return out


def total(a: Tensor) -> Tensor:
    out = Tensor(np.sum(a.data).reshape(()), (a,))
    out.backward_fn = lambda g: _acc(a, np.broadcast_to(g, a.shape).copy())
    return out


def sum_axes(a: Tensor, axes) -> Tensor:
    out = Tensor(np.sum(a.data, axis=axes, keepdims=True), (a,))
    out.backward_fn = lambda g: _acc(a, np.broadcast_to(g, a.shape).copy())
    return out


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape), (a,))
    out.backward_fn = lambda g: _acc(a, g.reshape(a.shape))
    return out


def concat(ts, axis=-1) -> Tensor:
    ts = [as_tensor(t) for t in ts]
    out = Tensor(np.concatenate([t.data for t in ts], axis=axis), tuple(ts))
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        for t, gi in zip(ts, np.split(g, sizes, axis=axis)):
            _acc(t, gi)
    out.backward_fn = bw
    return out


def take_rows(a: Tensor, idx) -> Tensor:
    """``a.data[idx]`` along axis 0."""
    idx = np.asarray(idx)
    out = Tensor(a.data[idx], (a,))

    def bw(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        _acc(a, ga)
    out.backward_fn = bw
    return out


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, w: Tensor) -> Tensor:
    """(..., K) @ (K, M)."""
    out = Tensor(a.data @ w.data, (a, w))

    def bw(g):
        _acc(a, g @ w.data.T)
        a2 = a.data.reshape(-1, a.shape[-1])
        _acc(w, a2.T @ g.reshape(-1, g.shape[-1]))
    out.backward_fn = bw
    return out


def linear(a: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(a, w)
    return add(y, b) if b is not None else y


def const_matmul(M: np.ndarray, a: Tensor) -> Tensor:
    """Constant matrix on the left: (P, N) @ (N, C)."""
    out = Tensor(M @ a.data, (a,))
    out.backward_fn = lambda g: _acc(a, M.T @ g)
    return out


def _im2col(xp, kh, kw, H, W):
    N, _, _, C = xp.shape
    cols = np.empty((N, H, W, kh, kw, C), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i:i + H, j:j + W, :]
    return cols.reshape(N * H * W, kh * kw * C)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Stride-1 'same' convolution; ``w`` is (kh, kw, Cin, Cout), odd k."""
    kh, kw, C, O = w.shape
    N, H, W, _ = x.shape
    if kh == 1 and kw == 1:
        y = matmul(x, reshape(w, (C, O)))
        return add(y, b) if b is not None else y
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    cols = _im2col(xp, kh, kw, H, W)
    wm = w.data.reshape(kh * kw * C, O)
    y = (cols @ wm).reshape(N, H, W, O)
    if b is not None:
        y = y + b.data
    parents = (x, w) if b is None else (x, w, b)
    out = Tensor(y, parents)

    def bw(g):
        g2 = g.reshape(-1, O)
        _acc(w, (cols.T @ g2).reshape(w.shape))
        if b is not None:
            _acc(b, g2.sum(axis=0))
        dcols = (g2 @ wm.T).reshape(N, H, W, kh, kw, C)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i:i + H, j:j + W, :] += dcols[:, :, :, i, j, :]
        _acc(x, dxp[:, ph:ph + H, pw:pw + W, :])
    out.backward_fn = bw
    return out


# ---------------------------------------------------------------------------
# normalization and resampling


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    N, H, W, C = x.shape
    G = groups
    xr = x.data.reshape(N, H * W, G, C // G)
    mu = xr.mean(axis=(1, 3), keepdims=True)
    var = xr.var(axis=(1, 3), keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = ((xr - mu) * rstd).reshape(N, H, W, C)
    out = Tensor(xhat * gamma.data + beta.data, (x, gamma, beta))
    M = H * W * (C // G)

    def bw(g):
        _acc(gamma, (g * xhat).sum(axis=(0, 1, 2)))
        _acc(beta, g.sum(axis=(0, 1, 2)))
        dxh = (g * gamma.data).reshape(N, H * W, G, C // G)
        xh = xhat.reshape(N, H * W, G, C // G)
        s1 = dxh.sum(axis=(1, 3), keepdims=True)
        s2 = (dxh * xh).sum(axis=(1, 3), keepdims=True)
        dx = rstd / M * (M * dxh - s1 - xh * s2)
        _acc(x, dx.reshape(N, H, W, C))
    out.backward_fn = bw
    return out


def avgpool2(x: Tensor) -> Tensor:
    N, H, W, C = x.shape
    out = Tensor(x.data.reshape(N, H // 2, 2, W // 2, 2, C).mean(axis=(2, 4)), (x,))

    def bw(g):
        gg = np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * 0.25
        _acc(x, gg.astype(x.data.dtype, copy=False))
    out.backward_fn = bw
    return out


def upsample2(x: Tensor) -> Tensor:
    N, H, W, C = x.shape
    out = Tensor(np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2), (x,))
    out.backward_fn = lambda g: _acc(x, g.reshape(N, H, 2, W, 2, C).sum(axis=(2, 4)))
    return out


# ---------------------------------------------------------------------------
# custom losses


def custom_scalar(inputs, value: float, grads) -> Tensor:
    """Scalar node with precomputed gradients w.r.t. ``inputs``."""
    dt = inputs[0].data.dtype
    out = Tensor(np.asarray(value, dtype=dt).reshape(()), tuple(inputs))

    def bw(g):
        for t, gi in zip(inputs, grads):
            _acc(t, (g * gi).astype(dt, copy=False))
    out.backward_fn = bw
    return out
