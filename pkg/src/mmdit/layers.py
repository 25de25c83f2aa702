"""Trainable layers and embeddings on top of the tensor core."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ShapeError


def init_normal(rng, shape, std):
    return T.Tensor(rng.standard_normal(shape) * std, requires_grad=True)


def init_zeros(shape):
    return T.Tensor(np.zeros(shape), requires_grad=True)


class Linear:
    """y = x @ w + b over the last axis."""

    def __init__(self, d_in, d_out, rng=None, bias=True, zero_init=False):
        if zero_init:
            self.w = init_zeros((d_in, d_out))
        else:
            self.w = init_normal(rng, (d_in, d_out), 1.0 / np.sqrt(d_in))
        self.b = init_zeros((d_out,)) if bias else None

    def __call__(self, x):
        out = T.matmul(x, self.w)
        if self.b is not None:
            out = T.broadcast_add(out, T.reshape(self.b, (1,) * (out.ndim - 1) + (self.b.shape[0],)))
        return out

    def named_params(self):
        out = {"w": self.w}
        if self.b is not None:
            out["b"] = self.b
        return out


def layer_norm(x, g, b, eps=1e-6):
    """Fused last-axis layer norm with learnable affine (single tape node)."""
    xd = x.data
    mean = xd.mean(axis=-1, keepdims=True)
    centered = xd - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    normed = centered * rstd
    out = normed * g.data + b.data

    def vjp(dy):
        n = xd.shape[-1]
        lead = tuple(range(dy.ndim - 1))
        dg = (dy * normed).sum(axis=lead)
        db = dy.sum(axis=lead)
        dn = dy * g.data
        dx = rstd * (dn - dn.mean(axis=-1, keepdims=True)
                     - normed * (dn * normed).mean(axis=-1, keepdims=True))
        return (dx, dg, db)

    return T.make_op(out, (x, g, b), vjp)


class LayerNorm:
    """Normalization over the last axis with learnable affine."""

    def __init__(self, dim, eps=1e-6):
        self.g = T.Tensor(np.ones(dim), requires_grad=True)
        self.b = init_zeros((dim,))
        self.eps = eps
        self.dim = dim

    def __call__(self, x):
        return layer_norm(x, self.g, self.b, self.eps)

    def named_params(self):
        return {"g": self.g, "b": self.b}


def conv2d(x, w, stride=1, padding=0):
    """2D convolution, NCHW input and (out, in, kh, kw) weight."""
    bsz, c, h, wid = x.shape
    o, ci, kh, kw = w.shape
    if ci != c:
        raise ShapeError(f"conv2d channels: input {c} vs weight {ci}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wid + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output collapsed: input {x.shape}, kernel {w.shape}")

    if kh == stride and kw == stride and padding == 0 and h % stride == 0 and wid % stride == 0:
        return _conv2d_patchify(x, w, stride, ho, wo)
    return _conv2d_general(x, w, stride, padding, ho, wo)


def _conv2d_patchify(x, w, s, ho, wo):
    # kernel == stride, no padding: space-to-depth then one matmul
    bsz, c = x.shape[0], x.shape[1]
    o = w.shape[0]
    xd, wd = x.data, w.data
    cols = xd.reshape(bsz, c, ho, s, wo, s).transpose(0, 2, 4, 1, 3, 5).reshape(bsz, ho, wo, c * s * s)
    wf = wd.reshape(o, -1)
    out = np.ascontiguousarray((cols @ wf.T).transpose(0, 3, 1, 2))

    def vjp(dy):
        dyt = dy.transpose(0, 2, 3, 1)
        dcols = dyt @ wf
        dx = dcols.reshape(bsz, ho, wo, c, s, s).transpose(0, 3, 1, 4, 2, 5).reshape(xd.shape)
        dw = np.tensordot(dyt, cols, axes=([0, 1, 2], [0, 1, 2])).reshape(wd.shape)
        return (np.ascontiguousarray(dx), dw)

    return T.make_op(out, (x, w), vjp)


def _conv2d_general(x, w, s, p, ho, wo):
    bsz, c = x.shape[0], x.shape[1]
    o, _, kh, kw = w.shape
    xd, wd = x.data, w.data
    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))) if p else xd
    out = np.zeros((bsz, o, ho, wo))
    for i in range(kh):
        for j in range(kw):
            xs = xp[:, :, i : i + s * ho : s, j : j + s * wo : s]
            out += np.moveaxis(np.tensordot(wd[:, :, i, j], xs, axes=([1], [1])), 0, 1)

    def vjp(dy):
        dw = np.zeros_like(wd)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                xs = xp[:, :, i : i + s * ho : s, j : j + s * wo : s]
                dw[:, :, i, j] = np.tensordot(dy, xs, axes=([0, 2, 3], [0, 2, 3]))
                dxp[:, :, i : i + s * ho : s, j : j + s * wo : s] += np.moveaxis(
                    np.tensordot(wd[:, :, i, j], dy, axes=([0], [1])), 0, 1)
        dx = dxp[:, :, p : p + xd.shape[2], p : p + xd.shape[3]] if p else dxp
        return (np.ascontiguousarray(dx), dw)

    return T.make_op(np.ascontiguousarray(out), (x, w), vjp)


class Conv2d:
    def __init__(self, c_in, c_out, kernel, stride=1, padding=0, rng=None,
                 bias=True, zero_init=False):
        fan_in = c_in * kernel * kernel
        if zero_init:
            self.w = init_zeros((c_out, c_in, kernel, kernel))
        else:
            self.w = init_normal(rng, (c_out, c_in, kernel, kernel), 1.0 / np.sqrt(fan_in))
        self.b = init_zeros((c_out,)) if bias else None
        self.stride = stride
        self.padding = padding

    def __call__(self, x):
        out = conv2d(x, self.w, self.stride, self.padding)
        if self.b is not None:
            out = T.broadcast_add(out, T.reshape(self.b, (1, self.b.shape[0], 1, 1)))
        return out

    def named_params(self):
        out = {"w": self.w}
        if self.b is not None:
            out["b"] = self.b
        return out


def upsample_nearest(x, factor):
    """(B, C, h, w) -> (B, C, h*factor, w*factor), differentiable."""
    if factor == 1:
        return x
    b, c, h, w = x.shape
    expanded = T.reshape(x, (b, c, h, 1, w, 1))
    ones = T.Tensor._wrap(np.ones((1, 1, 1, factor, 1, factor)))
    return T.reshape(T.broadcast_mul(expanded, ones), (b, c, h * factor, w * factor))


def sinusoidal_embedding(t, dim, max_period=10000.0):
    """(B,) timesteps -> (B, dim) fixed sin/cos features (constant tensor)."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / half)
    ang = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.cos(ang), np.sin(ang)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((t.shape[0], 1))], axis=1)
    return T.Tensor._wrap(emb)


def pos_embed_2d(grid_h, grid_w, dim):
    """Fixed 2D sin/cos positional table, (grid_h*grid_w, dim) ndarray."""
    if dim % 4:
        raise ShapeError(f"2D positional embedding needs dim % 4 == 0, got {dim}")
    quarter = dim // 4
    freqs = np.exp(-np.log(10000.0) * np.arange(quarter) / quarter)
    ys, xs = np.meshgrid(np.arange(grid_h), np.arange(grid_w), indexing="ij")
    parts = []
    for coord in (ys.reshape(-1), xs.reshape(-1)):
        ang = coord[:, None] * freqs[None, :]
        parts.extend([np.sin(ang), np.cos(ang)])
    return np.concatenate(parts, axis=1)
