"""Differentiable operators for the segmentation network.

Two convolution code paths exist: a direct per-tap accumulation (the
correctness reference, memory-light) and an im2col+GEMM path used when the
column buffer fits comfortably in memory.  Both are exercised against each
other in the test suite.
"""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError
from .tensor import Tensor, record

# im2col buffers above this size fall back to the per-tap path
_IM2COL_BYTE_LIMIT = 192 * 1024 * 1024


# ---------------------------------------------------------------------------
# convolution internals (raw ndarray level)
# ---------------------------------------------------------------------------

def _conv_out_dims(spatial, k: int, stride: int, pad: int):
    return tuple((s + 2 * pad - k) // stride + 1 for s in spatial)


def _pad5(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad)))


def _im2col(xp: np.ndarray, k: int, stride: int, out_spatial) -> np.ndarray:
    """(N,C,Dp,Hp,Wp) padded input -> (N, C*k^3, V) column matrix."""
    n, c = xp.shape[:2]
    do, ho, wo = out_spatial
    cols = np.empty((n, c, k, k, k, do, ho, wo), dtype=xp.dtype)
    for kd in range(k):
        for kh in range(k):
            for kw in range(k):
                cols[:, :, kd, kh, kw] = xp[
                    :, :,
                    kd:kd + stride * do:stride,
                    kh:kh + stride * ho:stride,
                    kw:kw + stride * wo:stride,
                ]
    return cols.reshape(n, c * k * k * k, do * ho * wo)


def _col2im_add(gcols: np.ndarray, gxp: np.ndarray, k: int, stride: int, out_spatial) -> None:
    """Scatter-add (N, C*k^3, V) columns back into the padded input grad."""
    n, c = gxp.shape[:2]
    do, ho, wo = out_spatial
    g6 = gcols.reshape(n, c, k, k, k, do, ho, wo)
    for kd in range(k):
        for kh in range(k):
            for kw in range(k):
                gxp[
                    :, :,
                    kd:kd + stride * do:stride,
                    kh:kh + stride * ho:stride,
                    kw:kw + stride * wo:stride,
                ] += g6[:, :, kd, kh, kw]


def _unpad5(xp: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return xp
    return xp[:, :, pad:-pad, pad:-pad, pad:-pad]


def _use_im2col(n, c, k, out_spatial, itemsize) -> bool:
    v = int(np.prod(out_spatial))
    return n * c * k ** 3 * v * itemsize <= _IM2COL_BYTE_LIMIT


def _conv_forward_raw(x: np.ndarray, w: np.ndarray, b, stride: int, pad: int) -> np.ndarray:
    n, c = x.shape[:2]
    f, _, k = w.shape[:3]
    out_spatial = _conv_out_dims(x.shape[2:], k, stride, pad)
    do, ho, wo = out_spatial
    if k == 1 and stride == 1 and pad == 0:
        out = np.matmul(w.reshape(f, c), x.reshape(n, c, -1))
    else:
        xp = _pad5(x, pad)
        if _use_im2col(n, c, k, out_spatial, x.itemsize):
            cols = _im2col(xp, k, stride, out_spatial)
            out = np.matmul(w.reshape(f, -1), cols)
        else:
            out = np.zeros((n, f, do * ho * wo), dtype=x.dtype)
            for kd in range(k):
                for kh in range(k):
                    for kw in range(k):
                        xs = np.ascontiguousarray(xp[
                            :, :,
                            kd:kd + stride * do:stride,
                            kh:kh + stride * ho:stride,
                            kw:kw + stride * wo:stride,
                        ]).reshape(n, c, -1)
                        out += np.matmul(w[:, :, kd, kh, kw], xs)
    if b is not None:
        out += b[:, None]
    return out.reshape(n, f, do, ho, wo)


def _conv_grad_w_raw(x: np.ndarray, gout: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    """d(conv)/d(w): contraction of input columns with the output grad."""
    n, c = x.shape[:2]
    f = gout.shape[1]
    out_spatial = gout.shape[2:]
    do, ho, wo = out_spatial
    gflat = gout.reshape(n, f, -1)
    if k == 1 and stride == 1 and pad == 0:
        gw = np.einsum("nfv,ncv->fc", gflat, x.reshape(n, c, -1), optimize=True)
        return np.ascontiguousarray(gw).reshape(f, c, 1, 1, 1)
    xp = _pad5(x, pad)
    if _use_im2col(n, c, k, out_spatial, x.itemsize):
        cols = _im2col(xp, k, stride, out_spatial)
        gw = np.einsum("nfv,nkv->fk", gflat, cols, optimize=True)
        return np.ascontiguousarray(gw).reshape(f, c, k, k, k)
    gw = np.empty((f, k ** 3, c), dtype=x.dtype)
    t = 0
    for kd in range(k):
        for kh in range(k):
            for kw in range(k):
                xs = np.ascontiguousarray(xp[
                    :, :,
                    kd:kd + stride * do:stride,
                    kh:kh + stride * ho:stride,
                    kw:kw + stride * wo:stride,
                ]).reshape(n, c, -1)
                gw[:, t] = np.einsum("nfv,ncv->fc", gflat, xs, optimize=True)
                t += 1
    return np.ascontiguousarray(gw.transpose(0, 2, 1)).reshape(f, c, k, k, k)


def _conv_grad_x_raw(gout: np.ndarray, w: np.ndarray, stride: int, pad: int, in_spatial) -> np.ndarray:
    """d(conv)/d(x): the adjoint map, also the transposed-conv forward."""
    n = gout.shape[0]
    f, c, k = w.shape[:3]
    out_spatial = gout.shape[2:]
    do, ho, wo = out_spatial
    gflat = gout.reshape(n, f, -1)
    if k == 1 and stride == 1 and pad == 0:
        gx = np.matmul(w.reshape(f, c).T, gflat)
        return gx.reshape(n, c, *in_spatial)
    padded = tuple(s + 2 * pad for s in in_spatial)
    gxp = np.zeros((n, c) + padded, dtype=gout.dtype)
    if _use_im2col(n, c, k, out_spatial, gout.itemsize):
        gcols = np.matmul(w.reshape(f, -1).T, gflat)
        _col2im_add(gcols, gxp, k, stride, out_spatial)
    else:
        for kd in range(k):
            for kh in range(k):
                for kw in range(k):
                    gs = np.matmul(w[:, :, kd, kh, kw].T, gflat).reshape(n, c, do, ho, wo)
                    gxp[
                        :, :,
                        kd:kd + stride * do:stride,
                        kh:kh + stride * ho:stride,
                        kw:kw + stride * wo:stride,
                    ] += gs
    return np.ascontiguousarray(_unpad5(gxp, pad))


# ---------------------------------------------------------------------------
# differentiable ops
# ---------------------------------------------------------------------------

def conv3d(x: Tensor, w: Tensor, b: Tensor | None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of (N,C,D,H,W) with (F,C,k,k,k) kernels.

    stride=2 with pad=k//2 halves even spatial dims exactly.
    """
    if x.data.ndim != 5 or w.data.ndim != 5:
        raise ShapeError(f"conv3d expects 5-d input/weights, got {x.shape} / {w.shape}")
    f, cw, k = w.shape[0], w.shape[1], w.shape[2]
    if k % 2 == 0 or w.shape[2:] != (k, k, k):
        raise ShapeError(f"conv3d kernel must be odd and cubic, got {w.shape[2:]}")
    if x.shape[1] != cw:
        raise ShapeError(f"channel mismatch: input {x.shape[1]} vs kernel {cw}")
    if b is not None and b.shape != (f,):
        raise ShapeError(f"bias shape {b.shape} != ({f},)")
    out_spatial = _conv_out_dims(x.shape[2:], k, stride, pad)
    if min(out_spatial) < 1:
        raise ShapeError(f"non-positive output dims {out_spatial} for input {x.shape[2:]}")

    out = Tensor(_conv_forward_raw(x.data, w.data, None if b is None else b.data, stride, pad))
    xd, wd = x.data, w.data
    in_spatial = x.shape[2:]

    def vjp(gout):
        gx = _conv_grad_x_raw(gout, wd, stride, pad, in_spatial)
        gw = _conv_grad_w_raw(xd, gout, k, stride, pad)
        if b is None:
            return gx, gw
        return gx, gw, gout.sum(axis=(0, 2, 3, 4))

    record(out, (x, w) if b is None else (x, w, b), vjp)
    return out


def conv3d_transpose(x: Tensor, w: Tensor, b: Tensor | None, stride: int = 2) -> Tensor:
    """Adjoint of ``conv3d(stride, pad=k//2)``; doubles spatial dims at stride 2.

    Weight layout matches conv3d: (F, C, k, k, k) with F the *input*
    channels of the transpose and C its output channels.
    """
    if stride != 2:
        raise ShapeError("conv3d_transpose supports stride=2 only")
    if x.data.ndim != 5 or w.data.ndim != 5:
        raise ShapeError(f"conv3d_transpose expects 5-d input/weights, got {x.shape} / {w.shape}")
    f, c, k = w.shape[0], w.shape[1], w.shape[2]
    if k % 2 == 0:
        raise ShapeError("kernel must be odd")
    if x.shape[1] != f:
        raise ShapeError(f"channel mismatch: input {x.shape[1]} vs kernel {f}")
    if b is not None and b.shape != (c,):
        raise ShapeError(f"bias shape {b.shape} != ({c},)")
    pad = k // 2
    out_spatial = tuple(s * stride for s in x.shape[2:])

    y = _conv_grad_x_raw(x.data, w.data, stride, pad, out_spatial)
    if b is not None:
        y = y + b.data[:, None, None, None]
    out = Tensor(y)
    xd, wd = x.data, w.data

    def vjp(gout):
        gx = _conv_forward_raw(gout, wd, None, stride, pad)
        gw = _conv_grad_w_raw(gout, xd, k, stride, pad)
        if b is None:
            return gx, gw
        return gx, gw, gout.sum(axis=(0, 2, 3, 4))

    record(out, (x, w) if b is None else (x, w, b), vjp)
    return out


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-(sample, channel) normalization over the spatial dims."""
    if x.data.ndim != 5:
        raise ShapeError(f"instance_norm expects (N,C,D,H,W), got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta must be ({c},), got {gamma.shape}/{beta.shape}")
    if int(np.prod(x.shape[2:])) < 2:
        raise ShapeError("instance_norm needs at least 2 spatial voxels")
    axes = (2, 3, 4)
    mean = x.data.mean(axis=axes, keepdims=True)
    var = x.data.var(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    xhat = (x.data - mean) * inv_std
    out = Tensor(gamma.data[:, None, None, None] * xhat + beta.data[:, None, None, None])

    def vjp(gout):
        g = gamma.data[:, None, None, None]
        gxhat = gout * g
        m1 = gxhat.mean(axis=axes, keepdims=True)
        m2 = (gxhat * xhat).mean(axis=axes, keepdims=True)
        gx = inv_std * (gxhat - m1 - xhat * m2)
        ggamma = (gout * xhat).sum(axis=(0, 2, 3, 4))
        gbeta = gout.sum(axis=(0, 2, 3, 4))
        return gx, ggamma, gbeta

    record(out, (x, gamma, beta), vjp)
    return out


def elu(x: Tensor) -> Tensor:
    """ELU with alpha=1: x for x>=0, exp(x)-1 otherwise."""
    neg = x.data < 0
    y = np.where(neg, np.expm1(np.minimum(x.data, 0)), x.data)
    out = Tensor(y)

    def vjp(gout):
        return (gout * np.where(neg, y + 1.0, 1.0),)

    record(out, (x,), vjp)
    return out


def softmax_channels(x: Tensor) -> Tensor:
    """Softmax along axis 1; per-voxel channel sums equal 1."""
    if x.data.ndim < 2:
        raise ShapeError(f"softmax_channels expects a channel axis, got {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)
    out = Tensor(s)

    def vjp(gout):
        dot = (gout * s).sum(axis=1, keepdims=True)
        return (s * (gout - dot),)

    record(out, (x,), vjp)
    return out


def channel_dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    """Zero each (n, c) channel independently with probability p; survivors
    are scaled by 1/(1-p) so eval-time sampling needs no rescaling."""
    if not 0.0 <= p < 1.0:
        raise ShapeError(f"dropout probability must be in [0,1), got {p}")
    if p == 0.0:
        return x
    if rng is None:
        raise ValueError("channel_dropout with p>0 needs an explicit rng")
    n, c = x.shape[:2]
    keep = rng.random((n, c)) >= p
    scale = np.asarray(1.0 / (1.0 - p), dtype=x.dtype)
    mask = keep.astype(x.dtype) * scale
    mask = mask.reshape(n, c, *([1] * (x.data.ndim - 2)))
    out = Tensor(x.data * mask)

    def vjp(gout):
        return (gout * mask,)

    record(out, (x,), vjp)
    return out


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels mismatch: {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out = Tensor(np.concatenate([a.data, b.data], axis=1))

    def vjp(gout):
        return gout[:, :ca], gout[:, ca:]

    record(out, (a, b), vjp)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data)
    record(out, (a, b), lambda gout: (gout, gout))
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub shape mismatch: {a.shape} vs {b.shape}")
    out = Tensor(a.data - b.data)
    record(out, (a, b), lambda gout: (gout, -gout))
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    out = Tensor(a.data * b.data)
    ad, bd = a.data, b.data
    record(out, (a, b), lambda gout: (gout * bd, gout * ad))
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"div shape mismatch: {a.shape} vs {b.shape}")
    out = Tensor(a.data / b.data)
    ad, bd = a.data, b.data
    record(out, (a, b), lambda gout: (gout / bd, -gout * ad / (bd * bd)))
    return out


def add_scalar(x: Tensor, s: float) -> Tensor:
    out = Tensor(x.data + np.asarray(s, dtype=x.dtype))
    record(out, (x,), lambda gout: (gout,))
    return out


def mul_scalar(x: Tensor, s: float) -> Tensor:
    sv = np.asarray(s, dtype=x.dtype)
    out = Tensor(x.data * sv)
    record(out, (x,), lambda gout: (gout * sv,))
    return out


def tsum(x: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    """Sum over the given axes (all axes when None); result keeps no dims."""
    out = Tensor(x.data.sum(axis=axes))
    shape = x.shape

    def vjp(gout):
        if axes is None:
            return (np.broadcast_to(gout, shape).astype(gout.dtype, copy=True),)
        expanded = np.expand_dims(gout, axes)
        return (np.broadcast_to(expanded, shape).astype(gout.dtype, copy=True),)

    record(out, (x,), vjp)
    return out


def tmean(x: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    count = x.size if axes is None else int(np.prod([x.shape[a] for a in axes]))
    return mul_scalar(tsum(x, axes), 1.0 / count)
