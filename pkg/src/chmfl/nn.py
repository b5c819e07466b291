"""Volumetric network layers with forward and backward rules.

All volumetric tensors use the (batch, channel, depth, height, width) layout.
Convolutions are cross-correlations over zero-padded input, computed by
unfolding the input into columns and running one matrix product per batch.
"""

from __future__ import annotations

from typing import Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, make_result

IntOr3 = Union[int, Sequence[int]]

# upper bound on the number of elements in one unfolded column block
COLUMN_BUDGET = 1 << 25


def triple(v: IntOr3) -> Tuple[int, int, int]:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * 3
    v = tuple(int(e) for e in v)
    if len(v) != 3:
        raise ValueError(f"expected 3 values, got {v}")
    return v


# ---------------------------------------------------------------------------
# shape rules (shared with the shape-tracing backend)

def conv3d_shape(x_shape, w_shape, stride: IntOr3 = 1, padding: IntOr3 = 0) -> tuple:
    if len(x_shape) != 5 or len(w_shape) != 5:
        raise ValueError(f"conv3d expects 5-D input and weight, got {x_shape} and {w_shape}")
    if x_shape[1] != w_shape[1]:
        raise ValueError(f"conv3d: input has {x_shape[1]} channels, weight expects {w_shape[1]}")
    stride, padding = triple(stride), triple(padding)
    if min(stride) < 1 or min(padding) < 0:
        raise ValueError(f"invalid stride {stride} / padding {padding}")
    out = []
    for n, k, s, p in zip(x_shape[2:], w_shape[2:], stride, padding):
        e = (n + 2 * p - k) // s + 1
        if n + 2 * p - k < 0 or e < 1:
            raise ValueError(f"conv3d: non-positive output extent for input {x_shape[2:]}, kernel {w_shape[2:]}")
        out.append(e)
    return (x_shape[0], w_shape[0], *out)


def conv_transpose3d_shape(x_shape, w_shape, stride: IntOr3 = 1, padding: IntOr3 = 0) -> tuple:
    if len(x_shape) != 5 or len(w_shape) != 5:
        raise ValueError(f"conv_transpose3d expects 5-D input and weight, got {x_shape} and {w_shape}")
    if x_shape[1] != w_shape[0]:
        raise ValueError(f"conv_transpose3d: input has {x_shape[1]} channels, weight expects {w_shape[0]}")
    stride, padding = triple(stride), triple(padding)
    out = []
    for n, k, s, p in zip(x_shape[2:], w_shape[2:], stride, padding):
        e = (n - 1) * s + k - 2 * p
        if e < 1:
            raise ValueError("conv_transpose3d: non-positive output extent")
        out.append(e)
    return (x_shape[0], w_shape[1], *out)


def pool_vector_shape(x_shape) -> tuple:
    if len(x_shape) != 5 or min(x_shape[2:]) < 1:
        raise ValueError(f"adaptive pooling expects (b, c, D, H, W), got {x_shape}")
    return (x_shape[0], x_shape[1])


def fc_shape(x_shape, w_shape) -> tuple:
    if len(x_shape) != 2 or len(w_shape) != 2 or x_shape[1] != w_shape[1]:
        raise ValueError(f"fully_connected: input {x_shape} does not fit weight {w_shape}")
    return (x_shape[0], w_shape[0])


# ---------------------------------------------------------------------------
# unfolding helpers

def _pad(x: np.ndarray, padding) -> np.ndarray:
    if not any(padding):
        return x
    return np.pad(x, ((0, 0), (0, 0)) + tuple((p, p) for p in padding))


def _unfold(xp: np.ndarray, kernel, stride, out_ext, d0: int, d1: int) -> np.ndarray:
    """Columns (N, C*kd*kh*kw, (d1-d0)*Ho*Wo) for output depth rows d0..d1."""
    n, c = xp.shape[:2]
    sd, sh, sw = stride
    _, ho, wo = out_ext
    win = sliding_window_view(xp, kernel, axis=(2, 3, 4))
    win = win[:, :, d0 * sd:(d1 - 1) * sd + 1:sd, : (ho - 1) * sh + 1:sh, : (wo - 1) * sw + 1:sw]
    cols = np.ascontiguousarray(win.transpose(0, 1, 5, 6, 7, 2, 3, 4))
    return cols.reshape(n, c * kernel[0] * kernel[1] * kernel[2], (d1 - d0) * ho * wo)


def _depth_chunks(n_cols_per_row: int, depth: int):
    rows = max(1, COLUMN_BUDGET // max(1, n_cols_per_row))
    for d0 in range(0, depth, rows):
        yield d0, min(depth, d0 + rows)


def _fold_into(target: np.ndarray, cols: np.ndarray, kernel, stride, out_ext, d0: int) -> None:
    """Scatter-add columns back onto a padded grid (adjoint of ``_unfold``)."""
    n, c = target.shape[:2]
    kd, kh, kw = kernel
    sd, sh, sw = stride
    _, ho, wo = out_ext
    rows = cols.shape[-1] // (ho * wo)
    blocks = cols.reshape(n, c, kd, kh, kw, rows, ho, wo)
    for i in range(kd):
        di = d0 * sd + i
        for j in range(kh):
            for k in range(kw):
                target[:, :, di:di + (rows - 1) * sd + 1:sd, j:j + (ho - 1) * sh + 1:sh,
                       k:k + (wo - 1) * sw + 1:sw] += blocks[:, :, i, j, k]


def _crop(x: np.ndarray, padding) -> np.ndarray:
    if not any(padding):
        return x
    sl = tuple(slice(p, x.shape[2 + a] - p) for a, p in enumerate(padding))
    return x[(slice(None), slice(None)) + sl]


# ---------------------------------------------------------------------------
# convolution

def _flat_columns(xflat: np.ndarray, offsets: np.ndarray, start: int, length: int) -> np.ndarray:
    """Columns (N, C*len(offsets), length) read at fixed flat offsets."""
    n, c, _ = xflat.shape
    cols = np.empty((n, c, len(offsets), length), dtype=xflat.dtype)
    for idx, off in enumerate(offsets):
        cols[:, :, idx] = xflat[:, :, start + off:start + off + length]
    return cols.reshape(n, c * len(offsets), length)


def _conv3d_unit_stride(x: Tensor, weight: Tensor, bias: Optional[Tensor], padding, out_shape) -> Tensor:
    # Work on the flattened padded grid: every kernel offset becomes one
    # constant shift, so columns are contiguous slices. Outputs are computed
    # at padded row pitch and the wrap-around positions are discarded.
    kd, kh, kw = weight.shape[2:]
    n, o, do, ho, wo = out_shape
    c = x.shape[1]
    xp = _pad(x.data, padding)
    dp, hp, wp = xp.shape[2:]
    hw = hp * wp
    dtype = np.result_type(x.dtype, weight.dtype)
    xflat = np.zeros((n, c, dp * hw + hw), dtype=dtype)
    xflat[:, :, :dp * hw] = xp.reshape(n, c, -1)
    offsets = (np.arange(kd)[:, None, None] * hw + np.arange(kh)[:, None] * wp + np.arange(kw)).ravel()
    w2 = weight.data.reshape(o, -1)

    out = np.empty(out_shape, dtype=dtype)
    chunks = list(_depth_chunks(n * w2.shape[1] * hw, do))
    cached = None
    for d0, d1 in chunks:
        cols = _flat_columns(xflat, offsets, d0 * hw, (d1 - d0) * hw)
        y = np.matmul(w2, cols).reshape(n, o, d1 - d0, hp, wp)
        out[:, :, d0:d1] = y[..., :ho, :wo]
        if len(chunks) == 1:
            cached = cols
    if bias is not None:
        out += bias.data.reshape(1, o, 1, 1, 1)

    def bwd(g):
        dw = np.zeros_like(w2)
        dflat = np.zeros_like(xflat) if x.requires_grad else None
        for d0, d1 in chunks:
            length = (d1 - d0) * hw
            start = d0 * hw
            cols = cached if cached is not None else _flat_columns(xflat, offsets, start, length)
            gext = np.zeros((n, o, d1 - d0, hp, wp), dtype=dtype)
            gext[..., :ho, :wo] = g[:, :, d0:d1]
            gext = gext.reshape(n, o, length)
            dw += np.matmul(gext, cols.transpose(0, 2, 1)).sum(axis=0)
            if dflat is not None:
                back = np.matmul(w2.T, gext).reshape(n, c, len(offsets), length)
                for idx, off in enumerate(offsets):
                    dflat[:, :, start + off:start + off + length] += back[:, :, idx]
        dx = None
        if dflat is not None:
            dx = _crop(dflat[:, :, :dp * hw].reshape(xp.shape), padding)
        db = g.sum(axis=(0, 2, 3, 4)) if bias is not None else None
        return (dx, dw.reshape(weight.shape), db)

    inputs = (x, weight) + ((bias,) if bias is not None else ())
    return make_result(out, inputs, bwd, "conv3d")


def conv3d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: IntOr3 = 1, padding: IntOr3 = 0) -> Tensor:
    """3-D cross-correlation of ``x`` (b, c, D, H, W) with ``weight`` (o, c, I, J, K)."""
    out_shape = conv3d_shape(x.shape, weight.shape, stride, padding)
    stride, padding = triple(stride), triple(padding)
    if stride == (1, 1, 1):
        return _conv3d_unit_stride(x, weight, bias, padding, out_shape)
    kernel = weight.shape[2:]
    out_ext = out_shape[2:]
    n, o = out_shape[:2]
    plane = out_ext[1] * out_ext[2]
    w2 = weight.data.reshape(o, -1)
    xp = _pad(x.data, padding)
    dtype = np.result_type(x.dtype, weight.dtype)

    out = np.empty((n, o, out_ext[0] * plane), dtype=dtype)
    chunks = list(_depth_chunks(n * w2.shape[1] * plane, out_ext[0]))
    cached = None
    for d0, d1 in chunks:
        cols = _unfold(xp, kernel, stride, out_ext, d0, d1)
        out[:, :, d0 * plane:d1 * plane] = np.matmul(w2, cols)
        if len(chunks) == 1:
            cached = cols
    if bias is not None:
        out += bias.data.reshape(1, o, 1)
    out = out.reshape(out_shape)

    def bwd(g):
        g2 = g.reshape(n, o, -1)
        dw = np.zeros_like(w2)
        dxp = np.zeros(xp.shape, dtype=dtype) if x.requires_grad else None
        for d0, d1 in chunks:
            cols = cached if cached is not None else _unfold(xp, kernel, stride, out_ext, d0, d1)
            gc = g2[:, :, d0 * plane:d1 * plane]
            dw += np.einsum("nom,nkm->ok", gc, cols, optimize=True)
            if dxp is not None:
                _fold_into(dxp, np.matmul(w2.T, gc), kernel, stride, out_ext, d0)
        dx = _crop(dxp, padding) if dxp is not None else None
        db = g.sum(axis=(0, 2, 3, 4)) if bias is not None else None
        return (dx, dw.reshape(weight.shape), db)

    inputs = (x, weight) + ((bias,) if bias is not None else ())
    return make_result(out, inputs, bwd, "conv3d")


def conv_transpose3d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
                     stride: IntOr3 = 1, padding: IntOr3 = 0) -> Tensor:
    """Transposed 3-D convolution; ``weight`` is (in_ch, out_ch, I, J, K).

    With the same weight, stride and padding this is the exact adjoint of
    :func:`conv3d` (ignoring bias).
    """
    out_shape = conv_transpose3d_shape(x.shape, weight.shape, stride, padding)
    stride, padding = triple(stride), triple(padding)
    kernel = weight.shape[2:]
    n, cin = x.shape[:2]
    cout = weight.shape[1]
    in_ext = x.shape[2:]
    full_ext = tuple(e + 2 * p for e, p in zip(out_shape[2:], padding))
    plane = in_ext[1] * in_ext[2]
    w2 = weight.data.reshape(cin, -1)
    x2 = x.data.reshape(n, cin, -1)
    dtype = np.result_type(x.dtype, weight.dtype)

    full = np.zeros((n, cout) + full_ext, dtype=dtype)
    chunks = list(_depth_chunks(n * w2.shape[1] * plane, in_ext[0]))
    for d0, d1 in chunks:
        cols = np.matmul(w2.T, x2[:, :, d0 * plane:d1 * plane])
        _fold_into(full, cols, kernel, stride, in_ext, d0)
    out = np.ascontiguousarray(_crop(full, padding))
    if bias is not None:
        out += bias.data.reshape(1, cout, 1, 1, 1)

    def bwd(g):
        gp = _pad(g, padding)
        dw = np.zeros_like(w2)
        dx = np.empty_like(x2) if x.requires_grad else None
        for d0, d1 in chunks:
            cols = _unfold(gp, kernel, stride, in_ext, d0, d1)
            xs = x2[:, :, d0 * plane:d1 * plane]
            dw += np.einsum("ncm,nkm->ck", xs, cols, optimize=True)
            if dx is not None:
                dx[:, :, d0 * plane:d1 * plane] = np.matmul(w2, cols)
        db = g.sum(axis=(0, 2, 3, 4)) if bias is not None else None
        return (dx.reshape(x.shape) if dx is not None else None, dw.reshape(weight.shape), db)

    inputs = (x, weight) + ((bias,) if bias is not None else ())
    return make_result(out, inputs, bwd, "conv_transpose3d")


# ---------------------------------------------------------------------------
# normalization and activations

def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: Tensor, running_var: Tensor,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization over batch and spatial positions.

    In training mode the running statistics are replaced by their updated
    moving averages (unbiased variance), so the caller sees the new values.
    """
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,) or running_mean.shape != (c,) or running_var.shape != (c,):
        raise ValueError(f"batch_norm: parameters must have shape ({c},)")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    count = x.size // c
    xd = x.data
    if training:
        if count < 2:
            raise ValueError(f"batch_norm: {count} position(s) per channel, need at least 2 in training mode")
        mean = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        rm = (1 - momentum) * running_mean.data + momentum * mean
        rv = (1 - momentum) * running_var.data + momentum * var * count / (count - 1)
        running_mean.data = rm.astype(running_mean.dtype)
        running_mean.data.flags.writeable = False
        running_var.data = rv.astype(running_var.dtype)
        running_var.data.flags.writeable = False
    else:
        mean, var = running_mean.data, running_var.data
    inv_std = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mean.reshape(bshape)) * inv_std.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def bwd(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gamma.data.reshape(bshape)
        if training:
            dx = (dxhat - dxhat.mean(axis=axes, keepdims=True)
                  - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True)) * inv_std.reshape(bshape)
        else:
            dx = dxhat * inv_std.reshape(bshape)
        return (dx, dgamma, dbeta)

    return make_result(out, (x, gamma, beta), bwd, "batch_norm")


def elu(x: Tensor, alpha: float = 1.0) -> Tensor:
    xd = x.data
    pos = xd > 0
    neg_part = alpha * np.expm1(np.minimum(xd, 0))
    out = np.where(pos, xd, neg_part)
    return make_result(out, (x,), lambda g: (g * np.where(pos, 1, neg_part + alpha),), "elu")


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return make_result(x.data * pos, (x,), lambda g: (g * pos,), "relu")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"softmax axis {axis} out of range for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    return make_result(s, (x,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),), "softmax")


# ---------------------------------------------------------------------------
# pooling, dense layers, dropout

def adaptive_max_pool_to_vector(x: Tensor) -> Tensor:
    """Global per-channel maximum; ties send the gradient to the first voxel."""
    n, c = pool_vector_shape(x.shape)
    flat = x.data.reshape(n, c, -1)
    idx = flat.argmax(axis=2)
    out = np.take_along_axis(flat, idx[..., None], axis=2)[..., 0]
    shape, dtype = x.shape, x.dtype

    def bwd(g):
        dx = np.zeros((n, c, flat.shape[2]), dtype=dtype)
        np.put_along_axis(dx, idx[..., None], g[..., None], axis=2)
        return (dx.reshape(shape),)

    return make_result(out, (x,), bwd, "adaptive_max_pool")


def fully_connected(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` laid out (out_features, in_features)."""
    fc_shape(x.shape, weight.shape)
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def bwd(g):
        db = g.sum(axis=0) if bias is not None else None
        return (g @ wd, g.T @ xd, db)

    inputs = (x, weight) + ((bias,) if bias is not None else ())
    return make_result(out, inputs, bwd, "fully_connected")


def dropout(x: Tensor, p: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-p) so inference is the identity."""
    if not 0 <= p < 1:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1 - p)
    return make_result(x.data * keep, (x,), lambda g: (g * keep,), "dropout")
