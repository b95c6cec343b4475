"""Plain-numpy numeric kernels.

Everything here is tape-free: forward computations and their explicit
adjoints, shared by the autodiff ops and by the data pipeline. Arrays are
(C, H, W) or (B, C, H, W); kernels that only touch the trailing two axes
accept either rank.
"""

from __future__ import annotations

import functools

import numpy as np


def _as4(x: np.ndarray) -> tuple[np.ndarray, bool]:
    """View a (C,H,W) array as (1,C,H,W); report whether it was batched."""
    if x.ndim == 3:
        return x[None], False
    return x, True


# ---------------------------------------------------------------------------
# convolution via im2col / col2im


def im2col(xp, kh, kw, stride, h_out, w_out):
    """(B,C,Hp,Wp) -> (B, C*kh*kw, h_out*w_out) patch matrix."""
    b, c = xp.shape[:2]
    cols = np.empty((b, c, kh, kw, h_out, w_out), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * h_out:stride,
                                  j:j + stride * w_out:stride]
    return cols.reshape(b, c * kh * kw, h_out * w_out)


def col2im(cols, b, c, hp, wp, kh, kw, stride, h_out, w_out):
    """Adjoint of im2col: scatter-add patches back onto (B,C,Hp,Wp)."""
    xp = np.zeros((b, c, hp, wp), dtype=cols.dtype)
    cols = cols.reshape(b, c, kh, kw, h_out, w_out)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * h_out:stride,
               j:j + stride * w_out:stride] += cols[:, :, i, j]
    return xp


def conv_out_size(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def _pad_hw(x4, pad):
    if not pad:
        return x4
    b, c, h, w = x4.shape
    xp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=x4.dtype)
    xp[:, :, pad:pad + h, pad:pad + w] = x4
    return xp


def conv2d_forward(x, w, b, stride, pad):
    x4, batched = _as4(x)
    co, ci, kh, kw = w.shape
    h_out = conv_out_size(x.shape[-2], kh, stride, pad)
    w_out = conv_out_size(x.shape[-1], kw, stride, pad)
    cols = im2col(_pad_hw(x4, pad), kh, kw, stride, h_out, w_out)
    wm = w.reshape(co, -1)
    if batched:
        out = np.matmul(wm, cols)
    else:
        out = np.matmul(wm, cols[0])[None]
    if b is not None:
        out += b[:, None]
    out = out.reshape(-1, co, h_out, w_out)
    return (out if batched else out[0]), cols


def conv2d_input_grad(g, w, x_shape, stride, pad):
    g4, _ = _as4(g)
    co, ci, kh, kw = w.shape
    h, wd = x_shape[-2], x_shape[-1]
    h_out, w_out = g4.shape[-2], g4.shape[-1]
    wt = np.ascontiguousarray(w.reshape(co, -1).T)
    if g.ndim == 4:
        cols_g = np.matmul(wt, g4.reshape(g4.shape[0], co, -1))
    else:
        cols_g = np.matmul(wt, g4.reshape(co, -1))[None]
    xp = col2im(cols_g, g4.shape[0], ci, h + 2 * pad, wd + 2 * pad,
                kh, kw, stride, h_out, w_out)
    if pad:
        xp = xp[:, :, pad:pad + h, pad:pad + wd]
    return xp if g.ndim == 4 else xp[0]


def conv2d_param_grads(cols, g, w_shape):
    g4, _ = _as4(g)
    co = w_shape[0]
    if g.ndim == 3:
        dw = np.matmul(g.reshape(co, -1), cols[0].T).reshape(w_shape)
        db = g.sum(axis=(1, 2))
    else:
        g_mat = g4.reshape(g4.shape[0], co, -1)
        dw = np.matmul(g_mat, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w_shape)
        db = g4.sum(axis=(0, 2, 3))
    return dw, db


def deconv_out_size(n, k, stride, pad):
    return (n - 1) * stride - 2 * pad + k


def deconv2d_forward(x, w, b, stride, pad):
    """Transposed convolution; w is (C_in, C_out, kh, kw)."""
    x4, batched = _as4(x)
    ci, co, kh, kw = w.shape
    bsz, _, h_in, w_in = x4.shape
    h_out = deconv_out_size(h_in, kh, stride, pad)
    w_out = deconv_out_size(w_in, kw, stride, pad)
    wt = np.ascontiguousarray(w.reshape(ci, -1).T)
    if batched:
        cols = np.matmul(wt, x4.reshape(bsz, ci, -1))
    else:
        cols = np.matmul(wt, x.reshape(ci, -1))[None]
    xp = col2im(cols, bsz, co, h_out + 2 * pad, w_out + 2 * pad,
                kh, kw, stride, h_in, w_in)
    if pad:
        xp = xp[:, :, pad:pad + h_out, pad:pad + w_out]
    if b is not None:
        xp += b[None, :, None, None]
    return xp if batched else xp[0]


def deconv2d_input_grad(g, w, stride, pad):
    g4, _ = _as4(g)
    ci, co, kh, kw = w.shape
    g4 = _pad_hw(g4, pad)
    h_in = conv_out_size(g.shape[-2], kh, stride, pad)
    w_in = conv_out_size(g.shape[-1], kw, stride, pad)
    cols = im2col(g4, kh, kw, stride, h_in, w_in)
    wm = w.reshape(ci, -1)
    if g.ndim == 4:
        return np.matmul(wm, cols).reshape(-1, ci, h_in, w_in)
    return np.matmul(wm, cols[0]).reshape(ci, h_in, w_in)


def deconv2d_param_grads(x, g, w_shape, stride, pad):
    x4, _ = _as4(x)
    g4, _ = _as4(g)
    ci, co, kh, kw = w_shape
    g4 = _pad_hw(g4, pad)
    h_in, w_in = x4.shape[-2], x4.shape[-1]
    cols = im2col(g4, kh, kw, stride, h_in, w_in)
    if g.ndim == 3:
        dw = np.matmul(x.reshape(ci, -1), cols[0].T).reshape(w_shape)
        db = g.sum(axis=(1, 2))
    else:
        x_mat = x4.reshape(x4.shape[0], ci, -1)
        dw = np.matmul(x_mat, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w_shape)
        db = g.sum(axis=(0, 2, 3))
    return dw, db


# ---------------------------------------------------------------------------
# bilinear resize as a pair of small interpolation matrices


@functools.lru_cache(maxsize=256)
def resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic (n_out, n_in) bilinear matrix, align-corners-false,
    source coordinates clamped to the edges."""
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    i0 = np.floor(src).astype(np.int64)
    frac = src - i0
    i1 = np.minimum(i0 + 1, n_in - 1)
    m = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


def resize(x: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of the trailing two axes to out_hw."""
    h, w = x.shape[-2], x.shape[-1]
    ho, wo = out_hw
    ry = resize_matrix(h, ho).astype(x.dtype)
    rx = resize_matrix(w, wo).astype(x.dtype)
    return np.matmul(np.matmul(ry, x), rx.T)


def resize_grad(g: np.ndarray, in_hw: tuple[int, int]) -> np.ndarray:
    """Adjoint of resize: maps output-shaped gradients back to in_hw."""
    h, w = in_hw
    ry = resize_matrix(h, g.shape[-2]).astype(g.dtype)
    rx = resize_matrix(w, g.shape[-1]).astype(g.dtype)
    return np.matmul(np.matmul(ry.T, g), rx)


# ---------------------------------------------------------------------------
# bilinear sampling at absolute coordinates (the warping primitive)


def _sample_indices(coords, h, w):
    sx = np.clip(coords[0], 0.0, w - 1.0)
    sy = np.clip(coords[1], 0.0, h - 1.0)
    x0 = np.floor(sx)
    y0 = np.floor(sy)
    fx = sx - x0
    fy = sy - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    return x0, x1, y0, y1, fx, fy


def sample_bilinear_forward(img, coords):
    """img (C,H,W), coords (2,H',W') in absolute pixels (x = channel 0)."""
    h, w = img.shape[-2], img.shape[-1]
    x0, x1, y0, y1, fx, fy = _sample_indices(coords, h, w)
    i00 = img[:, y0, x0]
    i01 = img[:, y0, x1]
    i10 = img[:, y1, x0]
    i11 = img[:, y1, x1]
    top = i00 + fx * (i01 - i00)
    bot = i10 + fx * (i11 - i10)
    return top + fy * (bot - top)


def sample_bilinear_grads(img, coords, g):
    """Gradients of sample_bilinear_forward w.r.t. (img, coords)."""
    c = img.shape[0]
    h, w = img.shape[-2], img.shape[-1]
    x0, x1, y0, y1, fx, fy = _sample_indices(coords, h, w)
    i00 = img[:, y0, x0]
    i01 = img[:, y0, x1]
    i10 = img[:, y1, x0]
    i11 = img[:, y1, x1]

    # d out / d sample position, zeroed where the clamp is active
    dsx = (1.0 - fy) * (i01 - i00) + fy * (i11 - i10)
    dsy = (1.0 - fx) * (i10 - i00) + fx * (i11 - i01)
    in_x = (coords[0] >= 0.0) & (coords[0] <= w - 1.0)
    in_y = (coords[1] >= 0.0) & (coords[1] <= h - 1.0)
    dcoords = np.stack([
        (g * dsx).sum(axis=0) * in_x,
        (g * dsy).sum(axis=0) * in_y,
    ]).astype(g.dtype)

    w00 = ((1.0 - fy) * (1.0 - fx)).ravel()
    w01 = ((1.0 - fy) * fx).ravel()
    w10 = (fy * (1.0 - fx)).ravel()
    w11 = (fy * fx).ravel()
    idx = np.concatenate([(y0 * w + x0).ravel(), (y0 * w + x1).ravel(),
                          (y1 * w + x0).ravel(), (y1 * w + x1).ravel()])
    dimg = np.empty((c, h * w), dtype=g.dtype)
    for ch in range(c):
        gc = g[ch].ravel()
        vals = np.concatenate([gc * w00, gc * w01, gc * w10, gc * w11])
        dimg[ch] = np.bincount(idx, weights=vals, minlength=h * w)
    return dimg.reshape(img.shape), dcoords


# ---------------------------------------------------------------------------
# block rearrangement


def space_to_depth(x, block):
    x4, batched = _as4(x)
    b, c, h, w = x4.shape
    hb, wb = h // block, w // block
    y = x4.reshape(b, c, hb, block, wb, block)
    y = y.transpose(0, 1, 3, 5, 2, 4).reshape(b, c * block * block, hb, wb)
    return y if batched else y[0]


def depth_to_space(x, block):
    x4, batched = _as4(x)
    b, c, hb, wb = x4.shape
    co = c // (block * block)
    y = x4.reshape(b, co, block, block, hb, wb)
    y = y.transpose(0, 1, 4, 2, 5, 3).reshape(b, co, hb * block, wb * block)
    return y if batched else y[0]


# ---------------------------------------------------------------------------
# misc


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def make_grid_array(h: int, w: int, dtype=np.float32) -> np.ndarray:
    """(2,h,w) identity sampling coordinates: x indices then y indices."""
    gx = np.broadcast_to(np.arange(w, dtype=dtype), (h, w))
    gy = np.broadcast_to(np.arange(h, dtype=dtype)[:, None], (h, w))
    return np.stack([gx, gy]).copy()
