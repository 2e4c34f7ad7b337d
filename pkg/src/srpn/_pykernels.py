"""Numpy reference kernels for convolution and max pooling.

These are the fallback used when the compiled ``_ckernels`` extension is not
importable. Both backends share one calling convention; see ``kernels.py``.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _im2col(x, k, pad):
    c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad))) if pad else x
    ho, wo = h + 2 * pad - k + 1, w + 2 * pad - k + 1
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # c, ho, wo, k, k
    cols = win.transpose(0, 3, 4, 1, 2).reshape(c * k * k, ho * wo)
    return np.ascontiguousarray(cols), ho, wo


def conv2d_forward(x, w, b, pad):
    """Cross-correlate ``x`` [C,H,W] with ``w`` [O,C,k,k]; returns (out, cols)."""
    o, c, k, _ = w.shape
    cols, ho, wo = _im2col(x, k, pad)
    out = w.reshape(o, c * k * k) @ cols
    out += b[:, None]
    return out.reshape(o, ho, wo), cols


def conv2d_backward(dout, x_shape, w, cols, pad):
    o, c, k, _ = w.shape
    _, h, wd = x_shape
    ho, wo = dout.shape[1:]
    d2 = dout.reshape(o, ho * wo)
    dw = (d2 @ cols.T).reshape(w.shape)
    db = d2.sum(axis=1)
    dcols = (w.reshape(o, c * k * k).T @ d2).reshape(c, k, k, ho, wo)
    dxp = np.zeros((c, h + 2 * pad, wd + 2 * pad))
    for i in range(k):
        for j in range(k):
            dxp[:, i:i + ho, j:j + wo] += dcols[:, i, j]
    dx = dxp[:, pad:pad + h, pad:pad + wd] if pad else dxp
    return np.ascontiguousarray(dx), dw, db


def maxpool2d_forward(x, size):
    """Non-overlapping ``size`` x ``size`` max pooling; returns (out, argmax).

    ``argmax`` holds the flat index into ``x`` of each window's first maximum.
    """
    c, h, w = x.shape
    ho, wo = h // size, w // size
    blocks = x[:, :ho * size, :wo * size].reshape(c, ho, size, wo, size)
    blocks = blocks.transpose(0, 1, 3, 2, 4).reshape(c, ho, wo, size * size)
    local = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, local[..., None], axis=-1)[..., 0]
    di, dj = np.divmod(local, size)
    rows = np.arange(ho)[None, :, None] * size + di
    colsi = np.arange(wo)[None, None, :] * size + dj
    chan = np.arange(c)[:, None, None]
    argmax = (chan * h + rows) * w + colsi
    return np.ascontiguousarray(out), argmax.astype(np.int64)


def maxpool2d_backward(dout, argmax, x_shape):
    dx = np.zeros(int(np.prod(x_shape)))
    # windows never overlap, so each flat index appears at most once
    dx[argmax.ravel()] += dout.ravel()
    return dx.reshape(x_shape)
