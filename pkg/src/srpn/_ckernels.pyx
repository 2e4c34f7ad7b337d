# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled convolution and max-pool kernels.

Same contract as ``_pykernels``. GEMMs go through scipy's BLAS bindings;
row-major products are issued as their column-major transposes.
"""
import numpy as np
cimport numpy as cnp
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()


cdef void _im2col(const double[:, :, ::1] x, double[:, ::1] cols,
                  int k, int pad) noexcept nogil:
    cdef int c = x.shape[0], h = x.shape[1], w = x.shape[2]
    cdef int ho = h + 2 * pad - k + 1, wo = w + 2 * pad - k + 1
    cdef int ci, i, j, r, oy, ox, iy, ix
    for ci in range(c):
        for i in range(k):
            for j in range(k):
                r = (ci * k + i) * k + j
                for oy in range(ho):
                    iy = oy + i - pad
                    if iy < 0 or iy >= h:
                        for ox in range(wo):
                            cols[r, oy * wo + ox] = 0.0
                        continue
                    for ox in range(wo):
                        ix = ox + j - pad
                        if ix < 0 or ix >= w:
                            cols[r, oy * wo + ox] = 0.0
                        else:
                            cols[r, oy * wo + ox] = x[ci, iy, ix]


cdef void _col2im(const double[:, ::1] dcols, double[:, :, ::1] dx,
                  int k, int pad) noexcept nogil:
    cdef int c = dx.shape[0], h = dx.shape[1], w = dx.shape[2]
    cdef int ho = h + 2 * pad - k + 1, wo = w + 2 * pad - k + 1
    cdef int ci, i, j, r, oy, ox, iy, ix
    for ci in range(c):
        for i in range(k):
            for j in range(k):
                r = (ci * k + i) * k + j
                for oy in range(ho):
                    iy = oy + i - pad
                    if iy < 0 or iy >= h:
                        continue
                    for ox in range(wo):
                        ix = ox + j - pad
                        if 0 <= ix < w:
                            dx[ci, iy, ix] += dcols[r, oy * wo + ox]


def conv2d_forward(x, w, b, int pad):
    cdef double[:, :, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[:, ::1] wv = np.ascontiguousarray(
        w, dtype=np.float64).reshape(w.shape[0], -1)
    cdef double[::1] bv = np.ascontiguousarray(b, dtype=np.float64)
    cdef int o = w.shape[0], k = w.shape[2]
    cdef int ckk = wv.shape[1]
    cdef int ho = xv.shape[1] + 2 * pad - k + 1
    cdef int wo = xv.shape[2] + 2 * pad - k + 1
    cdef int hw = ho * wo
    cols = np.empty((ckk, hw))
    out = np.empty((o, hw))
    cdef double[:, ::1] cv = cols
    cdef double[:, ::1] ov = out
    cdef double one = 1.0, zero = 0.0
    cdef int oi, p
    with nogil:
        _im2col(xv, cv, k, pad)
        dgemm(b"N", b"N", &hw, &o, &ckk, &one, &cv[0, 0], &hw,
              &wv[0, 0], &ckk, &zero, &ov[0, 0], &hw)
        for oi in range(o):
            for p in range(hw):
                ov[oi, p] += bv[oi]
    return out.reshape(o, ho, wo), cols


def conv2d_backward(dout, x_shape, w, cols, int pad):
    cdef double[:, ::1] dv = np.ascontiguousarray(
        dout, dtype=np.float64).reshape(dout.shape[0], -1)
    cdef double[:, ::1] wv = np.ascontiguousarray(
        w, dtype=np.float64).reshape(w.shape[0], -1)
    cdef double[:, ::1] cv = cols
    cdef int o = wv.shape[0], ckk = wv.shape[1], hw = dv.shape[1]
    cdef int k = w.shape[2]
    dw = np.empty((o, ckk))
    dcols = np.empty((ckk, hw))
    db = np.empty(o)
    dx = np.zeros(tuple(x_shape))
    cdef double[:, ::1] dwv = dw
    cdef double[:, ::1] dcv = dcols
    cdef double[::1] dbv = db
    cdef double[:, :, ::1] dxv = dx
    cdef double one = 1.0, zero = 0.0, acc
    cdef int oi, p
    with nogil:
        # dw = dout @ cols.T
        dgemm(b"T", b"N", &ckk, &o, &hw, &one, &cv[0, 0], &hw,
              &dv[0, 0], &hw, &zero, &dwv[0, 0], &ckk)
        # dcols = w.T @ dout
        dgemm(b"N", b"T", &hw, &ckk, &o, &one, &dv[0, 0], &hw,
              &wv[0, 0], &ckk, &zero, &dcv[0, 0], &hw)
        for oi in range(o):
            acc = 0.0
            for p in range(hw):
                acc = acc + dv[oi, p]
            dbv[oi] = acc
        _col2im(dcv, dxv, k, pad)
    return dx, dw.reshape(w.shape), db


def maxpool2d_forward(x, int size):
    cdef double[:, :, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef int c = xv.shape[0], h = xv.shape[1], w = xv.shape[2]
    cdef int ho = h // size, wo = w // size
    out = np.empty((c, ho, wo))
    argmax = np.empty((c, ho, wo), dtype=np.int64)
    cdef double[:, :, ::1] ov = out
    cdef cnp.int64_t[:, :, ::1] av = argmax
    cdef int ci, oy, ox, i, j, iy, ix
    cdef double best, v
    cdef cnp.int64_t besti
    with nogil:
        for ci in range(c):
            for oy in range(ho):
                for ox in range(wo):
                    iy = oy * size
                    ix = ox * size
                    best = xv[ci, iy, ix]
                    besti = (ci * h + iy) * w + ix
                    for i in range(size):
                        for j in range(size):
                            v = xv[ci, iy + i, ix + j]
                            if v > best:
                                best = v
                                besti = (ci * h + iy + i) * w + ix + j
                    ov[ci, oy, ox] = best
                    av[ci, oy, ox] = besti
    return out, argmax


def maxpool2d_backward(dout, argmax, x_shape):
    cdef double[::1] dv = np.ascontiguousarray(dout, dtype=np.float64).ravel()
    cdef cnp.int64_t[::1] av = np.ascontiguousarray(argmax, dtype=np.int64).ravel()
    dx = np.zeros(int(np.prod(x_shape)))
    cdef double[::1] dxv = dx
    cdef Py_ssize_t n = dv.shape[0], i
    with nogil:
        for i in range(n):
            dxv[av[i]] += dv[i]
    return dx.reshape(x_shape)
