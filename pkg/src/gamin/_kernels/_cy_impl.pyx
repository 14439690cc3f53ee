# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels for the conv/pool hot loops (channels-last layout).

Mirrors _numpy_impl exactly: same shapes, same zero-padding convention and,
critically, the same per-element floating-point accumulation order in
col2im, so both backends yield bit-identical training trajectories.

All kernels accept an optional preallocated output (page faults on fresh
large allocations dominate runtime on small hosts, so callers reuse
workspace buffers).
"""

import numpy as np

cimport cython
from libc.string cimport memcpy, memset

BACKEND = "cython"

ctypedef fused floating:
    float
    double


def im2col(x, int kernel, int pad_before, int pad_after, out=None):
    x = np.ascontiguousarray(x)
    n, h, w, c = x.shape
    hp = h + pad_before + pad_after
    wp = w + pad_before + pad_after
    oh, ow = hp - kernel + 1, wp - kernel + 1
    shape = (n * oh * ow, kernel * kernel * c)
    if out is None:
        out = np.empty(shape, dtype=x.dtype)
    _im2col(x, kernel, pad_before, pad_after, out)
    return out


def col2im(dcols, x_shape, int kernel, int pad_before, int pad_after, out=None):
    dcols = np.ascontiguousarray(dcols)
    n, h, w, c = x_shape
    if out is None:
        out = np.empty((n, h, w, c), dtype=dcols.dtype)
    _col2im(dcols, n, h, w, c, kernel, pad_before, pad_after, out)
    return out


def maxpool_forward(x, int window, out=None, idx=None, want_idx=True):
    x = np.ascontiguousarray(x)
    n, h, w, c = x.shape
    oh, ow = h // window, w // window
    if out is None:
        out = np.empty((n, oh, ow, c), dtype=x.dtype)
    if not want_idx:
        _maxpool_values(x, window, out)
        return out, None
    if window * window > 127:
        raise ValueError("pool window too large for int8 argmax indices")
    if idx is None:
        idx = np.empty((n, oh, ow, c), dtype=np.int8)
    if window == 2:
        _maxpool2x2_forward(x, out, idx)
    else:
        _maxpool_forward(x, window, out, idx)
    return out, idx


def maxpool_backward(dout, idx, x_shape, int window, out=None):
    dout = np.ascontiguousarray(dout)
    idx = np.ascontiguousarray(idx, dtype=np.int8)
    n, h, w, c = x_shape
    if out is None:
        out = np.empty((n, h, w, c), dtype=dout.dtype)
    _maxpool_backward(dout, idx, n, h, w, c, window, out)
    return out


def _im2col(floating[:, :, :, ::1] x, int kernel, int pad_before, int pad_after,
            floating[:, ::1] cols):
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1], w = x.shape[2], c = x.shape[3]
    cdef Py_ssize_t k = kernel
    cdef Py_ssize_t hp = h + pad_before + pad_after
    cdef Py_ssize_t wp = w + pad_before + pad_after
    cdef Py_ssize_t oh = hp - k + 1, ow = wp - k + 1
    cdef Py_ssize_t nn, i, j, ki, kj, y, xx, row
    with nogil:
        for nn in range(n):
            for i in range(oh):
                for j in range(ow):
                    row = (nn * oh + i) * ow + j
                    for ki in range(k):
                        y = i + ki - pad_before
                        if y < 0 or y >= h:
                            memset(&cols[row, ki * k * c], 0,
                                   k * c * sizeof(floating))
                            continue
                        for kj in range(k):
                            xx = j + kj - pad_before
                            if 0 <= xx < w:
                                # contiguous channel run: one memcpy per tap
                                memcpy(&cols[row, (ki * k + kj) * c],
                                       &x[nn, y, xx, 0], c * sizeof(floating))
                            else:
                                memset(&cols[row, (ki * k + kj) * c], 0,
                                       c * sizeof(floating))


def _col2im(floating[:, ::1] dcols, Py_ssize_t n, Py_ssize_t h, Py_ssize_t w,
            Py_ssize_t c, int kernel, int pad_before, int pad_after,
            floating[:, :, :, ::1] dx):
    cdef Py_ssize_t k = kernel
    cdef Py_ssize_t hp = h + pad_before + pad_after
    cdef Py_ssize_t wp = w + pad_before + pad_after
    cdef Py_ssize_t oh = hp - k + 1, ow = wp - k + 1
    cdef Py_ssize_t nn, i, j, ki, kj, y, xx, row, col, cc
    with nogil:
        memset(&dx[0, 0, 0, 0], 0, n * h * w * c * sizeof(floating))
        # (ki, kj) outermost: per-element add order matches the numpy backend
        for nn in range(n):
            for ki in range(k):
                for kj in range(k):
                    col = (ki * k + kj) * c
                    for i in range(oh):
                        y = i + ki - pad_before
                        if y < 0 or y >= h:
                            continue
                        row = (nn * oh + i) * ow
                        for j in range(ow):
                            xx = j + kj - pad_before
                            if 0 <= xx < w:
                                for cc in range(c):
                                    dx[nn, y, xx, cc] += dcols[row + j, col + cc]


def _maxpool_values(floating[:, :, :, ::1] x, int window,
                    floating[:, :, :, ::1] out):
    # inference path: branchless max only, no argmax bookkeeping
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1], w = x.shape[2], c = x.shape[3]
    cdef Py_ssize_t p = window
    cdef Py_ssize_t oh = h // p, ow = w // p
    cdef Py_ssize_t nn, i, j, cc, pi, pj
    cdef floating v
    with nogil:
        for nn in range(n):
            for i in range(oh):
                for j in range(ow):
                    memcpy(&out[nn, i, j, 0], &x[nn, i * p, j * p, 0],
                           c * sizeof(floating))
                    for pi in range(p):
                        for pj in range(p):
                            if pi == 0 and pj == 0:
                                continue
                            for cc in range(c):
                                v = x[nn, i * p + pi, j * p + pj, cc]
                                out[nn, i, j, cc] = v if v > out[nn, i, j, cc] else out[nn, i, j, cc]
    return out


def _maxpool2x2_forward(floating[:, :, :, ::1] x,
                        floating[:, :, :, ::1] out, signed char[:, :, :, ::1] idx):
    # branchless selects: first maximum wins, matching np.argmax
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1], w = x.shape[2], c = x.shape[3]
    cdef Py_ssize_t oh = h // 2, ow = w // 2
    cdef Py_ssize_t nn, i, j, cc
    cdef floating v0, v1, v2, v3, m01, m23
    cdef signed char i01, i23
    cdef bint b
    with nogil:
        for nn in range(n):
            for i in range(oh):
                for j in range(ow):
                    for cc in range(c):
                        v0 = x[nn, 2 * i, 2 * j, cc]
                        v1 = x[nn, 2 * i, 2 * j + 1, cc]
                        v2 = x[nn, 2 * i + 1, 2 * j, cc]
                        v3 = x[nn, 2 * i + 1, 2 * j + 1, cc]
                        b = v1 > v0
                        m01 = v1 if b else v0
                        i01 = 1 if b else 0
                        b = v3 > v2
                        m23 = v3 if b else v2
                        i23 = 3 if b else 2
                        b = m23 > m01
                        out[nn, i, j, cc] = m23 if b else m01
                        idx[nn, i, j, cc] = i23 if b else i01
    return out


def _maxpool_forward(floating[:, :, :, ::1] x, int window,
                     floating[:, :, :, ::1] out, signed char[:, :, :, ::1] idx):
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1], w = x.shape[2], c = x.shape[3]
    cdef Py_ssize_t p = window
    cdef Py_ssize_t oh = h // p, ow = w // p
    cdef Py_ssize_t nn, i, j, cc, pi, pj, t
    cdef floating v
    with nogil:
        for nn in range(n):
            for i in range(oh):
                for j in range(ow):
                    memcpy(&out[nn, i, j, 0], &x[nn, i * p, j * p, 0],
                           c * sizeof(floating))
                    memset(&idx[nn, i, j, 0], 0, c)
                    t = 0
                    for pi in range(p):
                        for pj in range(p):
                            if t > 0:
                                for cc in range(c):
                                    v = x[nn, i * p + pi, j * p + pj, cc]
                                    if v > out[nn, i, j, cc]:
                                        out[nn, i, j, cc] = v
                                        idx[nn, i, j, cc] = <signed char> t
                            t += 1
    return out, idx


def _maxpool_backward(floating[:, :, :, ::1] dout, signed char[:, :, :, ::1] idx,
                      Py_ssize_t n, Py_ssize_t h, Py_ssize_t w, Py_ssize_t c,
                      int window, floating[:, :, :, ::1] dx):
    cdef Py_ssize_t p = window
    cdef Py_ssize_t oh = h // p, ow = w // p
    cdef Py_ssize_t nn, i, j, cc, t
    with nogil:
        memset(&dx[0, 0, 0, 0], 0, n * h * w * c * sizeof(floating))
        for nn in range(n):
            for i in range(oh):
                for j in range(ow):
                    for cc in range(c):
                        t = idx[nn, i, j, cc]
                        dx[nn, i * p + t // p, j * p + t % p, cc] += dout[nn, i, j, cc]
