# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled twins of the kernels in ``_kernels_py``; same signatures, same bits."""
import numpy as np
cimport numpy as cnp
from libc.math cimport rint

cnp.import_array()


def im2col(double[:, :, :, ::1] xpad, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride):
    cdef Py_ssize_t n = xpad.shape[0], hp = xpad.shape[1], wp = xpad.shape[2], c = xpad.shape[3]
    cdef Py_ssize_t ho = (hp - kh) // stride + 1
    cdef Py_ssize_t wo = (wp - kw) // stride + 1
    cdef Py_ssize_t npos = n * ho * wo
    out_arr = np.empty((kh * kw * c, npos), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t b, y, x, i, j, ch, col, row
    # output rows outermost so the writes stream through memory
    for i in range(kh):
        for j in range(kw):
            for ch in range(c):
                row = (i * kw + j) * c + ch
                col = 0
                for b in range(n):
                    for y in range(ho):
                        for x in range(wo):
                            out[row, col] = xpad[b, y * stride + i, x * stride + j, ch]
                            col += 1
    return out_arr


def col2im(cols_in, Py_ssize_t n, Py_ssize_t hp, Py_ssize_t wp, Py_ssize_t c,
           Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride):
    cdef double[:, ::1] cols = np.ascontiguousarray(cols_in, dtype=np.float64)
    cdef Py_ssize_t ho = (hp - kh) // stride + 1
    cdef Py_ssize_t wo = (wp - kw) // stride + 1
    out_arr = np.zeros((n, hp, wp, c), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, y, x, i, j, ch, col, row
    # kernel offsets outermost: each input cell then receives its terms in the
    # same (i, j) order as the numpy version, keeping sums bit-identical
    for i in range(kh):
        for j in range(kw):
            row = (i * kw + j) * c
            for b in range(n):
                for y in range(ho):
                    for x in range(wo):
                        col = (b * ho + y) * wo + x
                        for ch in range(c):
                            out[b, y * stride + i, x * stride + j, ch] += cols[row + ch, col]
    return out_arr


def fake_quant(t_in, double nudged_min, double nudged_max, double scale, double zero_point):
    t_arr = np.ascontiguousarray(t_in, dtype=np.float64)
    cdef double[::1] t = t_arr.reshape(-1)
    values_arr = np.empty(t_arr.shape, dtype=np.float64)
    codes_arr = np.empty(t_arr.shape, dtype=np.float64)
    cdef double[::1] values = values_arr.reshape(-1)
    cdef double[::1] codes = codes_arr.reshape(-1)
    cdef Py_ssize_t k, size = t.shape[0]
    cdef double v, q
    for k in range(size):
        v = t[k]
        if v < nudged_min:
            v = nudged_min
        if v > nudged_max:
            v = nudged_max
        q = rint((v - nudged_min) / scale) - zero_point
        codes[k] = q
        values[k] = q * scale
    return values_arr, codes_arr


def maxpool2x2(double[:, :, :, ::1] x):
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1], w = x.shape[2], c = x.shape[3]
    cdef Py_ssize_t ho = h // 2, wo = w // 2
    out_arr = np.empty((n, ho, wo, c), dtype=np.float64)
    arg_arr = np.empty((n, ho, wo, c), dtype=np.int64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef cnp.int64_t[:, :, :, ::1] arg = arg_arr
    cdef Py_ssize_t b, y, xx, ch, k, best
    cdef double m, v
    for b in range(n):
        for y in range(ho):
            for xx in range(wo):
                for ch in range(c):
                    m = x[b, 2 * y, 2 * xx, ch]
                    best = 0
                    for k in range(1, 4):
                        v = x[b, 2 * y + k // 2, 2 * xx + k % 2, ch]
                        if v > m:
                            m = v
                            best = k
                    out[b, y, xx, ch] = m
                    arg[b, y, xx, ch] = best
    return out_arr, arg_arr


def maxpool2x2_backward(grad_in, arg_in, Py_ssize_t h, Py_ssize_t w):
    cdef double[:, :, :, ::1] grad = np.ascontiguousarray(grad_in, dtype=np.float64)
    cdef cnp.int64_t[:, :, :, ::1] arg = np.ascontiguousarray(arg_in, dtype=np.int64)
    cdef Py_ssize_t n = grad.shape[0], ho = grad.shape[1], wo = grad.shape[2], c = grad.shape[3]
    out_arr = np.zeros((n, h, w, c), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, y, xx, ch, k
    for b in range(n):
        for y in range(ho):
            for xx in range(wo):
                for ch in range(c):
                    k = arg[b, y, xx, ch]
                    out[b, 2 * y + k // 2, 2 * xx + k % 2, ch] = grad[b, y, xx, ch]
    return out_arr
