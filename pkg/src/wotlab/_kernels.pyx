# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: convolution unfolding and per-block trajectory sums."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def im2col(const float[:, :, :, ::1] xp, int kh, int kw, int stride, int ho, int wo):
    cdef Py_ssize_t n = xp.shape[0], c = xp.shape[1]
    cdef Py_ssize_t ncol = c * kh * kw
    out = np.empty((n * ho * wo, ncol), dtype=np.float32)
    cdef float[:, ::1] cols = out
    cdef Py_ssize_t b, y, x, ch, i, j, row, col, y0, x0
    with nogil:
        for b in range(n):
            for y in range(ho):
                y0 = y * stride
                for x in range(wo):
                    x0 = x * stride
                    row = (b * ho + y) * wo + x
                    col = 0
                    for ch in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                cols[row, col] = xp[b, ch, y0 + i, x0 + j]
                                col += 1
    return out


def col2im(const float[:, ::1] cols, int n, int c, int hp, int wp,
           int kh, int kw, int stride, int ho, int wo):
    out = np.zeros((n, c, hp, wp), dtype=np.float32)
    cdef float[:, :, :, ::1] img = out
    cdef Py_ssize_t b, y, x, ch, i, j, row, col, y0, x0
    with nogil:
        for b in range(n):
            for y in range(ho):
                y0 = y * stride
                for x in range(wo):
                    x0 = x * stride
                    row = (b * ho + y) * wo + x
                    col = 0
                    for ch in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                img[b, ch, y0 + i, x0 + j] += cols[row, col]
                                col += 1
    return out


def block_inner(const float[::1] grad, const float[:, ::1] deltas,
                starts, stops, block_ids, int n_blocks):
    cdef Py_ssize_t k = deltas.shape[0]
    out = np.zeros((k, n_blocks), dtype=np.float64)
    cdef double[:, ::1] acc = out
    cdef Py_ssize_t i, q, s, e, blk
    cdef double tot
    for s, e, blk in zip(starts, stops, block_ids):
        for i in range(k):
            tot = 0.0
            for q in range(s, e):
                tot += <double>deltas[i, q] * <double>grad[q]
            acc[i, blk] += tot
    return out


def block_combine(const float[:, ::1] deltas, alpha, starts, stops, block_ids):
    cdef Py_ssize_t k = deltas.shape[0], p = deltas.shape[1]
    cdef double[:, ::1] a = np.ascontiguousarray(alpha, dtype=np.float64)
    out = np.zeros(p, dtype=np.float64)
    cdef double[::1] res = out
    cdef Py_ssize_t i, q, s, e, blk
    cdef double w
    for s, e, blk in zip(starts, stops, block_ids):
        for i in range(k):
            w = a[i, blk]
            for q in range(s, e):
                res[q] += w * <double>deltas[i, q]
    return out
