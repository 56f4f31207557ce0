# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution and pooling kernels.

Loop orders mirror ``_pykernels`` exactly so both backends agree bitwise.
"""
import numpy as np

ctypedef fused real:
    float
    double


def _dtype_of(real[:, :, :, ::1] x):
    if real is float:
        return np.float32
    return np.float64


def im2col(real[:, :, :, ::1] x, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t OH = (H + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t OW = (W + 2 * pad - kw) // stride + 1
    cols_arr = np.empty((C * kh * kw, N * OH * OW), dtype=_dtype_of(x))
    cdef real[:, ::1] cols = cols_arr
    cdef Py_ssize_t c, i, j, n, oh, ow, row, col, h, w
    for c in range(C):
        for i in range(kh):
            for j in range(kw):
                row = (c * kh + i) * kw + j
                col = 0
                for n in range(N):
                    for oh in range(OH):
                        h = oh * stride + i - pad
                        for ow in range(OW):
                            w = ow * stride + j - pad
                            if 0 <= h < H and 0 <= w < W:
                                cols[row, col] = x[n, c, h, w]
                            else:
                                cols[row, col] = 0
                            col += 1
    return cols_arr


def col2im(real[:, ::1] cols, shape, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t N = shape[0], C = shape[1], H = shape[2], W = shape[3]
    cdef Py_ssize_t OH = (H + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t OW = (W + 2 * pad - kw) // stride + 1
    if real is float:
        dt = np.float32
    else:
        dt = np.float64
    padded = np.zeros((N, C, H + 2 * pad, W + 2 * pad), dtype=dt)
    cdef real[:, :, :, ::1] dx = padded
    cdef Py_ssize_t c, i, j, n, oh, ow, row, col
    for c in range(C):
        for i in range(kh):
            for j in range(kw):
                row = (c * kh + i) * kw + j
                col = 0
                for n in range(N):
                    for oh in range(OH):
                        for ow in range(OW):
                            dx[n, c, oh * stride + i, ow * stride + j] += cols[row, col]
                            col += 1
    if pad == 0:
        return padded
    return np.ascontiguousarray(padded[:, :, pad:pad + H, pad:pad + W])


def maxpool2x2(real[:, :, :, ::1] x):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1]
    cdef Py_ssize_t OH = x.shape[2] // 2, OW = x.shape[3] // 2
    out_arr = np.empty((N, C, OH, OW), dtype=_dtype_of(x))
    idx_arr = np.empty((N, C, OH, OW), dtype=np.int8)
    cdef real[:, :, :, ::1] out = out_arr
    cdef signed char[:, :, :, ::1] idx = idx_arr
    cdef Py_ssize_t n, c, oh, ow
    cdef real best, v
    cdef signed char k
    for n in range(N):
        for c in range(C):
            for oh in range(OH):
                for ow in range(OW):
                    best = x[n, c, 2 * oh, 2 * ow]
                    k = 0
                    v = x[n, c, 2 * oh, 2 * ow + 1]
                    if v > best:
                        best = v
                        k = 1
                    v = x[n, c, 2 * oh + 1, 2 * ow]
                    if v > best:
                        best = v
                        k = 2
                    v = x[n, c, 2 * oh + 1, 2 * ow + 1]
                    if v > best:
                        best = v
                        k = 3
                    out[n, c, oh, ow] = best
                    idx[n, c, oh, ow] = k
    return out_arr, idx_arr


def maxpool2x2_backward(real[:, :, :, ::1] grad, signed char[:, :, :, ::1] idx, shape):
    cdef Py_ssize_t N = grad.shape[0], C = grad.shape[1], OH = grad.shape[2], OW = grad.shape[3]
    if real is float:
        dt = np.float32
    else:
        dt = np.float64
    dx_arr = np.zeros(tuple(shape), dtype=dt)
    cdef real[:, :, :, ::1] dx = dx_arr
    cdef Py_ssize_t n, c, oh, ow
    cdef signed char k
    for n in range(N):
        for c in range(C):
            for oh in range(OH):
                for ow in range(OW):
                    k = idx[n, c, oh, ow]
                    dx[n, c, 2 * oh + (k >> 1), 2 * ow + (k & 1)] = grad[n, c, oh, ow]
    return dx_arr
