# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled power-pooling and median-filter kernels.

Numerically equivalent to ``milpool._fallback``; see that module for the
argument conventions.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport log, pow

cnp.import_array()


def power_pool_forward(const double[:, :, ::1] y, const double[::1] n):
    # y^n peaks at the largest y for n >= 0 and at the smallest for n < 0, so
    # (y / y_ref)^n <= 1 is a stable unnormalised weight.
    cdef Py_ssize_t B = y.shape[0], T = y.shape[1], C = y.shape[2]
    cdef Py_ssize_t b, t, c
    cdef double mx, inv, lw, s0, s1
    clip_arr = np.empty((B, C), dtype=np.float64)
    w_arr = np.empty((B, T, C), dtype=np.float64)
    cdef double[:, ::1] clip = clip_arr
    cdef double[:, :, ::1] w = w_arr
    with nogil:
        for b in range(B):
            for c in range(C):
                mx = y[b, 0, c]
                if n[c] >= 0.0:
                    for t in range(1, T):
                        if y[b, t, c] > mx:
                            mx = y[b, t, c]
                else:
                    for t in range(1, T):
                        if y[b, t, c] < mx:
                            mx = y[b, t, c]
                inv = 1.0 / mx
                s0 = 0.0
                s1 = 0.0
                for t in range(T):
                    lw = pow(y[b, t, c] * inv, n[c])
                    w[b, t, c] = lw
                    s0 += lw
                    s1 += lw * y[b, t, c]
                inv = 1.0 / s0
                for t in range(T):
                    w[b, t, c] = w[b, t, c] * inv
                clip[b, c] = s1 * inv
    return clip_arr, w_arr


def power_pool_backward(const double[:, :, ::1] y, const double[::1] n, const double[:, :, ::1] weights,
                        const double[:, ::1] clip, const double[:, ::1] upstream):
    cdef Py_ssize_t B = y.shape[0], T = y.shape[1], C = y.shape[2]
    cdef Py_ssize_t b, t, c
    cdef double g, centred, acc
    dy_arr = np.empty((B, T, C), dtype=np.float64)
    dn_arr = np.empty((B, C), dtype=np.float64)
    cdef double[:, :, ::1] dy = dy_arr
    cdef double[:, ::1] dn = dn_arr
    with nogil:
        for b in range(B):
            for c in range(C):
                acc = 0.0
                for t in range(T):
                    g = upstream[b, c] * weights[b, t, c]
                    centred = y[b, t, c] - clip[b, c]
                    dy[b, t, c] = g * (1.0 + n[c] * centred / y[b, t, c])
                    acc += g * centred * log(y[b, t, c])
                dn[b, c] = acc
    return dy_arr, dn_arr


def median_filter_binary(x, Py_ssize_t window):
    cdef const cnp.int64_t[::1] xs = np.ascontiguousarray(x, dtype=np.int64)
    cdef Py_ssize_t T = xs.shape[0]
    cdef Py_ssize_t half = window // 2
    cdef Py_ssize_t i, r, ones, lo, hi
    out_arr = np.zeros(T, dtype=np.int8)
    cdef signed char[::1] out = out_arr
    csum_arr = np.zeros(T + 1, dtype=np.int64)
    cdef cnp.int64_t[::1] csum = csum_arr
    with nogil:
        for i in range(T):
            csum[i + 1] = csum[i] + xs[i]
        for i in range(T):
            r = half
            if i < r:
                r = i
            if T - 1 - i < r:
                r = T - 1 - i
            lo = i - r
            hi = i + r + 1
            ones = csum[hi] - csum[lo]
            out[i] = 1 if ones > r else 0
    return out_arr
