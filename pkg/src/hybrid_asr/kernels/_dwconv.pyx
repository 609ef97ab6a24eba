# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled depthwise 1-D convolution kernels.

Summation order matches the numpy fallback exactly: taps are accumulated
in ascending order starting from 0.0, bias is added last.
"""
import numpy as np
cimport numpy as cnp

ctypedef fused real:
    float
    double


def forward(real[:, ::1] x, real[:, ::1] w, Py_ssize_t pad_left,
            Py_ssize_t stride, Py_ssize_t t_out):
    cdef Py_ssize_t t_in = x.shape[0], C = x.shape[1], k = w.shape[0]
    cdef Py_ssize_t t, j, c, src
    dtype = np.float32 if real is float else np.float64
    out_arr = np.zeros((t_out, C), dtype=dtype)
    cdef real[:, ::1] out = out_arr
    with nogil:
        for t in range(t_out):
            for j in range(k):
                src = t * stride + j - pad_left
                if src < 0 or src >= t_in:
                    continue
                for c in range(C):
                    out[t, c] = out[t, c] + x[src, c] * w[j, c]
    return out_arr


def backward(real[:, ::1] g, real[:, ::1] x, real[:, ::1] w,
             Py_ssize_t pad_left, Py_ssize_t stride):
    cdef Py_ssize_t t_in = x.shape[0], C = x.shape[1], k = w.shape[0]
    cdef Py_ssize_t t_out = g.shape[0]
    cdef Py_ssize_t t, j, c, src
    dtype = np.float32 if real is float else np.float64
    dx_arr = np.zeros((t_in, C), dtype=dtype)
    dw_arr = np.zeros((k, C), dtype=dtype)
    cdef real[:, ::1] dx = dx_arr
    cdef real[:, ::1] dw = dw_arr
    with nogil:
        for t in range(t_out):
            for j in range(k):
                src = t * stride + j - pad_left
                if src < 0 or src >= t_in:
                    continue
                for c in range(C):
                    dx[src, c] = dx[src, c] + g[t, c] * w[j, c]
                    dw[j, c] = dw[j, c] + g[t, c] * x[src, c]
    return dx_arr, dw_arr
