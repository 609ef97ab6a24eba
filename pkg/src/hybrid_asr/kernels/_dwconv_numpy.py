"""Pure-numpy depthwise 1-D convolution, same contract as the compiled kernel."""
import numpy as np


def _tap_range(j, pad_left, stride, t_in, t_out):
    # output rows t whose source index t*stride + j - pad_left lies in [0, t_in)
    lo = max(0, -(-(pad_left - j) // stride))
    hi = min(t_out - 1, (t_in - 1 - j + pad_left) // stride)
    return lo, hi


def forward(x, w, pad_left, stride, t_out):
    t_in = x.shape[0]
    out = np.zeros((t_out, x.shape[1]), dtype=x.dtype)
    for j in range(w.shape[0]):
        lo, hi = _tap_range(j, pad_left, stride, t_in, t_out)
        if hi < lo:
            continue
        src = lo * stride + j - pad_left
        out[lo:hi + 1] += x[src:src + (hi - lo) * stride + 1:stride] * w[j]
    return out


def backward(g, x, w, pad_left, stride):
    t_in, t_out = x.shape[0], g.shape[0]
    dx = np.zeros_like(x)
    dw = np.zeros_like(w)
    for j in range(w.shape[0]):
        lo, hi = _tap_range(j, pad_left, stride, t_in, t_out)
        if hi < lo:
            continue
        src = lo * stride + j - pad_left
        rows = slice(src, src + (hi - lo) * stride + 1, stride)
        dx[rows] += g[lo:hi + 1] * w[j]
        dw[j] = (g[lo:hi + 1] * x[rows]).sum(axis=0)
    return dx, dw
