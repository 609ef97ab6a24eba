"""Depthwise convolution kernels with backend selection at import.

The compiled extension is used when it was built; otherwise the numpy
implementation is used. Setting ``HYBRID_ASR_PURE=1`` forces the numpy path.
Both backends accept C-contiguous ``[T, C]`` arrays of a single float dtype.
"""
import os

from . import _dwconv_numpy as numpy_backend

try:
    if os.environ.get("HYBRID_ASR_PURE", "") not in ("", "0"):
        raise ImportError("pure backend requested")
    from . import _dwconv as compiled_backend
except ImportError:
    compiled_backend = None

BACKENDS = {"numpy": numpy_backend}
if compiled_backend is not None:
    BACKENDS["cython"] = compiled_backend

BACKEND = "cython" if compiled_backend is not None else "numpy"
_impl = BACKENDS[BACKEND]


def dwconv_forward(x, w, pad_left, stride, t_out):
    return _impl.forward(x, w, pad_left, stride, t_out)


def dwconv_backward(g, x, w, pad_left, stride):
    return _impl.backward(g, x, w, pad_left, stride)


__all__ = ["BACKEND", "BACKENDS", "dwconv_forward", "dwconv_backward"]
