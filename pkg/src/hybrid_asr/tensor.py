"""Dense tensors with tape-based reverse-mode differentiation.

Gradients are only recorded while a :class:`Tape` is active on the current
thread::

    with Tape() as tape:
        loss = (x * x).sum()
    tape.backward(loss)

Outside a tape every op is a plain numpy computation, which is what the
inference and benchmark paths rely on.
"""
import threading

import numpy as np

from . import kernels
from .errors import ContractError, DTypeError, NumericError, ShapeError

DEFAULT_DTYPE = np.float32
_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_local = threading.local()


def _tape_stack():
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape():
    """Return the innermost tape active on this thread, or None."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of differentiable ops executed while the tape is active."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tapes must be exited in LIFO order")
        stack.pop()
        return False

    def _record(self, out, inputs, backward):
        out._tape = self
        out._node = len(self.nodes)
        self.nodes.append(_Node(out, inputs, backward))

    def backward(self, loss):
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        seed = np.ones(loss.shape, dtype=loss.dtype)
        if loss._tape is None:
            if loss.requires_grad:
                loss._accumulate(seed)
                return
            raise ContractError("loss was not produced on an active tape")
        if loss._tape is not self:
            raise ContractError("loss was recorded on a different tape")

        grads = {id(loss): seed}
        for node in reversed(self.nodes[: loss._node + 1]):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                if inp._tape is None:
                    inp._accumulate(ig)
                else:
                    prev = grads.get(id(inp))
                    grads[id(inp)] = ig if prev is None else prev + ig


class Tensor:
    """Dense float array that can participate in a tape.

    Attributes:
        data: the underlying contiguous numpy array (float32 or float64).
        requires_grad: whether gradients flow to this tensor.
        grad: accumulated gradient (numpy array) or None.
    """

    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            # only numpy inputs keep their precision; python values default to FP32
            if arr.dtype not in _FLOAT_DTYPES or not isinstance(data, (np.ndarray, np.generic)):
                arr = arr.astype(DEFAULT_DTYPE)
        else:
            arr = np.asarray(data, dtype=dtype)
            if arr.dtype not in _FLOAT_DTYPES:
                raise DTypeError(f"unsupported dtype {arr.dtype}")
        self.data = np.asarray(arr, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._tape = None
        self._node = -1

    # -- basic properties ---------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        g = np.asarray(g, dtype=self.dtype)
        if g.shape != self.shape:
            g = _unbroadcast(g, self.shape)
        self.grad = g.copy() if self.grad is None else self.grad + g

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.shape[0]

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def tensor(data, requires_grad=False, dtype=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def backward(loss):
    """Run reverse accumulation from ``loss`` on the tape that produced it."""
    if not isinstance(loss, Tensor):
        raise ContractError("backward expects a Tensor")
    if loss._tape is None:
        if loss.requires_grad and loss.size == 1:
            loss._accumulate(np.ones(loss.shape, dtype=loss.dtype))
            return
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        raise ContractError("loss was not produced on an active tape")
    loss._tape.backward(loss)


# ---------------------------------------------------------------------------
# helpers


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _common_dtype(tensors):
    dtype = None
    for t in tensors:
        if isinstance(t, Tensor):
            if dtype is None:
                dtype = t.dtype
            elif t.dtype != dtype:
                raise DTypeError(f"cannot mix {dtype} and {t.dtype} in one graph")
    return dtype or np.dtype(DEFAULT_DTYPE)


def _lift(*values):
    """Coerce operands to Tensors of one dtype; python scalars adopt it."""
    dtype = _common_dtype(values)
    out = []
    for v in values:
        if isinstance(v, Tensor):
            out.append(v)
        else:
            out.append(Tensor(np.asarray(v, dtype=dtype)))
    return out


def _result(data, inputs, backward):
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._record(out, inputs, backward)
    return out


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    a, b = _lift(a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = _lift(a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = _lift(a, b)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b):
    a, b = _lift(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def back(g):
        ga = g / bd
        return _unbroadcast(ga, ad.shape), _unbroadcast(-ga * out, bd.shape)

    return _result(out, (a, b), back)


def scale(x, s):
    """Multiply by a python scalar constant."""
    (x,) = _lift(x)
    s = x.dtype.type(s)
    return _result(x.data * s, (x,), lambda g: (g * s,))


def power(x, p):
    (x,) = _lift(x)
    p = float(p)
    xd = x.data
    return _result(xd ** p, (x,), lambda g: (g * p * xd ** (p - 1),))


def exp(x):
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,))


def log(x):
    xd = x.data
    return _result(np.log(xd), (x,), lambda g: (g / xd,))


def sqrt(x):
    out = np.sqrt(x.data)
    return _result(out, (x,), lambda g: (g * 0.5 / out,))


def _sigmoid(z):
    return 0.5 * (np.tanh(0.5 * z) + 1.0)


def sigmoid(x):
    out = _sigmoid(x.data)
    return _result(out, (x,), lambda g: (g * out * (1 - out),))


def tanh(x):
    out = np.tanh(x.data)
    return _result(out, (x,), lambda g: (g * (1 - out * out),))


def relu(x):
    xd = x.data
    mask = xd > 0
    return _result(np.where(mask, xd, 0).astype(xd.dtype), (x,), lambda g: (g * mask,))


def elu(x, alpha=1.0):
    xd = x.data
    pos = xd > 0
    expm = np.expm1(np.minimum(xd, 0))
    out = np.where(pos, xd, alpha * expm).astype(xd.dtype)
    return _result(out, (x,), lambda g: (g * np.where(pos, 1.0, alpha * (expm + 1)).astype(xd.dtype),))


def elu_plus_one(x):
    """``elu(x) + 1`` evaluated as ``exp(min(x, 0)) + max(x, 0)``; strictly positive."""
    xd = x.data
    out = np.exp(np.minimum(xd, 0))
    out += np.maximum(xd, 0)
    return _result(out, (x,), lambda g: (g * np.where(xd > 0, 1, out).astype(xd.dtype),))


def swish(x):
    """x * sigmoid(x)."""
    xd = x.data
    s = _sigmoid(xd)
    return _result(xd * s, (x,), lambda g: (g * (s + xd * s * (1 - s)),))


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum_(x, axis=None, keepdims=False):
    xd = x.data
    out = xd.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, xd.shape).copy(),)

    return _result(out, (x,), back)


def mean(x, axis=None, keepdims=False):
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(sum_(x, axis, keepdims), 1.0 / n)


def reshape(x, shape):
    src = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x, axes=None):
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(np.asarray(x.data.transpose(axes), order="C"), (x,),
                   lambda g: (g.transpose(inv),))


def getitem(x, idx):
    src, dtype = x.shape, x.dtype

    def back(g):
        full = np.zeros(src, dtype=dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _result(np.array(x.data[idx], order="C"), (x,), back)


def take(x, indices, axis=0):
    """Gather along ``axis`` by integer indices; repeated indices sum their gradients."""
    indices = np.asarray(indices, dtype=np.intp)
    src, dtype = x.shape, x.dtype

    def back(g):
        full = np.zeros(src, dtype=dtype)
        np.add.at(np.moveaxis(full, axis, 0), indices, np.moveaxis(g, axis, 0))
        return (full,)

    return _result(np.take(x.data, indices, axis=axis), (x,), back)


def concat(tensors, axis=0):
    tensors = _lift(*tensors)
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                   lambda g: tuple(np.split(g, cuts, axis=axis)))


def astype(x, dtype):
    """Explicit precision cast; gradients are cast back."""
    src = x.dtype
    return _result(x.data.astype(dtype), (x,), lambda g: (g.astype(src),))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    """Matrix product.

    Supports ``[M, K] @ [K, P]``, ``[..., M, K] @ [K, P]`` and same-rank
    batched products.
    """
    a, b = _lift(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    try:
        out = np.matmul(ad, bd)
    except ValueError as exc:
        raise ShapeError(f"matmul batch extents differ: {a.shape} @ {b.shape}") from exc

    def back(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _result(out, (a, b), back)


def linear(x, weight, bias=None):
    """``x @ weight.T + bias`` with ``weight`` stored as ``[out, in]``."""
    x, weight = _lift(x, weight)
    if weight.ndim != 2 or x.ndim < 1 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    # W.T is a view; BLAS handles the transposed layout without a copy
    out = xd @ wd.T

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        return g @ wd, g2.T @ xd.reshape(-1, xd.shape[-1])

    y = _result(out, (x, weight), back)
    return y if bias is None else add(y, bias)


# ---------------------------------------------------------------------------
# normalizations and activations with fused rules


def softmax(x, axis=-1):
    xd = x.data
    z = xd - xd.max(axis=axis, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=axis, keepdims=True)
    out = z

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), back)


def glu(x, axis=-1):
    """Split ``axis`` into halves (a, b) and return ``a * sigmoid(b)``."""
    n = x.shape[axis]
    if n % 2:
        raise ShapeError(f"glu needs an even extent on axis {axis}, got {n}")
    a, b = np.split(x.data, 2, axis=axis)
    s = _sigmoid(b)

    def back(g):
        return (np.concatenate([g * s, g * a * s * (1 - s)], axis=axis),)

    return _result(a * s, (x,), back)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis, then apply the per-feature affine map."""
    x, gamma, beta = _lift(x, gamma, beta)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gamma.data

    def back(g):
        gx = g * gd
        n = xd.shape[-1]
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).sum(axis=-1, keepdims=True) / n)
        return (dx, _unbroadcast(g * xhat, gd.shape), _unbroadcast(g, beta.shape))

    return _result(xhat * gd + beta.data, (x, gamma, beta), back)


def batchnorm(x, gamma, beta, running_mean, running_var, eps=1e-5, mode="eval", momentum=0.1):
    """Per-channel batch normalization over the last axis.

    ``running_mean``/``running_var`` are numpy arrays; in ``train`` mode they
    are updated in place with ``momentum`` (unbiased batch variance) and the
    batch statistics are used for normalization. ``batch`` mode normalizes
    with batch statistics but leaves the running statistics alone.
    """
    x, gamma, beta = _lift(x, gamma, beta)
    C = x.shape[-1]
    if gamma.shape != (C,) or beta.shape != (C,) or np.shape(running_mean) != (C,) \
            or np.shape(running_var) != (C,):
        raise ShapeError(f"batchnorm statistics must have shape ({C},)")
    if eps <= 0:
        raise ContractError("batchnorm eps must be positive")
    xd = x.data
    dtype = xd.dtype
    if mode in ("train", "batch"):
        axes = tuple(range(xd.ndim - 1))
        n = int(np.prod([xd.shape[a] for a in axes]))
        mu = xd.mean(axis=axes)
        xc = xd - mu
        var = (xc * xc).mean(axis=axes)
        denom = var + eps
        if np.any(denom <= 0):
            raise NumericError(f"non-positive variance in channel {int(np.argmin(denom))}")
        inv = (1.0 / np.sqrt(denom)).astype(dtype)
        xhat = xc * inv
        if mode == "train":
            unbiased = var * n / max(n - 1, 1)
            running_mean *= 1 - momentum
            running_mean += momentum * mu
            running_var *= 1 - momentum
            running_var += momentum * unbiased
        gd = gamma.data

        def back(g):
            gx = g * gd
            dx = inv * (gx - gx.mean(axis=axes) - xhat * (gx * xhat).mean(axis=axes))
            return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

        return _result(xhat * gd + beta.data, (x, gamma, beta), back)
    if mode != "eval":
        raise ContractError(f"unknown batchnorm mode {mode!r}")
    denom = np.asarray(running_var, dtype=dtype) + eps
    if np.any(denom <= 0):
        raise NumericError(f"non-positive variance in channel {int(np.argmin(denom))}")
    inv = (1.0 / np.sqrt(denom)).astype(dtype)
    xhat = (xd - np.asarray(running_mean, dtype=dtype)) * inv
    gd = gamma.data
    axes = tuple(range(xd.ndim - 1))
    return _result(xhat * gd + beta.data, (x, gamma, beta),
                   lambda g: (g * gd * inv, (g * xhat).sum(axis=axes), g.sum(axis=axes)))


# ---------------------------------------------------------------------------
# convolution


def same_pads(length, kernel_size, stride=1):
    """(left, right) zero padding giving ``ceil(length / stride)`` outputs.

    The extra element of an odd total goes to the left, so an even kernel
    of size k uses ``(ceil((k-1)/2), floor((k-1)/2))`` at stride 1.
    """
    t_out = -(-length // stride)
    total = max((t_out - 1) * stride + kernel_size - length, 0)
    return total - total // 2, total // 2


def depthwise_conv1d(x, kernel, bias=None, pad_left=None, pad_right=None, stride=1):
    """Per-channel 1-D cross-correlation with zero padding.

    Args:
        x: ``[T, C]`` or ``[B, T, C]``.
        kernel: ``[k, C]`` taps, applied without flipping.
        bias: optional ``[C]``.
        pad_left, pad_right: zero padding; SAME padding when omitted.
        stride: temporal stride.
    """
    inputs = [x, kernel] + ([bias] if bias is not None else [])
    lifted = _lift(*inputs)
    x, kernel = lifted[0], lifted[1]
    bias = lifted[2] if bias is not None else None
    if x.ndim not in (2, 3):
        raise ShapeError(f"depthwise_conv1d expects [T, C] or [B, T, C], got {x.shape}")
    T, C = x.shape[-2], x.shape[-1]
    k = kernel.shape[0]
    if kernel.ndim != 2 or kernel.shape[1] != C or k < 1:
        raise ShapeError(f"kernel shape {kernel.shape} does not match channels {C}")
    if bias is not None and bias.shape != (C,):
        raise ShapeError(f"bias shape {bias.shape} does not match channels {C}")
    if pad_left is None or pad_right is None:
        pad_left, pad_right = same_pads(T, k, stride)
    if k > T + pad_left + pad_right:
        raise ShapeError(f"kernel size {k} exceeds padded length {T + pad_left + pad_right}")
    t_out = (T + pad_left + pad_right - k) // stride + 1
    xd, wd = x.data, kernel.data
    batched = xd.ndim == 3
    xs = xd if batched else xd[None]
    out = np.stack([kernels.dwconv_forward(xb, wd, pad_left, stride, t_out) for xb in xs])
    if bias is not None:
        out += bias.data
    if not batched:
        out = out[0]

    def back(g):
        gs = g if batched else g[None]
        dx = np.empty_like(xs)
        dw = np.zeros_like(wd)
        for i, (gb, xb) in enumerate(zip(gs, xs)):
            gb = np.ascontiguousarray(gb)
            dx[i], dwb = kernels.dwconv_backward(gb, xb, wd, pad_left, stride)
            dw += dwb
        grads = [dx if batched else dx[0], dw]
        if bias is not None:
            grads.append(gs.sum(axis=(0, 1)))
        return tuple(grads)

    return _result(out, tuple(lifted), back)


def unfold1d(x, kernel_size, stride=1, pad_left=None, pad_right=None):
    """Frame extraction ``[..., T, C] -> [..., T_out, k * C]`` (tap-major) for dense convolutions."""
    T_, C = x.shape[-2], x.shape[-1]
    if pad_left is None or pad_right is None:
        pad_left, pad_right = same_pads(T_, kernel_size, stride)
    t_out = (T_ + pad_left + pad_right - kernel_size) // stride + 1
    if t_out < 1:
        raise ShapeError(f"kernel size {kernel_size} exceeds padded length")
    lead = x.shape[:-2]
    widths = [(0, 0)] * len(lead) + [(pad_left, pad_right), (0, 0)]
    xp = np.pad(x.data, widths)
    idx = np.arange(t_out)[:, None] * stride + np.arange(kernel_size)[None, :]
    out = xp[..., idx, :].reshape(*lead, t_out, kernel_size * C)

    def back(g):
        gp = np.zeros_like(xp)
        np.add.at(np.moveaxis(gp, -2, 0), idx, np.moveaxis(g.reshape(*lead, t_out, kernel_size, C),
                                                           (-3, -2), (0, 1)))
        return (gp[..., pad_left:pad_left + T_, :],)

    return _result(out, (x,), back)


def rope_rotate(x, cos, sin):
    """Rotate interleaved pairs ``(x[2i], x[2i+1])`` of the last axis.

    ``cos``/``sin`` are numpy arrays of shape ``[N, d/2]`` broadcast against
    ``x[..., N, d]``.
    """
    xd = x.data
    if xd.shape[-1] % 2:
        raise ShapeError(f"rotation needs an even last extent, got {xd.shape[-1]}")
    cos = cos.astype(xd.dtype, copy=False)
    sin = sin.astype(xd.dtype, copy=False)

    def rot(v, s):
        e, o = v[..., 0::2], v[..., 1::2]
        out = np.empty_like(v)
        out[..., 0::2] = e * cos - o * s
        out[..., 1::2] = e * s + o * cos
        return out

    return _result(rot(xd, sin), (x,), lambda g: (rot(g, -sin),))


def param(data, dtype=None):
    """Leaf tensor that requires grad."""
    return Tensor(data, requires_grad=True, dtype=dtype)
