"""Multi-branch depthwise convolution module and its single-branch fused form.

Training form::

    g = GLU(pw_in(x))
    h = BN_trunk(conv31(g)) + sum_i alpha_i * BN_i(conv_{k_i}(g))
    y = pw_out(swish(BN_post(h)))

A branch of kernel size 0 is a bare BN on ``g``. In eval mode every BN is
an affine map per channel, so the whole depthwise stage collapses into one
31-tap convolution (:func:`fuse`).
"""
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import CheckpointError, ContractError, NumericError, ShapeError
from .tensor import Tensor

TRUNK_SIZE = 31
MAX_BRANCH_SIZE = 30

TRAIN_FORM = 0.0
FUSED_FORM = 1.0


@dataclass
class BatchNorm1d:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1

    @classmethod
    def neutral(cls, channels, dtype=np.float32, eps=1e-5, momentum=0.1):
        return cls(T.param(np.ones(channels, dtype)), T.param(np.zeros(channels, dtype)),
                   np.zeros(channels, dtype), np.ones(channels, dtype), eps, momentum)

    @classmethod
    def random(cls, channels, rng, dtype=np.float32, eps=1e-5):
        """BN with non-trivial affine parameters and running statistics."""
        return cls(T.param(rng.uniform(0.5, 1.5, channels).astype(dtype)),
                   T.param((0.1 * rng.standard_normal(channels)).astype(dtype)),
                   (0.1 * rng.standard_normal(channels)).astype(dtype),
                   rng.uniform(0.5, 2.0, channels).astype(dtype), eps)

    def __call__(self, x, mode="eval"):
        return T.batchnorm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                           self.eps, mode, self.momentum)

    def affine(self):
        """Eval-mode per-channel ``(scale, shift)`` in float64."""
        denom = self.running_var.astype(np.float64) + self.eps
        if np.any(denom <= 0):
            raise NumericError(f"non-positive variance + eps in channel {int(np.argmin(denom))}")
        s = self.gamma.data.astype(np.float64) / np.sqrt(denom)
        return s, self.beta.data.astype(np.float64) - self.running_mean.astype(np.float64) * s

    def parameters(self, prefix):
        return {prefix + "gamma": self.gamma, prefix + "beta": self.beta}

    def to_tensors(self, prefix):
        return {prefix + "gamma": self.gamma.data, prefix + "beta": self.beta.data,
                prefix + "running_mean": self.running_mean.copy(),
                prefix + "running_var": self.running_var.copy(),
                prefix + "eps": np.array(self.eps), prefix + "momentum": np.array(self.momentum)}

    @classmethod
    def from_tensors(cls, d, prefix):
        return cls(T.param(d[prefix + "gamma"]), T.param(d[prefix + "beta"]),
                   d[prefix + "running_mean"].copy(), d[prefix + "running_var"].copy(),
                   float(d[prefix + "eps"]), float(d[prefix + "momentum"]))

    @staticmethod
    def names(prefix):
        return [prefix + s for s in ("gamma", "beta", "running_mean", "running_var", "eps", "momentum")]


@dataclass
class BranchSpec:
    """One candidate branch: ``kernel_size`` taps (0 means BN only) followed by BN."""

    kernel_size: int
    kernel: Tensor = None
    bias: Tensor = None
    bn: BatchNorm1d = None

    def __post_init__(self):
        if not 0 <= self.kernel_size <= MAX_BRANCH_SIZE:
            raise ContractError(f"branch kernel size must be in [0, {MAX_BRANCH_SIZE}], got {self.kernel_size}")
        if self.kernel_size == 0 and (self.kernel is not None or self.bias is not None):
            raise ContractError("a kernel-size-0 branch carries no convolution parameters")
        if self.kernel_size > 0 and (self.kernel is None or self.kernel.shape[0] != self.kernel_size):
            raise ContractError(f"branch of size {self.kernel_size} needs a [{self.kernel_size}, C] kernel")

    def forward(self, g, mode="eval"):
        h = g if self.kernel_size == 0 else T.depthwise_conv1d(g, self.kernel, self.bias)
        return self.bn(h, mode)


def _dw_kernel(k, channels, rng, dtype):
    bound = 1.0 / np.sqrt(k)
    return T.param(rng.uniform(-bound, bound, (k, channels)).astype(dtype))


def _pw(c_out, c_in, rng, dtype):
    bound = 1.0 / np.sqrt(c_in)
    return (T.param(rng.uniform(-bound, bound, (c_out, c_in)).astype(dtype)),
            T.param(np.zeros(c_out, dtype)))


@dataclass
class NSRConv:
    """Training form of the convolution module."""

    pw_in_w: Tensor
    pw_in_b: Tensor
    trunk_kernel: Tensor
    trunk_bias: Tensor
    trunk_bn: BatchNorm1d
    branches: list
    alpha: np.ndarray
    post_bn: BatchNorm1d
    pw_out_w: Tensor
    pw_out_b: Tensor
    train_trunk: bool = field(default=True, compare=False)

    def __post_init__(self):
        if self.trunk_kernel.shape[0] != TRUNK_SIZE:
            raise ContractError(f"trunk kernel must have {TRUNK_SIZE} taps, got {self.trunk_kernel.shape[0]}")
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        if self.alpha.shape != (len(self.branches),):
            raise ContractError(f"{len(self.branches)} branches but {self.alpha.size} weights")

    @property
    def channels(self):
        return self.trunk_kernel.shape[1]

    @property
    def dtype(self):
        return self.trunk_kernel.dtype

    @property
    def kernel_sizes(self):
        return [b.kernel_size for b in self.branches]

    @classmethod
    def init(cls, channels, kernel_sizes=(), rng=None, dtype=np.float32, alpha=None, gating=True):
        """Freshly initialized module with neutral BNs and uniform branch weights.

        With ``gating=False`` the pointwise convolutions are left as ``None``
        and only the depthwise stage is used (see :func:`mixed_conv`).
        """
        rng = np.random.default_rng() if rng is None else rng
        branches = []
        for k in kernel_sizes:
            kern = _dw_kernel(k, channels, rng, dtype) if k else None
            bias = T.param(np.zeros(channels, dtype)) if k else None
            branches.append(BranchSpec(k, kern, bias, BatchNorm1d.neutral(channels, dtype)))
        if alpha is None:
            alpha = np.full(len(branches), 1.0 / max(len(branches), 1))[:len(branches)]
        pw_in = _pw(2 * channels, channels, rng, dtype) if gating else (None, None)
        pw_out = _pw(channels, channels, rng, dtype) if gating else (None, None)
        return cls(*pw_in, _dw_kernel(TRUNK_SIZE, channels, rng, dtype), T.param(np.zeros(channels, dtype)),
                   BatchNorm1d.neutral(channels, dtype), branches, alpha,
                   BatchNorm1d.neutral(channels, dtype), *pw_out)

    @classmethod
    def random(cls, channels, kernel_sizes, rng, dtype=np.float64, alpha=None):
        """Module with random weights and random eval statistics everywhere."""
        m = cls.init(channels, kernel_sizes, rng, dtype)
        m.trunk_bias = T.param((0.1 * rng.standard_normal(channels)).astype(dtype))
        m.trunk_bn = BatchNorm1d.random(channels, rng, dtype)
        m.post_bn = BatchNorm1d.random(channels, rng, dtype)
        m.pw_in_b = T.param((0.1 * rng.standard_normal(2 * channels)).astype(dtype))
        m.pw_out_b = T.param((0.1 * rng.standard_normal(channels)).astype(dtype))
        for br in m.branches:
            if br.kernel_size:
                br.bias = T.param((0.1 * rng.standard_normal(channels)).astype(dtype))
            br.bn = BatchNorm1d.random(channels, rng, dtype)
        if alpha is None:
            logits = rng.standard_normal(len(kernel_sizes))
            alpha = np.exp(logits) / np.exp(logits).sum() if len(kernel_sizes) else np.zeros(0)
        m.alpha = np.asarray(alpha, dtype=np.float64)
        return m

    def parameters(self, prefix=""):
        """Trainable tensors by name (architecture weights excluded)."""
        p = {}
        if self.pw_in_w is not None:
            p.update({prefix + "pw_in.weight": self.pw_in_w, prefix + "pw_in.bias": self.pw_in_b,
                      prefix + "pw_out.weight": self.pw_out_w, prefix + "pw_out.bias": self.pw_out_b})
        if self.train_trunk:
            p.update({prefix + "trunk.kernel": self.trunk_kernel, prefix + "trunk.bias": self.trunk_bias})
            p.update(self.trunk_bn.parameters(prefix + "trunk.bn."))
        for i, br in enumerate(self.branches):
            if br.kernel_size:
                p[f"{prefix}branch{i}.kernel"] = br.kernel
                p[f"{prefix}branch{i}.bias"] = br.bias
            p.update(br.bn.parameters(f"{prefix}branch{i}.bn."))
        p.update(self.post_bn.parameters(prefix + "post_bn."))
        return p

    def to_tensors(self, prefix=""):
        d = {prefix + "form": np.array(TRAIN_FORM),
             prefix + "branch_kernel_sizes": np.array(self.kernel_sizes, dtype=np.float64),
             prefix + "alpha": self.alpha.copy()}
        if self.pw_in_w is not None:
            d.update({prefix + "pw_in.weight": self.pw_in_w.data, prefix + "pw_in.bias": self.pw_in_b.data,
                      prefix + "pw_out.weight": self.pw_out_w.data, prefix + "pw_out.bias": self.pw_out_b.data})
        d.update({prefix + "trunk.kernel": self.trunk_kernel.data, prefix + "trunk.bias": self.trunk_bias.data})
        d.update(self.trunk_bn.to_tensors(prefix + "trunk.bn."))
        for i, br in enumerate(self.branches):
            if br.kernel_size:
                d[f"{prefix}branch{i}.kernel"] = br.kernel.data
                d[f"{prefix}branch{i}.bias"] = br.bias.data
            d.update(br.bn.to_tensors(f"{prefix}branch{i}.bn."))
        d.update(self.post_bn.to_tensors(prefix + "post_bn."))
        return d


@dataclass
class FusedNSRConv:
    """Inference form: one 31-tap depthwise convolution, no BN."""

    pw_in_w: Tensor
    pw_in_b: Tensor
    kernel: Tensor
    bias: Tensor
    pw_out_w: Tensor
    pw_out_b: Tensor

    def __post_init__(self):
        if self.kernel.shape[0] != TRUNK_SIZE:
            raise ContractError(f"fused kernel must have {TRUNK_SIZE} taps")

    @property
    def channels(self):
        return self.kernel.shape[1]

    def to_tensors(self, prefix=""):
        d = {prefix + "form": np.array(FUSED_FORM),
             prefix + "fused.kernel": self.kernel.data, prefix + "fused.bias": self.bias.data}
        if self.pw_in_w is not None:
            d.update({prefix + "pw_in.weight": self.pw_in_w.data, prefix + "pw_in.bias": self.pw_in_b.data,
                      prefix + "pw_out.weight": self.pw_out_w.data, prefix + "pw_out.bias": self.pw_out_b.data})
        return d


# ---------------------------------------------------------------------------
# forward passes


def mixed_conv(g, module, alpha=None, mode="eval"):
    """Depthwise stage before the post BN: trunk plus alpha-weighted branches.

    ``alpha`` may be a Tensor (e.g. a softmax of trainable logits); it
    defaults to the module's fixed weights.
    """
    if alpha is None:
        alpha = Tensor(module.alpha.astype(module.dtype))
    if alpha.shape != (len(module.branches),):
        raise ContractError(f"{len(module.branches)} branches but alpha has shape {alpha.shape}")
    y = module.trunk_bn(T.depthwise_conv1d(g, module.trunk_kernel, module.trunk_bias), mode)
    for i, br in enumerate(module.branches):
        y = y + alpha[i] * br.forward(g, mode)
    return y


def _gate(x, w, b):
    if w is None:
        return x
    return T.glu(T.linear(x, w, b))


def _check_seq(x):
    if x.ndim not in (2, 3) or x.shape[-2] < 1:
        raise ShapeError(f"expected [T, C] or [B, T, C] with T >= 1, got {x.shape}")


def nsr_forward_train(x, module, mode="eval", alpha=None):
    """Training-form forward; ``mode`` selects batch or running BN statistics."""
    _check_seq(x)
    h = module.post_bn(mixed_conv(_gate(x, module.pw_in_w, module.pw_in_b), module, alpha, mode), mode)
    if module.pw_out_w is None:
        return h
    return T.linear(T.swish(h), module.pw_out_w, module.pw_out_b)


def nsr_forward_fused(x, module):
    _check_seq(x)
    h = T.depthwise_conv1d(_gate(x, module.pw_in_w, module.pw_in_b), module.kernel, module.bias)
    if module.pw_out_w is None:
        return h
    return T.linear(T.swish(h), module.pw_out_w, module.pw_out_b)


def nsr_forward(x, module, mode="eval"):
    if isinstance(module, FusedNSRConv):
        return nsr_forward_fused(x, module)
    return nsr_forward_train(x, module, mode)


# ---------------------------------------------------------------------------
# re-parameterization


def fold_bn(kernel, bias, bn):
    """Fold an eval-mode BN into the preceding depthwise convolution.

    ``kernel`` may be None for a BN-only branch, which is treated as the
    1-tap identity kernel with zero bias. Returns float64 ``(kernel, bias)``.
    """
    s, t = bn.affine()
    if kernel is None:
        kernel = np.ones((1, s.size))
        bias = np.zeros(s.size)
    kernel = np.asarray(kernel.data if isinstance(kernel, Tensor) else kernel, dtype=np.float64)
    bias = np.zeros(s.size) if bias is None else np.asarray(
        bias.data if isinstance(bias, Tensor) else bias, dtype=np.float64)
    return kernel * s, bias * s + t


def pad_kernel(kernel, target=TRUNK_SIZE):
    """Zero-pad a ``[k, C]`` kernel to ``[target, C]`` with taps starting at ``(target - k) // 2``.

    The offset matches SAME padding ``(ceil((k-1)/2), floor((k-1)/2))``, so
    even kernels get the extra zero on the right.
    """
    kernel = np.asarray(kernel)
    k = kernel.shape[0]
    if k > target:
        raise ContractError(f"kernel of {k} taps does not fit in {target}")
    out = np.zeros((target,) + kernel.shape[1:], dtype=kernel.dtype)
    off = (target - k) // 2
    out[off:off + k] = kernel
    return out


def fuse(module, alpha=None):
    """Collapse a training-form module into a :class:`FusedNSRConv`.

    Uses the BN running statistics; ``module`` is not modified.
    """
    if isinstance(module, FusedNSRConv):
        return module
    alpha = module.alpha if alpha is None else np.asarray(alpha, dtype=np.float64)
    if alpha.shape != (len(module.branches),):
        raise ContractError(f"{len(module.branches)} branches but {alpha.size} weights")
    if len(alpha) and (np.any(alpha <= 0) or abs(alpha.sum() - 1) > 1e-6):
        raise ContractError("branch weights must be positive and sum to 1")
    k, b = fold_bn(module.trunk_kernel, module.trunk_bias, module.trunk_bn)
    kernel, bias = pad_kernel(k), b
    for a, br in zip(alpha, module.branches):
        k, b = fold_bn(br.kernel, br.bias, br.bn)
        kernel = kernel + a * pad_kernel(k)
        bias = bias + a * b
    s, t = module.post_bn.affine()
    dtype = module.dtype
    return FusedNSRConv(module.pw_in_w, module.pw_in_b, Tensor((kernel * s).astype(dtype)),
                        Tensor((bias * s + t).astype(dtype)), module.pw_out_w, module.pw_out_b)


def forward_flops(module, length):
    """Multiply-add count of one forward pass over ``length`` frames.

    The fused count depends only on the channel count and the 31-tap
    kernel; branches and BN layers contribute to the training form only.
    """
    C = module.channels
    pw = 0 if module.pw_in_w is None else length * (2 * C * C + C * C)
    if isinstance(module, FusedNSRConv):
        return pw + length * C * TRUNK_SIZE
    bn = 2 * length * C
    flops = pw + length * C * TRUNK_SIZE + 2 * bn
    for br in module.branches:
        flops += length * C * (br.kernel_size + 1) + bn
    return flops


# ---------------------------------------------------------------------------
# serialization


def module_to_tensors(module, prefix=""):
    return module.to_tensors(prefix)


def required_names(d, prefix=""):
    """Tensor names a stored module needs, as far as its header tensors reveal."""
    names = [prefix + "form"]
    if prefix + "form" not in d:
        return names
    if prefix + "pw_in.weight" in d or prefix + "pw_out.weight" in d:
        names += [prefix + n for n in ("pw_in.weight", "pw_in.bias", "pw_out.weight", "pw_out.bias")]
    if float(d[prefix + "form"]) == FUSED_FORM:
        return names + [prefix + "fused.kernel", prefix + "fused.bias"]
    names += [prefix + "branch_kernel_sizes", prefix + "alpha", prefix + "trunk.kernel", prefix + "trunk.bias"]
    names += BatchNorm1d.names(prefix + "trunk.bn.") + BatchNorm1d.names(prefix + "post_bn.")
    for i, k in enumerate(np.atleast_1d(d.get(prefix + "branch_kernel_sizes", np.zeros(0)))):
        if int(k):
            names += [f"{prefix}branch{i}.kernel", f"{prefix}branch{i}.bias"]
        names += BatchNorm1d.names(f"{prefix}branch{i}.bn.")
    return names


def module_from_tensors(d, prefix="", form=None):
    """Rebuild a module from checkpoint tensors.

    ``form`` may be ``"train"``, ``"fused"`` or None (as stored). Loading a
    training-form record as ``"fused"`` fuses it.
    """
    from . import checkpoint

    checkpoint.require(d, required_names(d, prefix))
    stored = float(d[prefix + "form"])
    gating = (prefix + "pw_in.weight") in d
    pw_names = [prefix + n for n in ("pw_in.weight", "pw_in.bias", "pw_out.weight", "pw_out.bias")]
    pw = [T.param(d[n]) for n in pw_names] if gating else [None] * 4
    if stored == FUSED_FORM:
        if form == "train":
            raise CheckpointError("cannot recover the training form from a fused checkpoint")
        return FusedNSRConv(pw[0], pw[1], Tensor(d[prefix + "fused.kernel"]), Tensor(d[prefix + "fused.bias"]),
                            pw[2], pw[3])
    if stored != TRAIN_FORM:
        raise CheckpointError(f"unknown module form tag {stored}")
    sizes = [int(k) for k in np.atleast_1d(d[prefix + "branch_kernel_sizes"])]
    branches = []
    for i, k in enumerate(sizes):
        kern = T.param(d[f"{prefix}branch{i}.kernel"]) if k else None
        bias = T.param(d[f"{prefix}branch{i}.bias"]) if k else None
        branches.append(BranchSpec(k, kern, bias, BatchNorm1d.from_tensors(d, f"{prefix}branch{i}.bn.")))
    module = NSRConv(pw[0], pw[1], T.param(d[prefix + "trunk.kernel"]), T.param(d[prefix + "trunk.bias"]),
                     BatchNorm1d.from_tensors(d, prefix + "trunk.bn."), branches, d[prefix + "alpha"].copy(),
                     BatchNorm1d.from_tensors(d, prefix + "post_bn."), pw[2], pw[3])
    return fuse(module) if form == "fused" else module
