"""Speech encoder with per-rate attention assignment and a temporal U-Net.

Layout for the default 12-block geometry::

    subsample (x4) -> blocks 1..6 (40 ms, LA) -> time_reduce
        -> blocks 7..11 (80 ms, SA) -> time_recover(+skip) -> block 12 (40 ms, LA)
        -> final LayerNorm

Blocks strictly between ``downsample_after`` and ``upsample_before`` run on
the squeezed sequence. Every block is ``[attention, ffn, conv, ffn]`` with
post-norm residuals.
"""
import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from . import tensor as T
from .attention import PHI_KINDS, AttentionLayer, RoPEConfig, attention_forward
from .errors import CheckpointError, ConfigError, ContractError, DTypeError, ShapeError
from .nsr import FusedNSRConv, NSRConv, fuse, module_from_tensors, nsr_forward, required_names
from .tensor import Tensor

ATTENTION_MODES = ("hybrid", "all_sa", "all_la")
DEFAULT_BRANCHES = (5, 4, 3, 7)
DEFAULT_ALPHA = (0.377, 0.279, 0.246, 0.098)


@dataclass
class EncoderConfig:
    input_dim: int = 80
    d_model: int = 256
    heads: int = 4
    ffn_dim: int = 1024
    conv_kernel: int = 31
    num_blocks: int = 12
    downsample_after: int = 6
    upsample_before: int = 12
    base_frame_ms: int = 40
    squeezed_frame_ms: int = 80
    attention: str = "hybrid"
    phi: str = "elu"
    la_eps: float = 1e-6
    rope_base: float = 10000.0
    ln_eps: float = 1e-5
    bn_eps: float = 1e-5
    branch_kernels: tuple = DEFAULT_BRANCHES
    branch_alpha: tuple = DEFAULT_ALPHA

    def __post_init__(self):
        self.branch_kernels = tuple(int(k) for k in self.branch_kernels)
        self.branch_alpha = tuple(float(a) for a in self.branch_alpha)
        self.validate()

    def validate(self):
        if not 0 < self.downsample_after < self.upsample_before <= self.num_blocks:
            raise ConfigError("need 0 < downsample_after < upsample_before <= num_blocks, got "
                              f"{self.downsample_after}, {self.upsample_before}, {self.num_blocks}")
        if self.conv_kernel != 31:
            raise ConfigError("the convolution module uses a 31-tap trunk")
        if self.attention not in ATTENTION_MODES:
            raise ConfigError(f"attention must be one of {ATTENTION_MODES}")
        if self.phi not in PHI_KINDS:
            raise ConfigError(f"unknown feature map {self.phi!r}")
        if self.d_model % self.heads or (self.d_model // self.heads) % 2:
            raise ConfigError("d_model must split into heads of even dimension")
        if len(self.branch_kernels) != len(self.branch_alpha):
            raise ConfigError("branch_kernels and branch_alpha differ in length")

    def frame_ms(self, block):
        """Frame period seen by 1-based ``block``."""
        if self.downsample_after < block < self.upsample_before:
            return self.squeezed_frame_ms
        return self.base_frame_ms

    def variant(self, block):
        if self.attention == "all_sa":
            return "SA"
        if self.attention == "all_la":
            return "LA"
        return "SA" if self.frame_ms(block) == self.squeezed_frame_ms else "LA"

    def variants(self):
        return [self.variant(j) for j in range(1, self.num_blocks + 1)]

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["branch_kernels"] = list(self.branch_kernels)
        d["branch_alpha"] = list(self.branch_alpha)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown encoder config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def dump(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)


def _linear_init(c_out, c_in, rng, dtype):
    bound = 1.0 / np.sqrt(c_in)
    return (T.param(rng.uniform(-bound, bound, (c_out, c_in)).astype(dtype)),
            T.param(np.zeros(c_out, dtype)))


def _ln_init(d, dtype):
    return T.param(np.ones(d, dtype)), T.param(np.zeros(d, dtype))


@dataclass
class FeedForward:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, d, hidden, rng, dtype):
        return cls(*_linear_init(hidden, d, rng, dtype), *_linear_init(d, hidden, rng, dtype))

    def __call__(self, x):
        return T.linear(T.swish(T.linear(x, self.w1, self.b1)), self.w2, self.b2)

    def named(self):
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


@dataclass
class HybridBlock:
    attn: AttentionLayer
    ffn1: FeedForward
    conv: object
    ffn2: FeedForward
    norms: list = field(default_factory=list)  # four (gamma, beta) pairs

    def __call__(self, x, rope, ln_eps=1e-5, mode="eval"):
        ln = self.norms
        x = T.layer_norm(x + attention_forward(x, self.attn, rope), *ln[0], ln_eps)
        x = T.layer_norm(x + self.ffn1(x), *ln[1], ln_eps)
        x = T.layer_norm(x + nsr_forward(x, self.conv, mode), *ln[2], ln_eps)
        return T.layer_norm(x + self.ffn2(x), *ln[3], ln_eps)


@dataclass
class Encoder:
    config: EncoderConfig
    sub: dict
    blocks: list
    reduce_kernel: Tensor
    reduce_bias: Tensor
    final_ln: tuple

    @classmethod
    def init(cls, config, rng=None, dtype=np.float32, random_stats=False):
        """Randomly initialized encoder.

        ``random_stats`` gives every BN random running statistics and affine
        parameters, which makes fusion non-trivial.
        """
        rng = np.random.default_rng() if rng is None else rng
        d = config.d_model
        w1, b1 = _linear_init(d, 3 * config.input_dim, rng, dtype)
        pw, pb = _linear_init(d, d, rng, dtype)
        proj, projb = _linear_init(d, d, rng, dtype)
        dw = T.param(rng.uniform(-1 / np.sqrt(3), 1 / np.sqrt(3), (3, d)).astype(dtype))
        sub = {"conv1.weight": w1, "conv1.bias": b1, "conv2.dw": dw, "conv2.dw_bias": T.param(np.zeros(d, dtype)),
               "conv2.pw": pw, "conv2.pw_bias": pb, "proj.weight": proj, "proj.bias": projb}
        blocks = []
        for j in range(1, config.num_blocks + 1):
            attn = AttentionLayer.init(d, config.heads, config.variant(j), rng, dtype, config.phi, config.la_eps)
            if random_stats:
                conv = NSRConv.random(d, config.branch_kernels, rng, dtype, alpha=config.branch_alpha)
            else:
                conv = NSRConv.init(d, config.branch_kernels, rng, dtype, alpha=config.branch_alpha)
            for bn in [conv.trunk_bn, conv.post_bn] + [b.bn for b in conv.branches]:
                bn.eps = config.bn_eps
            blocks.append(HybridBlock(attn, FeedForward.init(d, config.ffn_dim, rng, dtype), conv,
                                      FeedForward.init(d, config.ffn_dim, rng, dtype),
                                      [_ln_init(d, dtype) for _ in range(4)]))
        return cls(config, sub, blocks, T.param(np.full((3, d), 1.0 / 3, dtype)), T.param(np.zeros(d, dtype)),
                   _ln_init(d, dtype))

    @property
    def dtype(self):
        return self.reduce_kernel.dtype

    def rope(self):
        return RoPEConfig(self.config.d_model // self.config.heads, self.config.rope_base)

    def forward(self, features, mode="eval"):
        return encoder_forward(features, self, mode)

    __call__ = forward

    def fused(self):
        """Copy whose convolution modules are all in fused form (weights shared)."""
        blocks = [dataclasses.replace(b, conv=fuse(b.conv)) for b in self.blocks]
        return dataclasses.replace(self, blocks=blocks)

    def parameters(self):
        p = {"sub." + k: v for k, v in self.sub.items()}
        p["reduce.kernel"], p["reduce.bias"] = self.reduce_kernel, self.reduce_bias
        p["final_ln.gamma"], p["final_ln.beta"] = self.final_ln
        for j, b in enumerate(self.blocks):
            pre = f"block{j}."
            p.update({pre + "attn." + k: v for k, v in b.attn.parameters().items()})
            p.update({pre + "ffn1." + k: v for k, v in b.ffn1.named().items()})
            p.update({pre + "ffn2." + k: v for k, v in b.ffn2.named().items()})
            for i, (g, be) in enumerate(b.norms):
                p[f"{pre}ln{i}.gamma"], p[f"{pre}ln{i}.beta"] = g, be
            if isinstance(b.conv, NSRConv):
                p.update(b.conv.parameters(pre + "conv."))
            else:
                p.update({pre + "conv.pw_in.weight": b.conv.pw_in_w, pre + "conv.pw_in.bias": b.conv.pw_in_b,
                          pre + "conv.fused.kernel": b.conv.kernel, pre + "conv.fused.bias": b.conv.bias,
                          pre + "conv.pw_out.weight": b.conv.pw_out_w, pre + "conv.pw_out.bias": b.conv.pw_out_b})
        return p

    def to_tensors(self):
        """Flat name -> array mapping for the checkpoint file (config under ``config.*``)."""
        out = _config_tensors(self.config)
        for name, t in self.parameters().items():
            if ".conv." not in name:
                out[name] = t.data
        for j, b in enumerate(self.blocks):
            out.update(b.conv.to_tensors(f"block{j}.conv."))
        return out


def _config_tensors(cfg):
    d = {"meta.kind": np.array(2.0)}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if f.name == "attention":
            v = ATTENTION_MODES.index(v)
        elif f.name == "phi":
            v = PHI_KINDS.index(v)
        d["config." + f.name] = np.array(v, dtype=np.float64)
    return d


def _config_from_tensors(d):
    fields = dataclasses.fields(EncoderConfig)
    checkpoint.require(d, ["config." + f.name for f in fields])
    kw = {}
    for f in fields:
        v = d["config." + f.name]
        if f.name == "attention":
            kw[f.name] = ATTENTION_MODES[int(v)]
        elif f.name == "phi":
            kw[f.name] = PHI_KINDS[int(v)]
        elif f.name in ("branch_kernels",):
            kw[f.name] = tuple(int(k) for k in v)
        elif f.name == "branch_alpha":
            kw[f.name] = tuple(float(a) for a in v)
        elif f.type in (int, "int"):
            kw[f.name] = int(v)
        else:
            kw[f.name] = float(v)
    return EncoderConfig(**kw)


def encoder_from_tensors(d, form=None):
    """Rebuild an encoder; ``form="fused"`` fuses training-form conv modules."""
    cfg = _config_from_tensors(d)
    names = ["sub." + k for k in ("conv1.weight", "conv1.bias", "conv2.dw", "conv2.dw_bias", "conv2.pw",
                                  "conv2.pw_bias", "proj.weight", "proj.bias")]
    names += ["reduce.kernel", "reduce.bias", "final_ln.gamma", "final_ln.beta"]
    for j in range(cfg.num_blocks):
        pre = f"block{j}."
        names += [pre + "attn." + w for w in ("w_q", "w_k", "w_v", "w_o")]
        names += [pre + f + "." + w for f in ("ffn1", "ffn2") for w in ("w1", "b1", "w2", "b2")]
        names += [f"{pre}ln{i}.{w}" for i in range(4) for w in ("gamma", "beta")]
        names += required_names(d, pre + "conv.")
    checkpoint.require(d, names)
    P = lambda n: T.param(d[n])
    sub = {k[4:]: P(k) for k in names[:8]}
    blocks = []
    for j in range(cfg.num_blocks):
        pre = f"block{j}."
        attn = AttentionLayer(*(P(pre + "attn." + w) for w in ("w_q", "w_k", "w_v", "w_o")), heads=cfg.heads,
                              variant=cfg.variant(j + 1), phi=cfg.phi, eps=cfg.la_eps)
        ffns = [FeedForward(*(P(pre + f + "." + w) for w in ("w1", "b1", "w2", "b2"))) for f in ("ffn1", "ffn2")]
        conv = module_from_tensors(d, pre + "conv.", form)
        norms = [(P(f"{pre}ln{i}.gamma"), P(f"{pre}ln{i}.beta")) for i in range(4)]
        blocks.append(HybridBlock(attn, ffns[0], conv, ffns[1], norms))
    return Encoder(cfg, sub, blocks, P("reduce.kernel"), P("reduce.bias"),
                   (P("final_ln.gamma"), P("final_ln.beta")))


def save_encoder(path, encoder):
    checkpoint.save(path, encoder.to_tensors())


def build_from_checkpoint(path, form="train"):
    """Load an encoder file; nothing is returned unless every tensor is present and valid."""
    if form not in ("train", "fused"):
        raise ContractError(f"form must be 'train' or 'fused', got {form!r}")
    d = checkpoint.load(path)
    if float(d.get("meta.kind", np.array(-1.0))) != 2.0:
        raise CheckpointError(f"{path} does not hold an encoder")
    return encoder_from_tensors(d, form)


# ---------------------------------------------------------------------------
# forward pieces


def subsample(features, sub):
    """Two stride-2 stages (dense, then depthwise-separable) and a projection: T -> ceil(T / 4)."""
    if features.shape[-2] < 4:
        raise ShapeError(f"input too short for x4 subsampling: {features.shape[-2]} frames")
    x = T.swish(T.linear(T.unfold1d(features, 3, stride=2), sub["conv1.weight"], sub["conv1.bias"]))
    x = T.depthwise_conv1d(x, sub["conv2.dw"], sub["conv2.dw_bias"], stride=2)
    x = T.swish(T.linear(x, sub["conv2.pw"], sub["conv2.pw_bias"]))
    return T.linear(x, sub["proj.weight"], sub["proj.bias"])


def time_reduce(x, kernel, bias):
    """Stride-2 depthwise convolution: N -> ceil(N / 2)."""
    return T.depthwise_conv1d(x, kernel, bias, stride=2)


def time_recover(x, skip):
    """Repeat every frame twice, trim to the skip length and add the skip."""
    n, target = x.shape[-2], skip.shape[-2]
    if -(-target // 2) != n:
        raise ContractError(f"skip length {target} does not match reduced length {n}")
    return T.take(x, np.arange(target) // 2, axis=x.ndim - 2) + skip


def encoder_forward(features, encoder, mode="eval"):
    """``[T, F]`` (or ``[B, T, F]``) features to ``[ceil(T/4), d_model]`` encodings."""
    cfg = encoder.config
    if not isinstance(features, Tensor):
        features = Tensor(np.asarray(features, dtype=encoder.dtype))
    if features.dtype != encoder.dtype:
        raise DTypeError(f"features are {features.dtype}, encoder is {encoder.dtype}")
    rope = encoder.rope()
    x = subsample(features, encoder.sub)
    skip = None
    for j, block in enumerate(encoder.blocks, start=1):
        if j == cfg.downsample_after + 1:
            skip = x
            x = time_reduce(x, encoder.reduce_kernel, encoder.reduce_bias)
        if j == cfg.upsample_before:
            x = time_recover(x, skip)
        x = block(x, rope, cfg.ln_eps, mode)
    return T.layer_norm(x, *encoder.final_ln, cfg.ln_eps)
