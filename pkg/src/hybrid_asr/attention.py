"""Rotary position embeddings and rotary softmax / linear attention."""
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, NumericError, ShapeError
from .tensor import Tensor

VARIANTS = ("SA", "LA")
PHI_KINDS = ("elu", "relu", "exp")


@dataclass
class RoPEConfig:
    """Rotation frequencies ``theta_i = base ** (-2 (i - 1) / d)`` for i = 1..d/2."""

    d: int
    base: float = 10000.0
    theta: np.ndarray = field(init=False, repr=False)
    _cache: dict = field(init=False, repr=False, compare=False, default_factory=dict)

    def __post_init__(self):
        if self.d <= 0 or self.d % 2:
            raise ConfigError(f"rotary dimension must be positive and even, got {self.d}")
        self.theta = self.base ** (-2.0 * np.arange(self.d // 2) / self.d)

    def angles(self, n, offset=0):
        """cos and sin tables of shape ``[n, d/2]`` for positions offset..offset+n-1."""
        key = (n, offset)
        hit = self._cache.get(key)
        if hit is None:
            pos = np.arange(n, dtype=np.float64) + offset
            ang = pos[:, None] * self.theta[None, :]
            hit = (np.cos(ang), np.sin(ang))
            if len(self._cache) > 64:
                self._cache.clear()
            self._cache[key] = hit
        return hit


def rope_matrix(position, cfg):
    """Explicit ``d x d`` block-diagonal rotation for one position."""
    R = np.zeros((cfg.d, cfg.d))
    for i, th in enumerate(cfg.theta):
        c, s = np.cos(position * th), np.sin(position * th)
        R[2 * i:2 * i + 2, 2 * i:2 * i + 2] = [[c, -s], [s, c]]
    return R


def apply_rope(x, cfg, offset=0):
    """Rotate row m of ``x[..., N, d]`` by the angles of position ``m + offset``."""
    if x.shape[-1] != cfg.d:
        raise ShapeError(f"last extent {x.shape[-1]} does not match rotary dimension {cfg.d}")
    cos, sin = cfg.angles(x.shape[-2], offset)
    return T.rope_rotate(x, cos, sin)


def phi(x, kind="elu"):
    """Non-negative feature map for linear attention.

    ``elu`` gives ``elu(x) + 1`` (strictly positive), ``relu`` and ``exp``
    are the alternatives.
    """
    if kind == "elu":
        return T.elu_plus_one(x)
    if kind == "relu":
        return T.relu(x)
    if kind == "exp":
        return T.exp(x)
    raise ConfigError(f"unknown feature map {kind!r}; expected one of {PHI_KINDS}")


@dataclass
class AttentionLayer:
    """Multi-head attention parameters; weights are stored ``[out, in]``."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    heads: int
    variant: str = "SA"
    phi: str = "elu"
    eps: float = 1e-6

    def __post_init__(self):
        d_model = self.w_q.shape[0]
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.phi not in PHI_KINDS:
            raise ConfigError(f"unknown feature map {self.phi!r}")
        if self.heads < 1 or d_model % self.heads:
            raise ConfigError(f"d_model={d_model} is not divisible by heads={self.heads}")
        if (d_model // self.heads) % 2:
            raise ConfigError(f"head dimension {d_model // self.heads} must be even for rotary embeddings")
        for name in ("w_q", "w_k", "w_v", "w_o"):
            if getattr(self, name).shape != (d_model, d_model):
                raise ShapeError(f"{name} must be {d_model}x{d_model}")

    @property
    def d_model(self):
        return self.w_q.shape[0]

    @property
    def head_dim(self):
        return self.d_model // self.heads

    @classmethod
    def init(cls, d_model, heads, variant="SA", rng=None, dtype=np.float32, phi="elu", eps=1e-6):
        rng = np.random.default_rng() if rng is None else rng
        bound = 1.0 / np.sqrt(d_model)
        ws = [T.param(rng.uniform(-bound, bound, (d_model, d_model)).astype(dtype)) for _ in range(4)]
        return cls(*ws, heads=heads, variant=variant, phi=phi, eps=eps)

    def parameters(self):
        return {"w_q": self.w_q, "w_k": self.w_k, "w_v": self.w_v, "w_o": self.w_o}


def _split_heads(x, heads):
    # [..., N, D] -> [..., H, N, hd]
    *lead, n, d = x.shape
    x = T.reshape(x, (*lead, n, heads, d // heads))
    axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    return T.transpose(x, axes)


def _merge_heads(x):
    *lead, h, n, hd = x.shape
    axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    return T.reshape(T.transpose(x, axes), (*lead, n, h * hd))


def _swap_last(x):
    axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    return T.transpose(x, axes)


def _check_input(x, layer, cfg):
    if x.ndim not in (2, 3) or x.shape[-1] != layer.d_model:
        raise ShapeError(f"expected [N, {layer.d_model}] or [B, N, {layer.d_model}], got {x.shape}")
    if x.shape[-2] == 0:
        raise ShapeError("attention over an empty sequence")
    if cfg is None:
        cfg = RoPEConfig(layer.head_dim)
    elif cfg.d != layer.head_dim:
        raise ConfigError(f"rotary dimension {cfg.d} != head dimension {layer.head_dim}")
    return cfg


def sa_forward(x, layer, cfg=None, offset=0, return_weights=False):
    """Rotary softmax attention.

    Queries and keys are rotated per head, scores are scaled by
    ``1/sqrt(head_dim)`` and row-normalized; values are not rotated.
    """
    if layer.variant != "SA":
        raise ContractError("sa_forward needs an SA layer")
    cfg = _check_input(x, layer, cfg)
    cos, sin = cfg.angles(x.shape[-2], offset)
    q = T.rope_rotate(_split_heads(T.linear(x, layer.w_q), layer.heads), cos, sin)
    k = T.rope_rotate(_split_heads(T.linear(x, layer.w_k), layer.heads), cos, sin)
    v = _split_heads(T.linear(x, layer.w_v), layer.heads)
    scores = T.matmul(T.scale(q, 1.0 / np.sqrt(layer.head_dim)), _swap_last(k))
    weights = T.softmax(scores, axis=-1)
    out = T.linear(_merge_heads(T.matmul(weights, v)), layer.w_o)
    return (out, weights) if return_weights else out


def la_forward(x, layer, cfg=None, offset=0):
    """Rotary linear attention in O(N * head_dim^2).

    The numerator rotates the feature-mapped queries and keys and is
    evaluated through the aggregate ``S = sum_n R_n phi(k_n) v_n^T``; the
    denominator ``phi(q_m) . sum_n phi(k_n)`` is left unrotated.
    """
    if layer.variant != "LA":
        raise ContractError("la_forward needs an LA layer")
    cfg = _check_input(x, layer, cfg)
    cos, sin = cfg.angles(x.shape[-2], offset)
    qf = phi(_split_heads(T.linear(x, layer.w_q), layer.heads), layer.phi)
    kf = phi(_split_heads(T.linear(x, layer.w_k), layer.heads), layer.phi)
    v = _split_heads(T.linear(x, layer.w_v), layer.heads)
    state = T.matmul(_swap_last(T.rope_rotate(kf, cos, sin)), v)
    num = T.matmul(T.rope_rotate(qf, cos, sin), state)
    ksum = T.sum_(kf, axis=-2, keepdims=True)
    den = T.matmul(qf, _swap_last(ksum)) + layer.eps
    bad = ~(den.data > np.finfo(den.dtype).tiny)
    if bad.any():
        where = np.argwhere(bad)[0]
        raise NumericError(f"linear attention denominator vanished at position {int(where[-2])} "
                           f"(head {int(where[-3])})")
    return T.linear(_merge_heads(num / den), layer.w_o)


def attention_forward(x, layer, cfg=None, offset=0):
    if layer.variant == "SA":
        return sa_forward(x, layer, cfg, offset)
    return la_forward(x, layer, cfg, offset)


def attention_weight(x_m, x_n, m, n, layer, cfg=None, route="rotated"):
    """Per-head score ``q_m . k_n`` for two tokens, returned as an array of length ``heads``.

    ``route="rotated"`` rotates query and key at their absolute positions;
    ``route="relative"`` applies the single rotation ``R_{n-m}`` between the
    projected vectors.
    """
    if m < 0 or n < 0:
        raise ContractError(f"positions must be non-negative, got m={m}, n={n}")
    cfg = cfg or RoPEConfig(layer.head_dim)
    hd = layer.head_dim
    x_m = np.asarray(x_m, dtype=np.float64)
    x_n = np.asarray(x_n, dtype=np.float64)
    wq = layer.w_q.data.astype(np.float64)
    wk = layer.w_k.data.astype(np.float64)
    scores = np.empty(layer.heads)
    for h in range(layer.heads):
        rows = slice(h * hd, (h + 1) * hd)
        q, k = wq[rows] @ x_m, wk[rows] @ x_n
        if route == "rotated":
            cos_m, sin_m = cfg.angles(1, m)
            cos_n, sin_n = cfg.angles(1, n)
            qr = T.rope_rotate(Tensor(q[None]), cos_m, sin_m).data[0]
            kr = T.rope_rotate(Tensor(k[None]), cos_n, sin_n).data[0]
            scores[h] = qr @ kr
        elif route == "relative":
            scores[h] = q @ rope_matrix(n - m, cfg) @ k
        else:
            raise ConfigError(f"unknown route {route!r}")
    return scores
