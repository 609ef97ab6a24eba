"""Differentiable search over branch kernel sizes, and the pipeline around it.

Stage 1 relaxes the choice of branches in every block to a softmax over
logits ``c`` and alternates two updates: ``c`` descends the loss on
``train2`` (optionally through a one-step unrolled ``w``), ``w`` descends the
loss on ``train1``. The best-validation states are averaged, branches with
negative logits are cropped and the rest re-softmaxed. Stage 2 re-trains the
weights of the cropped model with the weights ``alpha'`` frozen; the result is
ready for fusion.
"""
import csv
import dataclasses
import io
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from . import tensor as T
from .errors import CheckpointError, ConfigError, ContractError
from .nsr import MAX_BRANCH_SIZE, TRUNK_SIZE, NSRConv, fuse, nsr_forward, nsr_forward_train
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

CROP_RULES = ("logit_sign", "below_uniform")
BN_MODES = ("train", "eval")
STATE_KIND = 3.0
MODEL_KIND = 4.0


# ---------------------------------------------------------------------------
# configuration


@dataclass
class SearchSpace:
    """Candidate kernel sizes shared by ``blocks`` searchable blocks."""

    candidates: tuple = (0, 3, 5, 7, 15, 30)
    blocks: int = 2

    def __post_init__(self):
        # a 31-tap candidate coincides with the trunk; it is capped to the widest branch
        sizes = tuple(min(int(k), MAX_BRANCH_SIZE) if int(k) == TRUNK_SIZE else int(k) for k in self.candidates)
        if not sizes:
            raise ConfigError("the candidate set is empty")
        if any(k < 0 or k > MAX_BRANCH_SIZE for k in sizes):
            raise ConfigError(f"candidate kernel sizes must lie in [0, {TRUNK_SIZE}], got {self.candidates}")
        if len(set(sizes)) != len(sizes):
            raise ConfigError(f"duplicate candidate kernel sizes: {sizes}")
        if self.blocks < 1:
            raise ConfigError("the search space needs at least one block")
        self.candidates = sizes

    @classmethod
    def full(cls, blocks=12):
        return cls(tuple(range(TRUNK_SIZE)), blocks)

    @property
    def size(self):
        return len(self.candidates)


@dataclass
class SearchConfig:
    """Every knob of a search run; :meth:`planted` gives the planted-kernel preset."""

    candidates: tuple = (0, 3, 5, 7, 15, 30)
    blocks: int = 2
    channels: int = 4
    # synthetic task
    planted_kernel: int = 7
    noise: float = 0.5
    seq_len: int = 48
    n_train: int = 48
    n_val: int = 32
    batch_size: int = 8
    # schedule
    warmup_epochs: int = 2
    search_epochs: int = 10
    steps_per_epoch: int = 20
    retrain_steps: int = 200
    # optimizers
    lr_w: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 3e-4
    lr_c: float = 3e-4
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    xi: float = 0.0
    # stage-2 selection
    ring_size: int = 5
    crop_rule: str = "logit_sign"
    # model details
    train_trunk: bool = False
    search_bn_affine: bool = False
    search_bn_mode: str = "train"
    seed: int = 0

    def __post_init__(self):
        self.candidates = SearchSpace(self.candidates, self.blocks).candidates
        self.adam_betas = tuple(float(b) for b in self.adam_betas)
        self.validate()

    def validate(self):
        if self.xi < 0:
            raise ConfigError(f"xi must be non-negative, got {self.xi}")
        if self.crop_rule not in CROP_RULES:
            raise ConfigError(f"crop_rule must be one of {CROP_RULES}")
        if self.search_bn_mode not in BN_MODES:
            raise ConfigError(f"search_bn_mode must be one of {BN_MODES}")
        for name in ("warmup_epochs", "search_epochs", "steps_per_epoch", "retrain_steps"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.channels < 1 or self.seq_len < 1 or self.batch_size < 1 or self.ring_size < 1:
            raise ConfigError("channels, seq_len, batch_size and ring_size must be positive")
        if self.n_train < 2 or self.n_val < 1:
            raise ConfigError("need at least two training and one validation example")
        if not 0 < self.planted_kernel <= TRUNK_SIZE:
            raise ConfigError(f"planted kernel size must lie in [1, {TRUNK_SIZE}]")

    @property
    def space(self):
        return SearchSpace(self.candidates, self.blocks)

    @classmethod
    def planted(cls, **overrides):
        """Single block, candidates {3, 7, 15}, planted 7-tap target.

        Branch BNs stay on their running statistics, so every branch is a
        plain linear convolution and weight decay makes a branch's extra taps
        cost more the smaller its weight; that is what lets the validation
        signal separate the 7-tap candidate from the 15-tap superset.
        """
        base = dict(candidates=(3, 7, 15), blocks=1, lr_c=0.03, weight_decay=1e-2, noise=1.0, warmup_epochs=5,
                    search_bn_mode="eval")
        base.update(overrides)
        return cls(**base)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["candidates"] = list(self.candidates)
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown search config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path):
        try:
            with open(path) as fh:
                return cls.from_dict(json.load(fh))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc

    def dumps(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# data


def planted_task(channels, kernel_size, n_examples, seq_len, noise, seed):
    """Inputs ~ N(0, 1) and targets from a frozen random depthwise convolution plus noise.

    Every tap has magnitude in [0.5, 1] and a random sign, so no narrower
    kernel explains the target; each channel's kernel has unit norm, so the
    clean target has unit variance. Returns ``(x, y, kernel)`` with ``x, y``
    of shape ``[n, T, C]``.
    """
    rng = np.random.default_rng([seed, 7919])
    kernel = rng.uniform(0.5, 1.0, (kernel_size, channels)) * rng.choice([-1.0, 1.0], (kernel_size, channels))
    kernel /= np.linalg.norm(kernel, axis=0, keepdims=True)
    x = rng.standard_normal((n_examples, seq_len, channels))
    clean = T.depthwise_conv1d(Tensor(x), Tensor(kernel)).data
    return x, clean + noise * rng.standard_normal(clean.shape), kernel


@dataclass
class DataSplit:
    """Disjoint ``train1``, ``train2`` and ``val`` sets, each an ``(x, y)`` pair of arrays."""

    train1: tuple
    train2: tuple
    val: tuple
    indices: tuple = field(default=None, repr=False)

    def __post_init__(self):
        n1, n2 = len(self.train1[0]), len(self.train2[0])
        if abs(n1 - n2) > 1:
            raise ContractError(f"train1 and train2 must be split equally, got {n1} and {n2}")
        for name in ("train1", "train2", "val"):
            x, y = getattr(self, name)
            if x.shape[:2] != y.shape[:2]:
                raise ContractError(f"{name}: inputs {x.shape} and targets {y.shape} disagree")
        if self.indices is not None:
            i1, i2, iv = (set(map(int, i)) for i in self.indices)
            if i1 & i2 or i1 & iv or i2 & iv:
                raise ContractError("data splits overlap")

    @classmethod
    def split(cls, x, y, n_val, seed=0):
        """Random disjoint split: ``n_val`` validation examples, the rest halved."""
        n = len(x)
        if not 0 < n_val <= n - 2:
            raise ContractError(f"cannot hold out {n_val} of {n} examples and still split the rest")
        perm = np.random.default_rng([seed, 104729]).permutation(n)
        iv, rest = perm[:n_val], perm[n_val:]
        half = (len(rest) + 1) // 2
        i1, i2 = rest[:half], rest[half:]
        return cls((x[i1], y[i1]), (x[i2], y[i2]), (x[iv], y[iv]), (i1, i2, iv))

    @property
    def train(self):
        """Both training halves together."""
        return (np.concatenate([self.train1[0], self.train2[0]]),
                np.concatenate([self.train1[1], self.train2[1]]))


def make_data(config):
    x, y, _ = planted_task(config.channels, config.planted_kernel, config.n_train + config.n_val,
                           config.seq_len, config.noise, config.seed)
    return DataSplit.split(x, y, config.n_val, config.seed)


def _batch(data, idx):
    return Tensor(data[0][idx]), Tensor(data[1][idx])


def _draw(rng, n, size):
    return np.sort(rng.choice(n, size=min(size, n), replace=False))


# ---------------------------------------------------------------------------
# model and state


@dataclass
class SearchModel:
    """Stack of depthwise mixed-convolution blocks (no pointwise gating).

    Block ``j`` maps ``x`` to ``BN_post(trunk(x) + sum_i alpha_ji * BN_i(conv_i(x)))``.
    """

    blocks: list
    train_trunk: bool = False
    branch_affine: bool = True

    @classmethod
    def init(cls, channels, kernel_sizes, blocks, rng, train_trunk=False, branch_affine=True, alphas=None):
        mods = []
        for j in range(blocks):
            sizes = kernel_sizes[j] if isinstance(kernel_sizes[0], (list, tuple)) else kernel_sizes
            alpha = None if alphas is None else alphas[j]
            m = NSRConv.init(channels, sizes, rng, np.float64, alpha=alpha, gating=False)
            if not train_trunk:
                # a frozen zero trunk contributes nothing, so the branches carry the whole fit
                m.trunk_kernel = T.param(np.zeros_like(m.trunk_kernel.data))
            m.train_trunk = train_trunk
            mods.append(m)
        return cls(mods, train_trunk, branch_affine)

    def forward(self, x, alphas=None, mode="eval"):
        for j, m in enumerate(self.blocks):
            x = nsr_forward_train(x, m, mode, None if alphas is None else alphas[j])
        return x

    def parameters(self):
        p = {}
        for j, m in enumerate(self.blocks):
            for name, t in m.parameters(f"block{j}.").items():
                if not self.branch_affine and ".branch" in name and ".bn." in name:
                    continue
                p[name] = t
        return p

    def buffers(self):
        """BN running statistics by name (the live arrays)."""
        out = {}
        for j, m in enumerate(self.blocks):
            bns = [("trunk.bn.", m.trunk_bn), ("post_bn.", m.post_bn)]
            bns += [(f"branch{i}.bn.", br.bn) for i, br in enumerate(m.branches)]
            for pre, bn in bns:
                out[f"block{j}.{pre}running_mean"] = bn.running_mean
                out[f"block{j}.{pre}running_var"] = bn.running_var
        return out

    def snapshot(self):
        w = {k: t.data.copy() for k, t in self.parameters().items()}
        w.update({k: a.copy() for k, a in self.buffers().items()})
        return w

    def restore(self, snap):
        params, bufs = self.parameters(), self.buffers()
        for k, v in snap.items():
            if k in params:
                params[k].data = np.array(v, dtype=np.float64)
            elif k in bufs:
                bufs[k][...] = v
            else:
                raise CheckpointError(f"unexpected tensor {k!r} in model snapshot")

    def to_tensors(self):
        d = {"meta.kind": np.array(MODEL_KIND)}
        for j, m in enumerate(self.blocks):
            d.update(m.to_tensors(f"block{j}."))
        return d


def _mse(pred, y):
    d = pred - y
    return T.mean(d * d)


@dataclass
class SearchState:
    """Logits, weights, optimizer state and the best-checkpoint ring of one search run."""

    c: np.ndarray
    model: SearchModel
    xi: float = 0.0
    momentum_buf: dict = field(default_factory=dict)
    adam_m: np.ndarray = None
    adam_v: np.ndarray = None
    adam_t: int = 0
    step: int = 0
    epoch: int = 0
    ring: list = field(default_factory=list)  # (val_loss, epoch, snapshot, c), best first
    history: list = field(default_factory=list)

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=np.float64)
        if self.xi < 0:
            raise ContractError(f"xi must be non-negative, got {self.xi}")
        if self.c.shape != (len(self.model.blocks), len(self.model.blocks[0].branches)):
            raise ContractError(f"logits of shape {self.c.shape} do not match the model")
        if self.adam_m is None:
            self.adam_m = np.zeros_like(self.c)
            self.adam_v = np.zeros_like(self.c)

    @property
    def alpha(self):
        return softmax_rows(self.c)

    def alphas(self):
        """Fixed (non-trainable) per-block weights as Tensors."""
        return [Tensor(a) for a in self.alpha]


def softmax_rows(c):
    z = np.exp(c - c.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def init_state(config, rng=None):
    rng = np.random.default_rng([config.seed, 1]) if rng is None else rng
    space = config.space
    model = SearchModel.init(config.channels, space.candidates, space.blocks, rng, config.train_trunk,
                             config.search_bn_affine)
    return SearchState(np.zeros((space.blocks, space.size)), model, config.xi)


# ---------------------------------------------------------------------------
# forward pieces and gradients


def mixed_op_forward(g, block, state, mode="eval"):
    """``trunk(g) + sum_i softmax(c_block)_i * C_i(g)`` with gradients reaching ``c``.

    ``state.c`` may be a numpy array or a Tensor; the mixed output is taken
    before the module's post BN.
    """
    from .nsr import mixed_conv

    c = state.c if isinstance(state.c, Tensor) else Tensor(state.c)
    alpha = T.getitem(T.softmax(c, axis=-1), block)
    return mixed_conv(g, state.model.blocks[block], alpha, mode)


def _loss_and_grads(state, batch, mode, wrt_c, wrt_w):
    """Loss on ``batch`` with tape gradients for ``c`` and/or the weights."""
    x, y = batch
    params = state.model.parameters() if wrt_w else {}
    for p in params.values():
        p.requires_grad, p.grad = True, None
    c = Tensor(state.c, requires_grad=wrt_c)
    with Tape() as tape:
        a = T.softmax(c, axis=-1)
        alphas = [T.getitem(a, j) for j in range(len(state.model.blocks))]
        loss = _mse(state.model.forward(x, alphas, mode), y)
    tape.backward(loss)
    gc = c.grad if wrt_c else None
    gw = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
    for p in params.values():
        p.requires_grad, p.grad = False, None
    return float(loss.data), gc, gw


def loss_value(state, data, mode="eval", alphas=None):
    x, y = data
    pred = state.model.forward(Tensor(x), state.alphas() if alphas is None else alphas, mode)
    return float(_mse(pred, Tensor(y)).data)


def _aux_mode(config_mode):
    # auxiliary evaluations must not disturb the BN running statistics
    return "batch" if config_mode == "train" else "eval"


def arch_gradient(state, batch1, batch2, lr_w, bn_mode="train"):
    """Gradient of ``L_train2(w - xi * grad_w L_train1(w, c), c)`` with respect to ``c``.

    ``xi = 0`` gives the plain tape gradient at ``w``. For ``xi > 0`` the
    mixed second-order term is the symmetric finite-difference
    Hessian-vector product around ``w`` with step ``0.01 / |grad_w' L_train2|``.
    Returns ``(grad_c, L_train2)``.
    """
    mode = _aux_mode(bn_mode)
    xi = state.xi
    if xi == 0:
        loss2, gc, _ = _loss_and_grads(state, batch2, mode, True, False)
        return gc, loss2
    params = state.model.parameters()
    w0 = {k: p.data.copy() for k, p in params.items()}
    _, _, g1 = _loss_and_grads(state, batch1, mode, False, True)
    for k, p in params.items():
        p.data = w0[k] - xi * g1[k]
    loss2, gc, gw2 = _loss_and_grads(state, batch2, mode, True, True)
    norm = float(np.sqrt(sum(np.sum(g * g) for g in gw2.values())))
    if norm == 0.0:
        log.warning("zero-norm unrolled gradient; skipping the second-order term")
        for k, p in params.items():
            p.data = w0[k]
        return gc, loss2
    eps = 0.01 / norm
    grads = []
    for sign in (1.0, -1.0):
        for k, p in params.items():
            p.data = w0[k] + sign * eps * gw2[k]
        grads.append(_loss_and_grads(state, batch1, mode, True, False)[1])
    for k, p in params.items():
        p.data = w0[k]
    hvp = (grads[0] - grads[1]) / (2 * eps)
    return gc - xi * hvp, loss2


def _sgd(state, grads, lr, momentum, weight_decay=0.0):
    params = state.model.parameters()
    for k, g in grads.items():
        if weight_decay:
            g = g + weight_decay * params[k].data
        buf = state.momentum_buf.get(k)
        buf = g.copy() if buf is None else momentum * buf + g
        state.momentum_buf[k] = buf
        params[k].data = params[k].data - lr * buf


def _adam(state, grad, lr, betas, eps):
    b1, b2 = betas
    state.adam_t += 1
    state.adam_m = b1 * state.adam_m + (1 - b1) * grad
    state.adam_v = b2 * state.adam_v + (1 - b2) * grad * grad
    m_hat = state.adam_m / (1 - b1 ** state.adam_t)
    v_hat = state.adam_v / (1 - b2 ** state.adam_t)
    state.c = state.c - lr * m_hat / (np.sqrt(v_hat) + eps)


def weight_step(state, batch, lr, momentum, bn_mode="train", weight_decay=0.0):
    """One SGD-with-momentum step on the weights; ``c`` is read, never written."""
    loss, _, gw = _loss_and_grads(state, batch, bn_mode, False, True)
    _sgd(state, gw, lr, momentum, weight_decay)
    return loss


def bilevel_step(state, batch1, batch2, config):
    """Architecture update on ``batch2`` (through the unrolled weights), then weight update on ``batch1``."""
    if state.xi < 0:
        raise ContractError(f"xi must be non-negative, got {state.xi}")
    gc, loss2 = arch_gradient(state, batch1, batch2, config.lr_w, config.search_bn_mode)
    _adam(state, gc, config.lr_c, config.adam_betas, config.adam_eps)
    loss1 = weight_step(state, batch1, config.lr_w, config.momentum, config.search_bn_mode, config.weight_decay)
    state.step += 1
    return state, loss1, loss2


def warmup(state, train1, epochs, config, seed=0):
    """Weight-only epochs over ``train1`` in shuffled minibatches; ``c`` is untouched."""
    if epochs < 0:
        raise ContractError("epochs must be non-negative")
    n = len(train1[0])
    if n == 0:
        raise ContractError("warm-up needs a non-empty train1 set")
    for epoch in range(epochs):
        perm = np.random.default_rng([seed, 2, epoch]).permutation(n)
        for start in range(0, n, config.batch_size):
            idx = np.sort(perm[start:start + config.batch_size])
            loss = weight_step(state, _batch(train1, idx), config.lr_w, config.momentum, config.search_bn_mode,
                               config.weight_decay)
            state.history.append(("warmup", epoch, loss))
    return state


# ---------------------------------------------------------------------------
# checkpoint ring, averaging and cropping


def push_ring(state, val_loss, size):
    """Keep the ``size`` best (lowest validation loss) states; ties favour the earlier epoch."""
    state.ring.append((float(val_loss), state.epoch, state.model.snapshot(), state.c.copy()))
    state.ring.sort(key=lambda r: (r[0], r[1]))
    del state.ring[size:]


def average_checkpoints(ring):
    """Elementwise mean of weights (and BN statistics) and of logits over the ring.

    Accepts ring entries as stored by :func:`push_ring` or as ``(snapshot, c)``
    pairs. Returns ``(snapshot, c, alpha)``.
    """
    if not ring:
        raise ContractError("cannot average an empty checkpoint ring")
    pairs = [(r[-2], r[-1]) for r in ring]
    keys = pairs[0][0].keys()
    for snap, c in pairs[1:]:
        if snap.keys() != keys:
            raise ContractError("checkpoints hold different tensors")
        if np.shape(c) != np.shape(pairs[0][1]) or any(np.shape(snap[k]) != np.shape(pairs[0][0][k])
                                                        for k in keys):
            raise ContractError("checkpoint shapes differ")
    n = len(pairs)
    avg = {k: sum(np.asarray(s[k], dtype=np.float64) for s, _ in pairs) / n for k in keys}
    c = sum(np.asarray(c, dtype=np.float64) for _, c in pairs) / n
    return avg, c, softmax_rows(np.atleast_2d(c))


def crop_and_resoftmax(c, candidates, rule="logit_sign"):
    """Per block, drop weak candidates and re-normalize the survivors.

    ``logit_sign`` drops candidates whose logit is negative;
    ``below_uniform`` drops those whose softmax weight is below ``1/K``. If
    nothing survives, the single largest logit is kept with weight 1.
    Returns a list of ``(kernel_sizes, alpha_prime)`` per block.
    """
    if rule not in CROP_RULES:
        raise ConfigError(f"crop rule must be one of {CROP_RULES}")
    c = np.atleast_2d(np.asarray(c, dtype=np.float64))
    if c.shape[1] != len(candidates):
        raise ContractError(f"{len(candidates)} candidates but logits of width {c.shape[1]}")
    out = []
    for row in c:
        if rule == "logit_sign":
            keep = row >= 0
        else:
            keep = softmax_rows(row) >= 1.0 / len(row)
        if not keep.any():
            keep = np.zeros_like(keep)
            keep[int(np.argmax(row))] = True
        idx = np.flatnonzero(keep)
        out.append(([candidates[i] for i in idx], softmax_rows(row[idx])))
    return out


def logits_for(retained_alpha, dropped=0, offset=3.0, dropped_logit=-1.0):
    """Logits whose crop keeps the first entries with exactly ``retained_alpha``.

    The retained logits are ``log(alpha) + offset`` (``offset`` makes them
    positive), followed by ``dropped`` negative logits.
    """
    a = np.asarray(retained_alpha, dtype=np.float64)
    kept = np.log(a) + offset
    if np.any(kept < 0):
        raise ContractError("offset too small to make every retained logit non-negative")
    return np.concatenate([kept, np.full(dropped, dropped_logit)])


# ---------------------------------------------------------------------------
# stage 2


def retrain(retained, channels, train, config, steps=None, seed=0):
    """Fresh model on the retained branches with frozen ``alpha'``, trained on ``train``.

    Returns the model; every block's ``alpha`` is exactly the given
    ``alpha'`` and stays so, which makes the result fuse-ready.
    """
    steps = config.retrain_steps if steps is None else steps
    n = len(train[0])
    if n == 0:
        raise ContractError("re-training needs a non-empty training set")
    rng = np.random.default_rng([seed, 3])
    sizes = [list(k) for k, _ in retained]
    alphas = [np.asarray(a, dtype=np.float64) for _, a in retained]
    model = SearchModel.init(channels, sizes, len(retained), rng, config.train_trunk, branch_affine=True,
                             alphas=alphas)
    buf = {}
    fixed = [Tensor(m.alpha) for m in model.blocks]
    draw = np.random.default_rng([seed, 4])
    for _ in range(steps):
        x, y = _batch(train, _draw(draw, n, config.batch_size))
        params = model.parameters()
        for p in params.values():
            p.requires_grad, p.grad = True, None
        with Tape() as tape:
            loss = _mse(model.forward(x, fixed, config.search_bn_mode), y)
        tape.backward(loss)
        for k, p in params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            buf[k] = g.copy() if k not in buf else config.momentum * buf[k] + g
            p.requires_grad, p.grad = False, None
            p.data = p.data - config.lr_w * buf[k]
    return model


def fuse_model(model):
    return [fuse(m) for m in model.blocks]


def fused_forward(x, fused_blocks):
    for f in fused_blocks:
        x = nsr_forward(x, f)
    return x


def mse_of(pred, y):
    return float(np.mean((pred - y) ** 2))


# ---------------------------------------------------------------------------
# full pipeline with resumable epoch checkpoints

LOG_NAME = "runlog.csv"
STATE_NAME = "search_state.lsf"
CONFIG_NAME = "config.json"
MODEL_NAME = "final.lsf"
FUSED_NAME = "final_fused.lsf"
MANIFEST_NAME = "manifest.json"


def _log_header(config):
    cols = ["step", "epoch", "L_train1", "L_train2", "L_val"]
    cols += [f"alpha_b{j}_k{k}" for j in range(config.blocks) for k in config.candidates]
    return cols


def _fmt(v):
    return repr(float(v))


def state_to_tensors(state):
    d = {"meta.kind": np.array(STATE_KIND), "state.c": state.c, "state.xi": np.array(state.xi),
         "state.step": np.array(float(state.step)), "state.epoch": np.array(float(state.epoch)),
         "adam.m": state.adam_m, "adam.v": state.adam_v, "adam.t": np.array(float(state.adam_t)),
         "ring.size": np.array(float(len(state.ring)))}
    d.update({"w." + k: v for k, v in state.model.snapshot().items()})
    d.update({"mom." + k: v for k, v in state.momentum_buf.items()})
    for r, (val, epoch, snap, c) in enumerate(state.ring):
        d[f"ring{r}.val"] = np.array(val)
        d[f"ring{r}.epoch"] = np.array(float(epoch))
        d[f"ring{r}.c"] = c
        d.update({f"ring{r}.w.{k}": v for k, v in snap.items()})
    return d


def state_from_tensors(d, config):
    if float(d.get("meta.kind", np.array(-1.0))) != STATE_KIND:
        raise CheckpointError("file does not hold a search state")
    checkpoint.require(d, ["state.c", "state.xi", "state.step", "state.epoch", "adam.m", "adam.v", "adam.t",
                           "ring.size"])
    state = init_state(config)
    if d["state.c"].shape != state.c.shape:
        raise CheckpointError(f"stored logits {d['state.c'].shape} do not match the configured space")
    names = list(state.model.snapshot())
    checkpoint.require(d, ["w." + k for k in names])
    state.model.restore({k: d["w." + k] for k in names})
    state.c = d["state.c"].copy()
    state.xi = float(d["state.xi"])
    state.step, state.epoch = int(d["state.step"]), int(d["state.epoch"])
    state.adam_m, state.adam_v, state.adam_t = d["adam.m"].copy(), d["adam.v"].copy(), int(d["adam.t"])
    state.momentum_buf = {k[4:]: v.copy() for k, v in d.items() if k.startswith("mom.")}
    for r in range(int(d["ring.size"])):
        pre = f"ring{r}."
        checkpoint.require(d, [pre + "val", pre + "epoch", pre + "c"] + [pre + "w." + k for k in names])
        snap = {k: d[pre + "w." + k].copy() for k in names}
        state.ring.append((float(d[pre + "val"]), int(d[pre + "epoch"]), snap, d[pre + "c"].copy()))
    return state


def _read_log(path, keep_steps):
    """Rows of an existing run log up to and including step ``keep_steps``."""
    if not os.path.exists(path):
        return []
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return [r for r in rows[1:] if r and int(r[0]) <= keep_steps]


def _write_csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    _atomic_write(path, buf.getvalue().encode())


def _atomic_write(path, data):
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


@dataclass
class SearchResult:
    state: SearchState
    retained: list
    model: SearchModel
    fused: list
    manifest: dict


def run_search(config, out_dir=None, resume=True, stop_after_epoch=None):
    """Warm-up, bilevel search, checkpoint averaging, crop, re-training and fusion.

    With ``out_dir`` the run writes a per-step CSV log, an epoch checkpoint
    it can resume from, the re-trained model in both forms and a JSON
    manifest of the retained branches. Every random draw is keyed on
    ``(seed, phase, epoch)``, so a resumed run reproduces an uninterrupted
    one exactly. ``stop_after_epoch`` ends the run early (as an interruption
    would) and returns None.
    """
    data = make_data(config)
    paths = {}
    rows = []
    state = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        paths = {n: os.path.join(out_dir, n) for n in (LOG_NAME, STATE_NAME, CONFIG_NAME, MODEL_NAME,
                                                        FUSED_NAME, MANIFEST_NAME)}
        if resume and os.path.exists(paths[STATE_NAME]):
            if os.path.exists(paths[CONFIG_NAME]):
                with open(paths[CONFIG_NAME]) as fh:
                    if fh.read() != config.dumps():
                        raise ConfigError(f"{out_dir} holds a run with a different configuration")
            state = state_from_tensors(checkpoint.load(paths[STATE_NAME]), config)
            rows = _read_log(paths[LOG_NAME], state.step)
            log.info("resuming from epoch %d (step %d)", state.epoch, state.step)
        _atomic_write(paths[CONFIG_NAME], config.dumps().encode())
    if state is None:
        state = init_state(config)
        warmup(state, data.train1, config.warmup_epochs, config, config.seed)
    n1, n2 = len(data.train1[0]), len(data.train2[0])
    for epoch in range(state.epoch, config.search_epochs):
        rng = np.random.default_rng([config.seed, 5, epoch])
        for _ in range(config.steps_per_epoch):
            b1 = _batch(data.train1, _draw(rng, n1, config.batch_size))
            b2 = _batch(data.train2, _draw(rng, n2, config.batch_size))
            _, l1, l2 = bilevel_step(state, b1, b2, config)
            lv = loss_value(state, data.val, _aux_mode(config.search_bn_mode))
            rows.append([state.step, epoch, _fmt(l1), _fmt(l2), _fmt(lv)] + [_fmt(a) for a in state.alpha.ravel()])
        state.epoch = epoch + 1
        push_ring(state, loss_value(state, data.val, "eval"), config.ring_size)
        if paths:
            checkpoint.save(paths[STATE_NAME], state_to_tensors(state))
            _write_csv(paths[LOG_NAME], _log_header(config), rows)
        if stop_after_epoch is not None and state.epoch >= stop_after_epoch:
            return None
    if paths:
        _write_csv(paths[LOG_NAME], _log_header(config), rows)

    if state.ring:
        _, c_avg, alpha_avg = average_checkpoints(state.ring)
    else:
        c_avg, alpha_avg = state.c.copy(), state.alpha
    retained = crop_and_resoftmax(c_avg, config.candidates, config.crop_rule)
    model = retrain(retained, config.channels, data.train, config, seed=config.seed)
    fused = fuse_model(model)
    xv, yv = data.val
    mse_multi = mse_of(model.forward(Tensor(xv), None, "eval").data, yv)
    mse_fused = mse_of(fused_forward(Tensor(xv), fused).data, yv)
    manifest = {
        "seed": config.seed,
        "candidates": list(config.candidates),
        "bilevel_steps": state.step,
        "search_alpha": [[float(a) for a in row] for row in alpha_avg],
        "blocks": [{"block": j, "kernels": [int(k) for k in ks], "alpha": [float(a) for a in al],
                    "top_kernel": int(config.candidates[int(np.argmax(alpha_avg[j]))])}
                   for j, (ks, al) in enumerate(retained)],
        "val_mse_multi_branch": mse_multi,
        "val_mse_fused": mse_fused,
    }
    if paths:
        checkpoint.save(paths[MODEL_NAME], model.to_tensors())
        fused_tensors = {"meta.kind": np.array(MODEL_KIND)}
        for j, f in enumerate(fused):
            fused_tensors.update(f.to_tensors(f"block{j}."))
        checkpoint.save(paths[FUSED_NAME], fused_tensors)
        _atomic_write(paths[MANIFEST_NAME], (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())
    return SearchResult(state, retained, model, fused, manifest)
