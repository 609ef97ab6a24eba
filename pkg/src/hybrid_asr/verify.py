"""Property suites run by ``hybrid-asr verify``.

Each property reports the worst error it observed next to its tolerance.
Suites: ``gradients`` (finite-difference checks), ``fusion`` (train vs
fused forms) and ``invariances`` (oracles and structural properties).
"""
import time
from dataclasses import dataclass

import numpy as np

from . import checkpoint, kernels
from . import tensor as T
from .attention import AttentionLayer, RoPEConfig, attention_weight, la_forward, rope_matrix, sa_forward
from .encoder import Encoder, EncoderConfig
from .gradcheck import check_gradients, directional_errors
from .nsr import NSRConv, fold_bn, forward_flops, fuse, nsr_forward_fused, nsr_forward_train
from .search import SearchConfig, arch_gradient, crop_and_resoftmax, init_state, make_data, mixed_op_forward
from .tensor import Tape, Tensor

SUITES = ("gradients", "fusion", "invariances")


@dataclass
class PropertyResult:
    suite: str
    name: str
    worst: float
    tol: float
    seconds: float = 0.0

    @property
    def passed(self):
        return bool(np.isfinite(self.worst)) and self.worst <= self.tol


class _Recorder:
    def __init__(self, suite):
        self.suite = suite
        self.results = []

    def check(self, name, tol, fn):
        t0 = time.perf_counter()
        worst = float(fn())
        self.results.append(PropertyResult(self.suite, name, worst, tol, time.perf_counter() - t0))


def _corrupting_fuse(module, alpha=None):
    f = fuse(module, alpha)
    f.kernel = Tensor(f.kernel.data + np.asarray(1e-3, f.kernel.dtype))
    return f


# ---------------------------------------------------------------------------
# gradients


_UNARY = {
    "exp": T.exp, "sigmoid": T.sigmoid, "tanh": T.tanh, "swish": T.swish, "elu": T.elu,
    "elu_plus_one": T.elu_plus_one, "softmax": lambda x: T.softmax(x, axis=-1), "glu": T.glu,
    "sum": lambda x: T.sum_(x, axis=0), "mean": lambda x: T.mean(x, axis=1),
    "transpose": lambda x: T.transpose(x, (1, 0)), "reshape": lambda x: T.reshape(x, (-1,)),
    "getitem": lambda x: x[1:, ::2], "take": lambda x: T.take(x, [0, 0, 2], axis=0),
    "unfold1d": lambda x: T.unfold1d(x, 3, stride=2),
}


def suite_gradients(seed=0, trials=5):
    rec = _Recorder("gradients")
    rng = np.random.default_rng(seed)

    def unary(fn, positive=False):
        def run():
            worst = 0.0
            for _ in range(trials):
                x = rng.standard_normal((5, 6))
                x = np.abs(x) + 0.5 if positive else x
                worst = max(worst, check_gradients(fn, [x], seed=int(rng.integers(1 << 30))))
            return worst
        return run

    for name, fn in _UNARY.items():
        rec.check(f"op {name}", 1e-4, unary(fn))
    rec.check("op log", 1e-4, unary(T.log, positive=True))
    rec.check("op sqrt", 1e-4, unary(T.sqrt, positive=True))

    def binary(fn, shape_b):
        def run():
            return max(check_gradients(fn, [rng.standard_normal((4, 6)), rng.standard_normal(shape_b)])
                       for _ in range(trials))
        return run

    rec.check("op add (broadcast)", 1e-4, binary(lambda a, b: a + b, (6,)))
    rec.check("op mul (broadcast)", 1e-4, binary(lambda a, b: a * b, (1, 6)))
    rec.check("op div", 1e-4, binary(lambda a, b: a / (b * b + 1.0), (4, 6)))
    rec.check("op matmul", 1e-4, binary(lambda a, b: T.matmul(a, b), (6, 3)))
    rec.check("op linear", 1e-4, binary(lambda a, w: T.linear(a, w), (3, 6)))
    rec.check("op layer_norm", 1e-4, lambda: max(check_gradients(
        lambda x, g, b: T.layer_norm(x, g, b), [rng.standard_normal((4, 6)), rng.standard_normal(6),
                                                rng.standard_normal(6)]) for _ in range(trials)))
    for mode in ("train", "eval"):
        rec.check(f"op batchnorm ({mode})", 1e-4, lambda mode=mode: max(check_gradients(
            lambda x, g, b: T.batchnorm(x, g, b, np.zeros(6), np.full(6, 1.5), 1e-5, mode),
            [rng.standard_normal((7, 6)), rng.standard_normal(6), rng.standard_normal(6)])
            for _ in range(trials)))
    for stride in (1, 2):
        rec.check(f"op depthwise_conv1d (stride {stride})", 1e-4, lambda stride=stride: max(check_gradients(
            lambda x, k, b: T.depthwise_conv1d(x, k, b, stride=stride),
            [rng.standard_normal((9, 3)), rng.standard_normal((4, 3)), rng.standard_normal(3)])
            for _ in range(trials)))
    cfg = RoPEConfig(6)
    rec.check("op rope_rotate", 1e-4, unary(lambda x: T.rope_rotate(x, *cfg.angles(5, 3))))

    for variant, fwd in (("SA", sa_forward), ("LA", la_forward)):
        def attn(variant=variant, fwd=fwd):
            base = AttentionLayer.init(8, 2, variant, rng, np.float64)

            def fn(x, wq, wk, wv):
                return fwd(x, AttentionLayer(wq, wk, wv, base.w_o, heads=2, variant=variant))
            return max(check_gradients(fn, [rng.standard_normal((n, 8))] +
                                       [w.data.copy() for w in (base.w_q, base.w_k, base.w_v)])
                       for n in (2, 4, 8))
        rec.check(f"{variant} attention (input, q/k/v weights)", 1e-4, attn)

    def nsr():
        m = NSRConv.random(3, (0, 2, 5), rng)
        return check_gradients(lambda x: nsr_forward_train(x, m), [rng.standard_normal((10, 3))])
    rec.check("NSR module (input)", 1e-4, nsr)

    def logits():
        state = init_state(SearchConfig(candidates=(0, 3, 5), blocks=1, channels=2, train_trunk=True), rng)
        g = rng.standard_normal((9, 2))

        def fn(c):
            state.c = c
            return mixed_op_forward(Tensor(g), 0, state)
        return check_gradients(fn, [rng.standard_normal((1, 3))])
    rec.check("mixed op (logits)", 1e-4, logits)

    def encoder():
        cfg = EncoderConfig(input_dim=8, d_model=16, heads=2, ffn_dim=32, num_blocks=2, downsample_after=1,
                            upsample_before=2)
        enc = Encoder.init(cfg, rng, np.float64, random_stats=True)
        x = Tensor(rng.standard_normal((13, 8)))
        proj = Tensor(rng.standard_normal((4, 16)))
        errs = directional_errors(lambda: (enc(x) * proj).sum(), enc.parameters(), seed=seed)
        worst_input = check_gradients(lambda t: enc(t), [x.data])
        return max(max(errs.values()), worst_input)
    rec.check("2-block encoder (all parameters, input)", 1e-3, encoder)
    return rec.results


# ---------------------------------------------------------------------------
# fusion


def suite_fusion(seed=0, fault_inject=False, encoder_inputs=20):
    rec = _Recorder("fusion")
    fuse_fn = _corrupting_fuse if fault_inject else fuse
    for dtype, tol in ((np.float32, 1e-5), (np.float64, 1e-10)):
        def grid(dtype=dtype):
            worst = 0.0
            for C in (2, 4, 8):
                for T_ in (8, 32, 128):
                    for s in range(20):
                        r = np.random.default_rng([seed, C, T_, s])
                        sizes = [int(k) for k in r.choice(31, size=int(r.integers(0, 7)), replace=False)]
                        m = NSRConv.random(C, sizes, r, dtype)
                        x = Tensor(r.standard_normal((T_, C)).astype(dtype))
                        diff = nsr_forward_train(x, m).data - nsr_forward_fused(x, fuse_fn(m)).data
                        worst = max(worst, float(np.max(np.abs(diff))))
            return worst
        rec.check(f"NSR train vs fused ({np.dtype(dtype).name}, 180 modules)", tol, grid)

    def fold():
        r = np.random.default_rng([seed, 1])
        worst = 0.0
        for k in (1, 4, 7, 30):
            m = NSRConv.random(5, (k,), r)
            br = m.branches[0]
            x = Tensor(r.standard_normal((20, 5)))
            kern, bias = fold_bn(br.kernel.data, br.bias.data, br.bn)
            a = br.forward(x).data
            b = T.depthwise_conv1d(x, Tensor(kern), Tensor(bias)).data
            worst = max(worst, float(np.max(np.abs(a - b))))
        return worst
    rec.check("fold_bn then conv == conv then eval BN (float64)", 1e-10, fold)

    def flops():
        r = np.random.default_rng([seed, 2])
        trunk = forward_flops(fuse(NSRConv.random(8, (), r)), 100)
        return max(abs(forward_flops(fuse_fn(NSRConv.random(8, sizes, r)), 100) - trunk)
                   for sizes in ((3,), (5, 4, 3, 7), tuple(range(1, 31))))
    rec.check("fused FLOPs == trunk-only FLOPs", 0, flops)

    def encoder():
        enc = Encoder.init(EncoderConfig(), np.random.default_rng([seed, 3]), np.float32, random_stats=True)
        fused = enc.fused()
        if fault_inject:
            for b in fused.blocks:
                b.conv.kernel = Tensor(b.conv.kernel.data + np.float32(1e-3))
        r = np.random.default_rng([seed, 4])
        worst = 0.0
        for T_ in (64, 256, 1024):
            for _ in range(encoder_inputs):
                x = r.standard_normal((T_, 80)).astype(np.float32)
                worst = max(worst, float(np.max(np.abs(enc(x).data - fused(x).data))))
        return worst
    rec.check(f"12-block encoder train vs fused (float32, T=64/256/1024 x {encoder_inputs})", 1e-5, encoder)
    return rec.results


# ---------------------------------------------------------------------------
# invariances and oracles


def _phi_ref(x, kind):
    if kind == "elu":
        return np.where(x > 0, x + 1.0, np.exp(np.minimum(x, 0)))
    return np.maximum(x, 0) if kind == "relu" else np.exp(x)


def _attention_loop(x, layer, cfg):
    """Literal per-position evaluation of softmax or linear rotary attention."""
    wq, wk, wv, wo = (w.data for w in (layer.w_q, layer.w_k, layer.w_v, layer.w_o))
    N, hd = x.shape[0], layer.head_dim
    heads = []
    for h in range(layer.heads):
        r = slice(h * hd, (h + 1) * hd)
        out = np.zeros((N, hd))
        for m in range(N):
            Rm = rope_matrix(m, cfg)
            if layer.variant == "SA":
                q = Rm @ (wq[r] @ x[m])
                s = np.array([q @ (rope_matrix(n, cfg) @ (wk[r] @ x[n])) for n in range(N)]) / np.sqrt(hd)
                e = np.exp(s - s.max())
                out[m] = sum(e[n] / e.sum() * (wv[r] @ x[n]) for n in range(N))
            else:
                fq = _phi_ref(wq[r] @ x[m], layer.phi)
                num, den = np.zeros(hd), 0.0
                for n in range(N):
                    fk = _phi_ref(wk[r] @ x[n], layer.phi)
                    num += ((Rm @ fq) @ (rope_matrix(n, cfg) @ fk)) * (wv[r] @ x[n])
                    den += fq @ fk
                out[m] = num / (den + layer.eps)
        heads.append(out)
    return np.concatenate(heads, axis=1) @ wo.T


def suite_invariances(seed=0):
    rec = _Recorder("invariances")
    rng = np.random.default_rng(seed)
    cfg = RoPEConfig(4)

    for variant, fwd in (("SA", sa_forward), ("LA", la_forward)):
        def oracle(variant=variant, fwd=fwd):
            worst = 0.0
            for N in range(1, 9):
                layer = AttentionLayer.init(8, 2, variant, rng, np.float64)
                x = rng.standard_normal((N, 8))
                worst = max(worst, float(np.max(np.abs(fwd(Tensor(x), layer).data - _attention_loop(x, layer, cfg)))))
            return worst
        rec.check(f"{variant} forward vs literal double loop (N<=8)", 1e-10, oracle)

        def shift(variant=variant, fwd=fwd):
            layer = AttentionLayer.init(8, 2, variant, rng, np.float64)
            worst = 0.0
            for _ in range(50):
                x = Tensor(rng.standard_normal((int(rng.integers(1, 9)), 8)))
                s = int(rng.integers(0, 5000))
                worst = max(worst, float(np.max(np.abs(fwd(x, layer, offset=s).data - fwd(x, layer).data))))
            return worst
        rec.check(f"{variant} position-shift invariance (50 pairs)", 1e-10, shift)

    def dual():
        layer = AttentionLayer.init(8, 2, "SA", rng, np.float64)
        worst = 0.0
        for _ in range(50):
            xm, xn = rng.standard_normal(8), rng.standard_normal(8)
            m, n = (int(v) for v in rng.integers(0, 4096, 2))
            a = attention_weight(xm, xn, m, n, layer, route="rotated")
            b = attention_weight(xm, xn, m, n, layer, route="relative")
            worst = max(worst, float(np.max(np.abs(a - b))))
        return worst
    rec.check("rotated vs relative-position score", 1e-10, dual)

    def norm():
        worst = 0.0
        for _ in range(50):
            x = rng.standard_normal((6, 16))
            y = T.rope_rotate(Tensor(x), *RoPEConfig(16).angles(6, int(rng.integers(0, 10 ** 6)))).data
            worst = max(worst, float(np.max(np.abs(np.linalg.norm(y, axis=1) - np.linalg.norm(x, axis=1)))))
        return worst
    rec.check("rotation preserves norms", 1e-10, norm)

    def assignment():
        bad = 0
        for _ in range(200):
            n = int(rng.integers(2, 25))
            down = int(rng.integers(1, n))
            up = int(rng.integers(down + 1, n + 1))
            c = EncoderConfig(num_blocks=n, downsample_after=down, upsample_before=up)
            bad += sum((v == "SA") != (c.frame_ms(j) == c.squeezed_frame_ms)
                       for j, v in enumerate(c.variants(), start=1))
        return bad
    rec.check("attention variant follows frame rate (200 configs)", 0, assignment)

    def crop():
        worst = 0.0
        for _ in range(200):
            c = rng.standard_normal((3, 6)) * 3
            for rule in ("logit_sign", "below_uniform"):
                for kept, alpha in crop_and_resoftmax(c, list(range(6)), rule):
                    worst = max(worst, abs(alpha.sum() - 1.0) if kept else np.inf)
        return worst
    rec.check("crop keeps >= 1 branch, alpha' sums to 1", 1e-6, crop)

    def first_order():
        scfg = SearchConfig(candidates=(0, 3, 7), blocks=1, channels=2, n_train=8, n_val=2, seq_len=10)
        state = init_state(scfg)
        state.c = rng.standard_normal(state.c.shape)
        data = make_data(scfg)
        b1 = (Tensor(data.train1[0]), Tensor(data.train1[1]))
        b2 = (Tensor(data.train2[0]), Tensor(data.train2[1]))
        got, _ = arch_gradient(state, b1, b2, scfg.lr_w, "eval")
        c = Tensor(state.c, requires_grad=True)
        with Tape() as tape:
            d = state.model.forward(b2[0], [T.getitem(T.softmax(c, axis=-1), 0)], "eval") - b2[1]
            loss = T.mean(d * d)
        tape.backward(loss)
        return float(np.max(np.abs(got - c.grad)))
    rec.check("first-order architecture gradient == tape gradient", 0, first_order)

    def roundtrip():
        m = NSRConv.random(4, (3, 0, 8), rng, np.float32)
        back = checkpoint.loads(checkpoint.dumps(m.to_tensors()))
        ref = m.to_tensors()
        return sum(not (ref[k].dtype == back[k].dtype and np.array_equal(ref[k], back[k])) for k in ref)
    rec.check("checkpoint round trip is bit-identical", 0, roundtrip)

    def backends():
        if len(kernels.BACKENDS) < 2:
            return 0
        x = rng.standard_normal((40, 5)).astype(np.float32)
        w = rng.standard_normal((7, 5)).astype(np.float32)
        outs = [b.forward(x, w, 3, 1, 40) for b in kernels.BACKENDS.values()]
        return float(np.max(np.abs(outs[0] - outs[1])))
    rec.check("compiled and numpy conv kernels agree bit for bit", 0, backends)
    return rec.results


def run(suite="all", seed=0, fault_inject=False):
    if suite not in SUITES + ("all",):
        raise ValueError(f"unknown suite {suite!r}")
    chosen = SUITES if suite == "all" else (suite,)
    results = []
    for name in chosen:
        if name == "gradients":
            results += suite_gradients(seed)
        elif name == "fusion":
            results += suite_fusion(seed, fault_inject)
        else:
            results += suite_invariances(seed)
    return results


def format_report(results):
    width = max(len(r.name) for r in results)
    lines = []
    for r in results:
        mark = "PASS" if r.passed else "FAIL"
        lines.append(f"{mark}  {r.suite:<11}  {r.name:<{width}}  worst={r.worst:.3e}  tol={r.tol:.0e}  "
                     f"({r.seconds:.1f}s)")
    failed = sum(not r.passed for r in results)
    lines.append(f"{len(results) - failed}/{len(results)} properties passed")
    return "\n".join(lines)
