"""Wall-clock benchmarks for the attention operators and full encoders."""
import csv
import io
import os
import platform
import time
from dataclasses import dataclass, field

import numpy as np

from . import __version__, kernels
from .attention import AttentionLayer, la_forward, sa_forward
from .encoder import Encoder, EncoderConfig
from .errors import ContractError
from .tensor import Tensor

WARMUP = 3
MIN_REPEATS = 5
MAX_REPEATS = 200
HOP_MS = 10
# reference point only: relative speedup at 30 s of audio reported on a data-centre GPU
REFERENCE_SPEEDUP_30S = 0.18


@dataclass
class BenchRow:
    name: str
    length: int
    median_s: float
    mad_s: float
    repeats: int
    seed: int
    note: str = ""


@dataclass
class BenchReport:
    rows: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    seed: int = 0
    dtype: str = "f32"

    def to_csv(self):
        buf = io.StringIO()
        buf.write(f"# hybrid_asr {__version__} seed={self.seed} dtype={self.dtype} "
                  f"kernels={kernels.BACKEND} machine={platform.machine()} "
                  f"python={platform.python_version()} cpus={os.cpu_count()}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["name", "length", "median_s", "mad_s", "repeats", "seed", "note"])
        for r in self.rows:
            w.writerow([r.name, r.length, f"{r.median_s:.6e}", f"{r.mad_s:.6e}", r.repeats, r.seed, r.note])
        for key, value in self.summary.items():
            w.writerow([key, "", f"{value:.6f}" if isinstance(value, float) else value, "", "", self.seed, ""])
        return buf.getvalue()


def _check_repeats(repeats):
    if repeats < MIN_REPEATS:
        raise ContractError(f"at least {MIN_REPEATS} timed repeats are required, got {repeats}")


def time_interleaved(fns, repeats, warmup=WARMUP, min_seconds=0.0, max_repeats=MAX_REPEATS):
    """Time several callables in alternating order; returns per-callable sample lists.

    Alternation exposes every candidate to the same background load, which
    matters for the relative comparisons made here. ``repeats`` is a floor:
    when one round is cheap, rounds are added until the timed rounds fill
    about ``min_seconds`` (at most ``max_repeats`` rounds), estimated from
    the warm-up.
    """
    _check_repeats(repeats)
    t0 = time.perf_counter()
    for _ in range(warmup):
        for fn in fns:
            fn()
    if min_seconds > 0 and warmup > 0:
        per_round = (time.perf_counter() - t0) / warmup
        repeats = max(repeats, min(max_repeats, int(np.ceil(min_seconds / max(per_round, 1e-9)))))
    samples = [[] for _ in fns]
    order = list(range(len(fns)))
    for r in range(repeats):
        seq = order if r % 2 == 0 else order[::-1]
        for i in seq:
            t0 = time.perf_counter()
            fns[i]()
            samples[i].append(time.perf_counter() - t0)
    return samples


def median_mad(samples):
    """Median and median absolute deviation of timing samples."""
    s = np.asarray(samples)
    med = float(np.median(s))
    return med, float(np.median(np.abs(s - med)))


def loglog_slope(lengths, times):
    """Least-squares slope of log(time) against log(length)."""
    return float(np.polyfit(np.log(lengths), np.log(times), 1)[0])


def bench_attention(lengths, d_model=256, heads=4, repeats=MIN_REPEATS, seed=0, dtype=np.float32,
                    memory_budget=2 * 1024 ** 3, min_seconds=1.0):
    """Time sa_forward and la_forward at each sequence length."""
    lengths = list(lengths)
    if not lengths:
        raise ContractError("no sequence lengths given")
    _check_repeats(repeats)
    rng = np.random.default_rng(seed)
    sa = AttentionLayer.init(d_model, heads, "SA", rng, dtype)
    la = AttentionLayer.init(d_model, heads, "LA", rng, dtype)
    report = BenchReport(seed=seed, dtype="f64" if dtype == np.float64 else "f32")
    itemsize = np.dtype(dtype).itemsize
    timed = {"sa_forward": [], "la_forward": []}
    for n in lengths:
        x = Tensor(rng.standard_normal((n, d_model)).astype(dtype))
        # score matrix plus two softmax temporaries
        if 3 * heads * n * n * itemsize > memory_budget:
            report.rows.append(BenchRow("sa_forward", n, float("nan"), float("nan"), 0, seed,
                                        "skipped: score matrix exceeds memory budget"))
            fns = [lambda: la_forward(x, la)]
            names = ["la_forward"]
        else:
            fns = [lambda: sa_forward(x, sa), lambda: la_forward(x, la)]
            names = ["sa_forward", "la_forward"]
        for name, samples in zip(names, time_interleaved(fns, repeats, min_seconds=min_seconds)):
            med, mad = median_mad(samples)
            report.rows.append(BenchRow(name, n, med, mad, len(samples), seed))
            timed[name].append((n, med))
    for name, pts in timed.items():
        if len(pts) >= 2:
            ns, ts = zip(*pts)
            report.summary[f"slope_{name}"] = loglog_slope(ns, ts)
    return report


def audio_frames(seconds, hop_ms=HOP_MS):
    return int(round(seconds * 1000 / hop_ms))


def bench_encoder(audio_seconds=(2.4, 7.5, 15, 30), configs=("hybrid", "all_sa"), repeats=MIN_REPEATS,
                  seed=0, base_config=None, dtype=np.float32, min_seconds=3.0):
    """Time fused encoders that differ only in attention assignment.

    Reports ``speedup = (t_all_sa - t_hybrid) / t_all_sa`` per length as the
    median over interleaved repeat pairs; both timings of a pair see the same
    background load, so the paired ratio is far less noisy than a ratio of
    medians.
    """
    configs = list(configs)
    if len(set(configs)) != len(configs):
        raise ContractError(f"duplicate encoder configurations: {configs}")
    if len(configs) != 2 or "hybrid" not in configs or "all_sa" not in configs:
        raise ContractError("bench_encoder compares exactly the 'hybrid' and 'all_sa' configurations")
    _check_repeats(repeats)
    base = base_config or EncoderConfig()
    encoders = {}
    for name in configs:
        cfg = EncoderConfig.from_dict({**base.to_dict(), "attention": name})
        # identical weights for both; only the attention operator differs
        encoders[name] = Encoder.init(cfg, np.random.default_rng(seed), dtype).fused()
    report = BenchReport(seed=seed, dtype="f64" if dtype == np.float64 else "f32")
    rng = np.random.default_rng(seed + 1)
    for sec in audio_seconds:
        n = audio_frames(sec)
        x = Tensor(rng.standard_normal((n, base.input_dim)).astype(dtype))
        samples = time_interleaved([lambda e=encoders[c]: e(x) for c in configs], repeats, min_seconds=min_seconds)
        by_name = dict(zip(configs, samples))
        for name in configs:
            m, mad = median_mad(by_name[name])
            report.rows.append(BenchRow(f"encoder_{name}", n, m, mad, len(by_name[name]), seed, f"{sec:g}s"))
        t_sa, t_hy = np.asarray(by_name["all_sa"]), np.asarray(by_name["hybrid"])
        report.summary[f"speedup_{sec:g}s"] = float(np.median((t_sa - t_hy) / t_sa))
    report.summary["reference_speedup_30s"] = REFERENCE_SPEEDUP_30S
    return report


def speedups(report):
    """Speedup values of an encoder report, ordered as benchmarked."""
    return [v for k, v in report.summary.items() if k.startswith("speedup_")]
