"""Compare the compiled and numpy depthwise convolution backends.

Usage: python3 benchmarks/bench_kernels.py [--repeats N] [--out FILE]

Times forward and backward passes of both backends on encoder-sized inputs,
interleaving the backends within every repeat, and prints a CSV with the
median time per backend and the speedup of the compiled path.
"""
import argparse
import csv
import os
import platform
import sys

import numpy as np

from hybrid_asr import __version__, kernels
from hybrid_asr.bench import MIN_REPEATS, median_mad, time_interleaved

# (frames, channels, taps, stride): NSR trunk at the two encoder rates, the
# stride-2 subsampling kernel and a short branch kernel
CASES = [(750, 256, 31, 1), (3000, 256, 31, 1), (3000, 256, 3, 2), (750, 256, 5, 1), (64, 16, 31, 1)]


def run(repeats, seed=0):
    if "cython" not in kernels.BACKENDS:
        raise SystemExit("compiled kernel is not built; run `pip install -e . --no-build-isolation`")
    rng = np.random.default_rng(seed)
    rows = []
    for t, c, k, stride in CASES:
        x = rng.standard_normal((t, c)).astype(np.float32)
        w = rng.standard_normal((k, c)).astype(np.float32)
        pad = k // 2
        t_out = (t - 1) // stride + 1
        g = rng.standard_normal((t_out, c)).astype(np.float32)
        impl = [kernels.BACKENDS[n] for n in ("cython", "numpy")]
        fwd = time_interleaved([lambda b=b: b.forward(x, w, pad, stride, t_out) for b in impl], repeats)
        bwd = time_interleaved([lambda b=b: b.backward(g, x, w, pad, stride) for b in impl], repeats)
        for op, (cy, py) in (("forward", fwd), ("backward", bwd)):
            mc, _ = median_mad(cy)
            mp, _ = median_mad(py)
            rows.append([op, t, c, k, stride, f"{mc:.6e}", f"{mp:.6e}", f"{mp / mc:.2f}"])
    return rows


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=MIN_REPEATS)
    parser.add_argument("--out")
    args = parser.parse_args(argv)
    rows = run(max(args.repeats, MIN_REPEATS))
    header = ["op", "frames", "channels", "taps", "stride", "cython_s", "numpy_s", "speedup"]
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    fh.write(f"# hybrid_asr {__version__} seed=0 dtype=f32 machine={platform.machine()} "
             f"python={platform.python_version()} cpus={os.cpu_count()}\n")
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    if args.out:
        fh.close()


if __name__ == "__main__":
    main()
