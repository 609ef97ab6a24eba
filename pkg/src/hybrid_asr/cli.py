"""``hybrid-asr`` command-line entry point.

Exit codes: 0 success, 1 a checked property failed, 2 usage or I/O error.
"""
import argparse
import json
import logging
import sys

import numpy as np

from . import __version__, bench, checkpoint, verify
from .encoder import EncoderConfig, encoder_from_tensors
from .errors import CheckpointError, ConfigError, ContractError
from .nsr import FUSED_FORM, fuse, module_from_tensors, nsr_forward, required_names
from .search import SearchConfig, run_search
from .tensor import Tensor

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
DTYPES = {"f32": np.float32, "f64": np.float64}
FUSE_TOL = {np.dtype(np.float32): 1e-5, np.dtype(np.float64): 1e-10}
PROBES = 10
PROBE_FRAMES = 64


def _seed(text):
    value = int(text)
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError(f"seed must be an unsigned 64-bit integer, got {text}")
    return value


def _float_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _load_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _emit_report(report, out):
    text = report.to_csv()
    sys.stdout.write(text)
    if out:
        with open(out, "w", newline="") as fh:
            fh.write(text)


def cmd_bench_attention(args):
    opts = {"lengths": [256, 512, 1024, 2048, 4096], "d_model": 256, "heads": 4}
    if args.config:
        extra = _load_json(args.config)
        unknown = set(extra) - set(opts)
        if unknown:
            raise ConfigError(f"unknown bench-attention keys: {sorted(unknown)}")
        opts.update(extra)
    if args.lengths is not None:
        opts["lengths"] = args.lengths
    if args.d_model is not None:
        opts["d_model"] = args.d_model
    if args.heads is not None:
        opts["heads"] = args.heads
    extra = {} if args.min_seconds is None else {"min_seconds": args.min_seconds}
    report = bench.bench_attention(opts["lengths"], opts["d_model"], opts["heads"], args.repeats, args.seed,
                                   DTYPES[args.dtype], **extra)
    _emit_report(report, args.out)
    return EXIT_OK


def cmd_bench_encoder(args):
    base = EncoderConfig.load(args.config) if args.config else None
    extra = {} if args.min_seconds is None else {"min_seconds": args.min_seconds}
    report = bench.bench_encoder(args.seconds, args.configs, args.repeats, args.seed, base, DTYPES[args.dtype],
                                 **extra)
    _emit_report(report, args.out)
    return EXIT_OK


def cmd_verify(args):
    results = verify.run(args.suite, args.seed, args.fault_inject)
    print(verify.format_report(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL


def cmd_search(args):
    if args.config:
        config = SearchConfig.load(args.config)
    else:
        config = SearchConfig.planted() if args.preset == "planted" else SearchConfig()
    if args.seed is not None:
        config = SearchConfig.from_dict({**config.to_dict(), "seed": args.seed})
    out = args.out or f"search-seed{config.seed}"
    result = run_search(config, out, resume=not args.fresh)
    m = result.manifest
    for b in m["blocks"]:
        kept = ", ".join(f"{k}:{a:.3f}" for k, a in zip(b["kernels"], b["alpha"]))
        print(f"block {b['block']}: top kernel {b['top_kernel']}; retained {kept}")
    print(f"bilevel steps {m['bilevel_steps']}; val MSE multi-branch {m['val_mse_multi_branch']:.6f}, "
          f"fused {m['val_mse_fused']:.6f}")
    print(f"artifacts written to {out}")
    return EXIT_OK


def _module_prefixes(d):
    return sorted(k[:-len("form")] for k in d if k.endswith("form") and (k == "form" or k.endswith(".form")))


def _probe_diff(before, after, prefixes, seed):
    rng = np.random.default_rng(seed)
    worst = 0.0
    if float(before.get("meta.kind", np.array(-1.0))) == 2.0:
        enc_a, enc_b = encoder_from_tensors(before), encoder_from_tensors(after)
        for _ in range(PROBES):
            x = rng.standard_normal((PROBE_FRAMES, enc_a.config.input_dim)).astype(enc_a.dtype)
            worst = max(worst, float(np.max(np.abs(enc_a(x).data - enc_b(x).data))))
        return worst, enc_a.dtype
    dtype = None
    for p in prefixes:
        a, b = module_from_tensors(before, p), module_from_tensors(after, p)
        dtype = a.dtype
        for _ in range(PROBES):
            x = Tensor(rng.standard_normal((PROBE_FRAMES, a.channels)).astype(dtype))
            worst = max(worst, float(np.max(np.abs(nsr_forward(x, a).data - nsr_forward(x, b).data))))
    return worst, dtype


def cmd_fuse(args):
    d = checkpoint.load(args.input)
    prefixes = _module_prefixes(d)
    if not prefixes:
        raise CheckpointError(f"{args.input} holds no convolution modules")
    pending = [p for p in prefixes if float(d[p + "form"]) != FUSED_FORM]
    if not pending:
        print(f"{args.input} is already fused; nothing written")
        return EXIT_OK
    out = dict(d)
    for p in pending:
        module = module_from_tensors(d, p, "train")
        for name in required_names(d, p):
            out.pop(name, None)
        out.update(fuse(module).to_tensors(p))
    worst, dtype = _probe_diff(d, out, pending, args.seed)
    tol = FUSE_TOL[np.dtype(dtype)]
    print(f"fused {len(pending)} module(s); max abs forward difference over {PROBES} probes: "
          f"{worst:.3e} (tolerance {tol:.0e})")
    if not worst <= tol:
        print("fused forward disagrees with the training form; nothing written", file=sys.stderr)
        return EXIT_FAIL
    checkpoint.save(args.output, out)
    print(f"wrote {args.output}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="hybrid-asr", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def timing(p):
        p.add_argument("--repeats", type=int, default=bench.MIN_REPEATS, help="timed repeats (>= 5)")
        p.add_argument("--dtype", choices=sorted(DTYPES), default="f32")
        p.add_argument("--seed", type=_seed, default=0)
        p.add_argument("--out", help="also write the CSV report here")
        p.add_argument("--config", help="JSON file with defaults")
        p.add_argument("--min-seconds", type=float, default=None,
                       help="add repeats until each length's timed rounds fill this many seconds")

    p = sub.add_parser("bench-attention", help="time softmax vs linear attention over sequence lengths")
    timing(p)
    p.add_argument("--lengths", type=_int_list, help="comma-separated sequence lengths")
    p.add_argument("--d-model", type=int)
    p.add_argument("--heads", type=int)
    p.set_defaults(func=cmd_bench_attention)

    p = sub.add_parser("bench-encoder", help="time the hybrid encoder against the all-softmax encoder")
    timing(p)
    p.add_argument("--seconds", type=_float_list, default=[2.4, 7.5, 15, 30], help="audio lengths in seconds")
    p.add_argument("--configs", type=lambda s: s.split(","), default=["hybrid", "all_sa"])
    p.set_defaults(func=cmd_bench_encoder)

    p = sub.add_parser("verify", help="run the property suites")
    p.add_argument("--suite", choices=verify.SUITES + ("all",), default="all")
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--fault-inject", action="store_true", help="corrupt fused kernels (negative control)")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("search", help="run the bilevel branch search on the planted task")
    p.add_argument("--config", help="search configuration JSON")
    p.add_argument("--preset", choices=("planted", "default"), default="planted")
    p.add_argument("--seed", type=_seed)
    p.add_argument("--out", help="run directory (default search-seed<seed>)")
    p.add_argument("--fresh", action="store_true", help="ignore an existing epoch checkpoint")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("fuse", help="convert a training-form checkpoint to the fused form")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--seed", type=_seed, default=0, help="seed of the random probes")
    p.set_defaults(func=cmd_fuse)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (OSError, ConfigError, ContractError) as exc:
        print(f"hybrid-asr: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
