"""Benchmark the numba kernels against their pure-numpy twins.

Usage:
    python benchmarks/bench_kernels.py [--rows 4096] [--cols 64] [--vocab 512]
                                       [--repeat 30]

Times forward and backward of each hot kernel on C-contiguous float64 blocks
of the given size and prints per-call medians plus the numba speedup. The
numba functions are called once before timing so JIT compilation is not
measured.
"""

import argparse
import timeit

import numpy as np

from dualattn.kernels import numpy_ops

try:
    from dualattn.kernels import numba_ops
except ImportError:
    numba_ops = None


def build_cases(rows, cols, vocab, rng):
    x = np.ascontiguousarray(rng.standard_normal((rows, cols)))
    y = numpy_ops.softmax_fwd(x)
    dy = np.ascontiguousarray(rng.standard_normal((rows, cols)))
    gain = rng.standard_normal(cols)
    bias = rng.standard_normal(cols)
    _, xhat, inv_std = numpy_ops.layernorm_fwd(x, gain, bias, 1e-6)
    logits = np.ascontiguousarray(rng.standard_normal((rows, vocab)))
    targets = rng.integers(0, vocab, rows)
    active = np.ones(rows, dtype=np.bool_)
    _, probs = numpy_ops.cross_entropy_fwd(logits, targets, active, 0.1)
    flat = rng.standard_normal(rows * cols)
    adam = (flat.copy(), rng.standard_normal(rows * cols),
            np.zeros(rows * cols), np.zeros(rows * cols))

    return {
        "softmax_fwd": lambda m: m.softmax_fwd(x),
        "softmax_bwd": lambda m: m.softmax_bwd(y, dy),
        "layernorm_fwd": lambda m: m.layernorm_fwd(x, gain, bias, 1e-6),
        "layernorm_bwd": lambda m: m.layernorm_bwd(dy, xhat, inv_std, gain),
        "adam_update": lambda m: m.adam_update(*adam, 3, 1e-3, 0.9, 0.98, 1e-9),
        "cross_entropy_fwd": lambda m: m.cross_entropy_fwd(logits, targets, active, 0.1),
        "cross_entropy_bwd": lambda m: m.cross_entropy_bwd(probs, targets, active, 0.1, 0.01),
    }


def median_call_us(fn, repeat):
    times = timeit.repeat(fn, number=1, repeat=repeat)
    return 1e6 * float(np.median(times))


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--rows", type=int, default=4096)
    ap.add_argument("--cols", type=int, default=64)
    ap.add_argument("--vocab", type=int, default=512)
    ap.add_argument("--repeat", type=int, default=30)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.Generator(np.random.PCG64(args.seed))
    cases = build_cases(args.rows, args.cols, args.vocab, rng)

    print(f"rows={args.rows} cols={args.cols} vocab={args.vocab} "
          f"(median of {args.repeat} calls, microseconds)")
    header = f"{'kernel':<20}{'numpy':>12}{'numba':>12}{'speedup':>10}"
    print(header)
    print("-" * len(header))
    for name, call in cases.items():
        if numba_ops is not None:
            call(numba_ops)  # trigger JIT outside the timed region
            t_nb = median_call_us(lambda: call(numba_ops), args.repeat)
        t_np = median_call_us(lambda: call(numpy_ops), args.repeat)
        if numba_ops is None:
            print(f"{name:<20}{t_np:>12.1f}{'n/a':>12}{'n/a':>10}")
        else:
            print(f"{name:<20}{t_np:>12.1f}{t_nb:>12.1f}{t_np / t_nb:>9.2f}x")
    if numba_ops is None:
        print("numba unavailable; only the numpy backend was timed")


if __name__ == "__main__":
    main()
