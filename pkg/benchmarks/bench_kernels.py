"""Benchmark the compiled kernels against the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--pixels N] [--repeats R]
"""

import argparse
import time

import numpy as np

from evident.kernels import numpy_backend

try:
    from evident.kernels import _ckern
except ImportError:
    _ckern = None


def timeit(fn, repeats):
    best = np.inf
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--pixels", type=int, default=262_144,
                        help="batch size (default: one 512x512 image)")
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    n = args.pixels
    raw11 = rng.normal(0.0, 1.3, size=(n, 11))
    raw12 = rng.normal(0.0, 1.3, size=(n, 12))
    target = rng.normal(size=(n, 3))
    mean = rng.normal(size=(n, 3))
    log_var = rng.normal(size=(n, 3))
    payload = rng.integers(0, 256, size=4 * n, dtype=np.uint8).tobytes()

    cases = [
        ("niw_loss_grad", lambda b: b.niw_loss_grad(raw11, target, 1e-3,
                                                    1e-6)),
        ("niw_nll", lambda b: b.niw_nll(raw11, target, 1e-6)),
        ("nig_loss_grad", lambda b: b.nig_loss_grad(raw12, target, 1e-3,
                                                    1e-6)),
        ("hetero_loss_grad", lambda b: b.hetero_loss_grad(mean, log_var,
                                                          target)),
        ("crc64", lambda b: b.crc64(payload)),
    ]

    backends = [numpy_backend] + ([_ckern] if _ckern is not None else [])
    print(f"batch: {n} pixels, best of {args.repeats} runs")
    header = f"{'kernel':<18}" + "".join(f"{b.NAME + ' (ms)':>14}"
                                         for b in backends)
    if _ckern is not None:
        header += f"{'speedup':>10}"
    print(header)
    for name, call in cases:
        times = [timeit(lambda b=b: call(b), args.repeats) for b in backends]
        row = f"{name:<18}" + "".join(f"{t * 1e3:>14.2f}" for t in times)
        if _ckern is not None:
            row += f"{times[0] / times[1]:>9.1f}x"
        print(row)
    if _ckern is None:
        print("compiled extension not built; showing numpy fallback only")


if __name__ == "__main__":
    main()
