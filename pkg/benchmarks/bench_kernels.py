"""Compare the compiled kernels with the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--repeats N]
"""
import argparse
import time

import numpy as np

from diffem import _pykernels, kernels

CASES = [
    ("cholesky_batch", "K=64, d=3", lambda rng: _spd(rng, 64, 3)),
    ("cholesky_batch", "K=16, d=48", lambda rng: _spd(rng, 16, 48)),
    ("eigh_batch", "K=64, d=3", lambda rng: _spd(rng, 64, 3)),
    ("eigh_batch", "K=4, d=48", lambda rng: _spd(rng, 4, 48)),
    ("logsumexp_rows", "n=4096, K=10", lambda rng: rng.standard_normal((4096, 10))),
]


def _spd(rng, K, d):
    a = rng.standard_normal((K, d, d))
    return np.ascontiguousarray(a @ np.swapaxes(a, 1, 2) + d * np.eye(d))


def best_time(fn, arg, repeats):
    fn(arg)
    times = []
    for _ in range(repeats):
        t = time.perf_counter()
        fn(arg)
        times.append(time.perf_counter() - t)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()
    if kernels.compiled is None:
        print("compiled extension not built; only the fallback is available")
        return
    rng = np.random.default_rng(0)
    print(f"{'kernel':16s} {'case':14s} {'compiled [ms]':>14s} {'python [ms]':>12s} {'speed-up':>9s}")
    for name, label, make in CASES:
        arg = make(rng)
        tc = best_time(getattr(kernels.compiled, name), arg, args.repeats)
        tp = best_time(getattr(_pykernels, name), arg, args.repeats)
        print(f"{name:16s} {label:14s} {1e3 * tc:14.3f} {1e3 * tp:12.3f} {tp / tc:9.1f}")


if __name__ == "__main__":
    main()
