"""Time the selective-scan kernels with numba against the pure-numpy path.

    python benchmarks/bench_scan.py [--repeat 5] [--quick]

Shapes follow the toy training run (batch 8, 80 tokens, width 64, state 4)
plus a longer sequence. Each row reports the best-of-N wall time per call and
the max relative difference between the two backends.
"""
import argparse
import time

import numpy as np

from fetrack._accel import HAVE_NUMBA
from fetrack.numerics import Rng
from fetrack.ssm import (ScanInputs, SsmParams, selective_scan_backward, selective_scan_parallel,
                         selective_scan_seq)

SHAPES = [(8, 80, 64, 4), (1, 320, 64, 16), (4, 1024, 32, 8)]


def instance(shape, dtype, seed=0):
    B, L, D, N = shape
    r = Rng(seed)
    params = SsmParams(np.log(np.tile(np.geomspace(1.0, N, N), (D, 1))).astype(dtype), np.ones(D, dtype))
    inputs = ScanInputs(r.normal((B, L, D), 1.0, dtype), r.normal((B, L, N), 1.0, dtype),
                        r.normal((B, L, N), 1.0, dtype), np.exp(r.normal((B, L, D), 0.5)).astype(dtype) * 0.05)
    return params, inputs, r.normal((B, L, D), 1.0, dtype)


def best(fn, repeat):
    fn()  # warm-up (numba compiles or loads its cache here)
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def rel(a, b):
    return float(np.abs(a - b).max() / max(np.abs(a).max(), 1e-30))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--quick", action="store_true", help="first shape only")
    ap.add_argument("--precision", type=int, choices=(32, 64), default=32)
    args = ap.parse_args(argv)
    if not HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    dtype = np.float32 if args.precision == 32 else np.float64

    print(f"{'kernel':<10} {'B x L x D x N':<18} {'numba ms':>9} {'numpy ms':>9} {'speedup':>8} {'rel diff':>9}")
    for shape in SHAPES[:1] if args.quick else SHAPES:
        p, x, gy = instance(shape, dtype)
        kernels = {
            "forward": lambda nb: selective_scan_seq(p, x, use_numba=nb).y,
            "parallel": lambda nb: selective_scan_parallel(p, x, use_numba=nb).y,
            "backward": lambda nb: selective_scan_backward(p, x, gy, use_numba=nb).delta,
        }
        for name, k in kernels.items():
            t_nb = best(lambda: k(True), args.repeat)
            t_np = best(lambda: k(False), max(1, args.repeat // 2))
            diff = rel(k(True), k(False))
            dims = " x ".join(map(str, shape))
            print(f"{name:<10} {dims:<18} {1e3 * t_nb:9.2f} {1e3 * t_np:9.2f} {t_np / t_nb:7.1f}x {diff:9.1e}")


if __name__ == "__main__":
    main()
