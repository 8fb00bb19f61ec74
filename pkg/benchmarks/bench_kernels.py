"""Time the numba and numpy pooling kernels on the same inputs.

    python3 benchmarks/bench_kernels.py [--repeats 20]

Both paths are checked for identical outputs before timing.
"""
import argparse
import time

import numpy as np

from cvggnet import _kernels as K

MODES = {"amplitude": K.AMPLITUDE, "area": K.AREA, "real-split": K.REAL_SPLIT}
SHAPES = [(32, 4, 32, 32), (32, 16, 64, 64), (8, 64, 112, 112)]


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=20)
    args = ap.parse_args()
    if not K.NUMBA_AVAILABLE:
        raise SystemExit("numba is not importable; nothing to compare")

    rng = np.random.default_rng(0)
    print(f"{'shape':>22} {'mode':>11} {'fwd numpy':>10} {'fwd numba':>10} {'bwd numpy':>10} {'bwd numba':>10}")
    for shape in SHAPES:
        re = rng.normal(size=shape).astype(np.float32)
        im = rng.normal(size=shape).astype(np.float32)
        for name, mode in MODES.items():
            ref = K.pool_forward_numpy(re, im, 2, 2, mode)
            got = K.pool_forward_numba(re, im, 2, 2, mode)  # also compiles
            for a, b in zip(ref, got):
                np.testing.assert_array_equal(a, b)
            g = rng.normal(size=ref[0].shape).astype(np.float32)
            bargs = (g, g, ref[2], ref[3], shape, 2, 2)
            np.testing.assert_array_equal(K.pool_backward_numpy(*bargs)[0], K.pool_backward_numba(*bargs)[0])

            row = [
                best_of(lambda: K.pool_forward_numpy(re, im, 2, 2, mode), args.repeats),
                best_of(lambda: K.pool_forward_numba(re, im, 2, 2, mode), args.repeats),
                best_of(lambda: K.pool_backward_numpy(*bargs), args.repeats),
                best_of(lambda: K.pool_backward_numba(*bargs), args.repeats),
            ]
            print(f"{str(shape):>22} {name:>11} " + " ".join(f"{t * 1e3:8.2f}ms" for t in row))


if __name__ == "__main__":
    main()
